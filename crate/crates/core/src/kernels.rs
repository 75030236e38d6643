//! Scalar numeric kernels behind the tape primitives.
//!
//! All kernels are pure functions on row-major slices, single-threaded, and
//! accumulate in a fixed order, so outputs and adjoints are bitwise
//! reproducible run to run.  Border-normalized filters use a centered
//! evaluation `v + (sum of weighted differences) / weight-sum`, which
//! preserves constant fields exactly.

/// Fixed-order 4-way unrolled dot product.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i + 4 <= n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (s0 + s1) + (s2 + s3);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `ceil(n / s)` for the "same"-padded strided output extent.
#[inline]
pub(crate) fn conv_out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Strided 2-D convolution with zero "same" padding.
///
/// `x`: `[h, w, ci]`, `wt`: `[k, k, co, ci]`, `b`: `[co]`, `out`: `[ho, wo, co]`
/// with `ho = ceil(h/stride)`.  Sampling is center-anchored:
/// `in[oy*stride + ky - (k-1)/2]`.
pub(crate) fn conv2d_fwd(
    x: &[f64],
    (h, w, ci): (usize, usize, usize),
    wt: &[f64],
    (k, co): (usize, usize),
    b: &[f64],
    stride: usize,
    out: &mut [f64],
) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let c = (k - 1) / 2;
    for oy in 0..ho {
        for ox in 0..wo {
            let ob = (oy * wo + ox) * co;
            out[ob..ob + co].copy_from_slice(b);
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - c as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - c as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xb = (iy as usize * w + ix as usize) * ci;
                    let wb = (ky * k + kx) * co * ci;
                    let xrow = &x[xb..xb + ci];
                    for o in 0..co {
                        let wrow = &wt[wb + o * ci..wb + o * ci + ci];
                        out[ob + o] += dot(xrow, wrow);
                    }
                }
            }
        }
    }
}

/// Adjoints of [`conv2d_fwd`]; each destination slice may be empty to skip.
pub(crate) fn conv2d_bwd(
    g: &[f64],
    x: &[f64],
    (h, w, ci): (usize, usize, usize),
    wt: &[f64],
    (k, co): (usize, usize),
    stride: usize,
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let c = (k - 1) / 2;
    if !gb.is_empty() {
        for oy in 0..ho {
            for ox in 0..wo {
                let ob = (oy * wo + ox) * co;
                for o in 0..co {
                    gb[o] += g[ob + o];
                }
            }
        }
    }
    for oy in 0..ho {
        for ox in 0..wo {
            let ob = (oy * wo + ox) * co;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - c as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - c as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xb = (iy as usize * w + ix as usize) * ci;
                    let wb = (ky * k + kx) * co * ci;
                    for o in 0..co {
                        let go = g[ob + o];
                        if !gw.is_empty() {
                            axpy(&mut gw[wb + o * ci..wb + o * ci + ci], go, &x[xb..xb + ci]);
                        }
                        if !gx.is_empty() {
                            axpy(
                                &mut gx[xb..xb + ci],
                                go,
                                &wt[wb + o * ci..wb + o * ci + ci],
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Stride-2 transposed convolution: `[h, w, ci] -> [2h, 2w, co]`, the adjoint
/// map of the stride-2 "same" convolution above.
pub(crate) fn convt2d_fwd(
    x: &[f64],
    (h, w, ci): (usize, usize, usize),
    wt: &[f64],
    (k, co): (usize, usize),
    b: &[f64],
    out: &mut [f64],
) {
    let (ho, wo) = (2 * h, 2 * w);
    let c = (k - 1) / 2;
    for px in out.chunks_exact_mut(co) {
        px.copy_from_slice(b);
    }
    for iy in 0..h {
        for ix in 0..w {
            let xb = (iy * w + ix) * ci;
            let xrow = &x[xb..xb + ci];
            for ky in 0..k {
                let oy = (iy * 2 + ky) as isize - c as isize;
                if oy < 0 || oy >= ho as isize {
                    continue;
                }
                for kx in 0..k {
                    let ox = (ix * 2 + kx) as isize - c as isize;
                    if ox < 0 || ox >= wo as isize {
                        continue;
                    }
                    let ob = (oy as usize * wo + ox as usize) * co;
                    let wb = (ky * k + kx) * co * ci;
                    for o in 0..co {
                        out[ob + o] += dot(xrow, &wt[wb + o * ci..wb + o * ci + ci]);
                    }
                }
            }
        }
    }
}

pub(crate) fn convt2d_bwd(
    g: &[f64],
    x: &[f64],
    (h, w, ci): (usize, usize, usize),
    wt: &[f64],
    (k, co): (usize, usize),
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (ho, wo) = (2 * h, 2 * w);
    let c = (k - 1) / 2;
    if !gb.is_empty() {
        for px in g.chunks_exact(co) {
            for o in 0..co {
                gb[o] += px[o];
            }
        }
    }
    for iy in 0..h {
        for ix in 0..w {
            let xb = (iy * w + ix) * ci;
            for ky in 0..k {
                let oy = (iy * 2 + ky) as isize - c as isize;
                if oy < 0 || oy >= ho as isize {
                    continue;
                }
                for kx in 0..k {
                    let ox = (ix * 2 + kx) as isize - c as isize;
                    if ox < 0 || ox >= wo as isize {
                        continue;
                    }
                    let ob = (oy as usize * wo + ox as usize) * co;
                    let wb = (ky * k + kx) * co * ci;
                    for o in 0..co {
                        let go = g[ob + o];
                        if !gw.is_empty() {
                            axpy(&mut gw[wb + o * ci..wb + o * ci + ci], go, &x[xb..xb + ci]);
                        }
                        if !gx.is_empty() {
                            axpy(
                                &mut gx[xb..xb + ci],
                                go,
                                &wt[wb + o * ci..wb + o * ci + ci],
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Fully connected layer: `out[m] = b + W x` with `w`: `[m, n]`.
pub(crate) fn dense_fwd(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n).zip(b)) {
        *o = bias + dot(x, row);
    }
}

pub(crate) fn dense_bwd(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let n = x.len();
    for (m, &go) in g.iter().enumerate() {
        if !gb.is_empty() {
            gb[m] += go;
        }
        if !gw.is_empty() {
            axpy(&mut gw[m * n..(m + 1) * n], go, x);
        }
        if !gx.is_empty() {
            axpy(gx, go, &w[m * n..(m + 1) * n]);
        }
    }
}

// ---------------------------------------------------------------------------
// Separable border-renormalized filters.
//
// A filter line maps v[i] -> v[i] + (sum_t w_t (v[i+t-r] - v[i])) / s(i),
// s(i) the in-bounds weight sum.  Algebraically this is the renormalized
// correlation (K v)(i) / s(i); evaluated this way, constants pass through
// bitwise.  The adjoint of a line is g -> K (g / s).
// ---------------------------------------------------------------------------

struct Line {
    base: usize,
    stride: usize,
    len: usize,
}

fn filter_line_fwd(src: &[f64], dst: &mut [f64], line: &Line, kw: &[f64]) {
    let r = (kw.len() - 1) / 2;
    for i in 0..line.len {
        let center = src[line.base + i * line.stride];
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(line.len - 1);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for t in lo..=hi {
            let wgt = kw[t + r - i];
            acc += wgt * (src[line.base + t * line.stride] - center);
            wsum += wgt;
        }
        dst[line.base + i * line.stride] = center + acc / wsum;
    }
}

fn filter_line_bwd(g: &[f64], gx: &mut [f64], line: &Line, kw: &[f64], scratch: &mut [f64]) {
    let r = (kw.len() - 1) / 2;
    // scratch = g / s
    for i in 0..line.len {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(line.len - 1);
        let mut wsum = 0.0;
        for t in lo..=hi {
            wsum += kw[t + r - i];
        }
        scratch[i] = g[line.base + i * line.stride] / wsum;
    }
    for i in 0..line.len {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(line.len - 1);
        let mut acc = 0.0;
        for t in lo..=hi {
            acc += kw[t + r - i] * scratch[t];
        }
        gx[line.base + i * line.stride] += acc;
    }
}

fn for_each_line_x((h, w, c): (usize, usize, usize), mut f: impl FnMut(Line)) {
    for y in 0..h {
        for ch in 0..c {
            f(Line {
                base: y * w * c + ch,
                stride: c,
                len: w,
            });
        }
    }
}

fn for_each_line_y((h, w, c): (usize, usize, usize), mut f: impl FnMut(Line)) {
    for x in 0..w {
        for ch in 0..c {
            f(Line {
                base: x * c + ch,
                stride: w * c,
                len: h,
            });
        }
    }
}

/// Separable renormalized filtering of `[h, w, c]` data with a 1-D kernel
/// (x-axis pass, then y-axis pass).
pub(crate) fn separable_filter_fwd(
    x: &[f64],
    dims: (usize, usize, usize),
    kw: &[f64],
    out: &mut [f64],
) {
    let mut mid = vec![0.0; x.len()];
    for_each_line_x(dims, |line| filter_line_fwd(x, &mut mid, &line, kw));
    for_each_line_y(dims, |line| filter_line_fwd(&mid, out, &line, kw));
}

pub(crate) fn separable_filter_bwd(
    g: &[f64],
    dims: (usize, usize, usize),
    kw: &[f64],
    gx: &mut [f64],
) {
    let (h, w, _) = dims;
    let mut scratch = vec![0.0; h.max(w)];
    // Reverse order of the forward passes: adjoint of y pass, then x pass.
    let mut mid = vec![0.0; g.len()];
    for_each_line_y(dims, |line| filter_line_bwd(g, &mut mid, &line, kw, &mut scratch));
    for_each_line_x(dims, |line| filter_line_bwd(&mid, gx, &line, kw, &mut scratch));
}

/// k x k mean filter normalized by the in-bounds pixel count (a separable
/// renormalized filter with all-ones weights).
pub(crate) fn mean_filter_fwd(x: &[f64], dims: (usize, usize, usize), k: usize, out: &mut [f64]) {
    let ones = vec![1.0; k];
    separable_filter_fwd(x, dims, &ones, out);
}

pub(crate) fn mean_filter_bwd(g: &[f64], dims: (usize, usize, usize), k: usize, gx: &mut [f64]) {
    let ones = vec![1.0; k];
    separable_filter_bwd(g, dims, &ones, gx);
}

/// Factor-2 linear downsampling: mean over 2x2 blocks.
pub(crate) fn downsample_fwd(x: &[f64], (h, w, c): (usize, usize, usize), out: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let i00 = ((2 * oy) * w + 2 * ox) * c + ch;
                let i01 = i00 + c;
                let i10 = i00 + w * c;
                let i11 = i10 + c;
                out[(oy * wo + ox) * c + ch] = ((x[i00] + x[i01]) + (x[i10] + x[i11])) / 4.0;
            }
        }
    }
}

pub(crate) fn downsample_bwd(g: &[f64], (h, w, c): (usize, usize, usize), gx: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let go = g[(oy * wo + ox) * c + ch] / 4.0;
                let i00 = ((2 * oy) * w + 2 * ox) * c + ch;
                gx[i00] += go;
                gx[i00 + c] += go;
                gx[i00 + w * c] += go;
                gx[i00 + w * c + c] += go;
            }
        }
    }
}

#[derive(Clone, Copy)]
struct TapWeights {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    clamped_x: bool,
    clamped_y: bool,
}

#[inline]
fn sample_taps(px: f64, py: f64, h: usize, w: usize) -> TapWeights {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let clamped_x = px < 0.0 || px > max_x;
    let clamped_y = py < 0.0 || py > max_y;
    let cx = px.clamp(0.0, max_x);
    let cy = py.clamp(0.0, max_y);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    TapWeights {
        x0,
        x1,
        y0,
        y1,
        fx: cx - x0 as f64,
        fy: cy - y0 as f64,
        clamped_x,
        clamped_y,
    }
}

/// Bilinear resampling of `img` (`[h, w, c]`) at the absolute coordinates in
/// `phi` (`[h, w, 2]`, channel 0 = x, channel 1 = y), clamp-to-edge.
pub(crate) fn warp_fwd(img: &[f64], (h, w, c): (usize, usize, usize), phi: &[f64], out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let pb = (y * w + x) * 2;
            let t = sample_taps(phi[pb], phi[pb + 1], h, w);
            let b00 = (t.y0 * w + t.x0) * c;
            let b01 = (t.y0 * w + t.x1) * c;
            let b10 = (t.y1 * w + t.x0) * c;
            let b11 = (t.y1 * w + t.x1) * c;
            let ob = (y * w + x) * c;
            for ch in 0..c {
                let top = (1.0 - t.fx) * img[b00 + ch] + t.fx * img[b01 + ch];
                let bot = (1.0 - t.fx) * img[b10 + ch] + t.fx * img[b11 + ch];
                out[ob + ch] = (1.0 - t.fy) * top + t.fy * bot;
            }
        }
    }
}

pub(crate) fn warp_bwd_img(
    g: &[f64],
    (h, w, c): (usize, usize, usize),
    phi: &[f64],
    gimg: &mut [f64],
) {
    for y in 0..h {
        for x in 0..w {
            let pb = (y * w + x) * 2;
            let t = sample_taps(phi[pb], phi[pb + 1], h, w);
            let b00 = (t.y0 * w + t.x0) * c;
            let b01 = (t.y0 * w + t.x1) * c;
            let b10 = (t.y1 * w + t.x0) * c;
            let b11 = (t.y1 * w + t.x1) * c;
            let ob = (y * w + x) * c;
            for ch in 0..c {
                let go = g[ob + ch];
                gimg[b00 + ch] += go * (1.0 - t.fx) * (1.0 - t.fy);
                gimg[b01 + ch] += go * t.fx * (1.0 - t.fy);
                gimg[b10 + ch] += go * (1.0 - t.fx) * t.fy;
                gimg[b11 + ch] += go * t.fx * t.fy;
            }
        }
    }
}

pub(crate) fn warp_bwd_phi(
    g: &[f64],
    img: &[f64],
    (h, w, c): (usize, usize, usize),
    phi: &[f64],
    gphi: &mut [f64],
) {
    for y in 0..h {
        for x in 0..w {
            let pb = (y * w + x) * 2;
            let t = sample_taps(phi[pb], phi[pb + 1], h, w);
            let b00 = (t.y0 * w + t.x0) * c;
            let b01 = (t.y0 * w + t.x1) * c;
            let b10 = (t.y1 * w + t.x0) * c;
            let b11 = (t.y1 * w + t.x1) * c;
            let ob = (y * w + x) * c;
            let (mut dx, mut dy) = (0.0, 0.0);
            for ch in 0..c {
                let go = g[ob + ch];
                let (v00, v01, v10, v11) =
                    (img[b00 + ch], img[b01 + ch], img[b10 + ch], img[b11 + ch]);
                dx += go * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                dy += go * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
            }
            if !t.clamped_x {
                gphi[pb] += dx;
            }
            if !t.clamped_y {
                gphi[pb + 1] += dy;
            }
        }
    }
}
