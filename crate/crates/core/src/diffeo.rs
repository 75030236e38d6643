//! Differentiable deformation machinery on 2-D pixel grids.
//!
//! Deformations are parametrized by stationary velocity fields: a velocity
//! `v` (pixels) is turned into a dense mapping `phi = exp(v)` by scaling and
//! squaring, i.e. `phi_0 = id + v / 2^N` followed by `N` self-compositions.
//! All sampling is bilinear with clamp-to-edge; every operation here exists
//! both as a tape primitive composition (differentiable, for training) and as
//! a plain function on the domain types (for inference and evaluation), and
//! both paths run the same kernels in the same order, so their outputs are
//! bitwise identical.
//!
//! Conventions: fields are `[H, W, 2]` with channel 0 the x (column)
//! component and channel 1 the y (row) component; deformations store
//! absolute target coordinates `phi(x) = x + u(x)`.

use crate::error::{DregError, Result};
use crate::kernels;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// A 2-D intensity image with isotropic pixel spacing (physical units per px).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage {
    data: Tensor,
    spacing: f64,
}

impl ScalarImage {
    pub fn new(data: Tensor, spacing: f64) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(DregError::shape(
                "scalar_image",
                format!("expected [H, W], got {:?}", data.shape()),
            ));
        }
        Ok(ScalarImage { data, spacing })
    }

    pub fn from_grid(h: usize, w: usize, data: Vec<f64>, spacing: f64) -> Result<Self> {
        Self::new(Tensor::new(vec![h, w], data)?, spacing)
    }

    pub fn h(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data.data()[y * self.w() + x]
    }

    /// Grid constraint for an `n`-scale model: extents at least 8 and
    /// divisible by `2^(n-1)`.
    pub fn check_scale_compatible(&self, num_scales: usize) -> Result<()> {
        let div = 1usize << (num_scales - 1);
        for e in [self.h(), self.w()] {
            if e < 8 || e % div != 0 {
                return Err(DregError::Invalid(format!(
                    "image extent {e} must be >= 8 and divisible by {div} for {num_scales} scales"
                )));
            }
        }
        Ok(())
    }
}

/// A per-pixel 2-vector field in pixel units (velocity or displacement).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    data: Tensor,
    scale_index: u32,
}

impl VectorField {
    pub fn new(data: Tensor) -> Result<Self> {
        Self::at_scale(data, 1)
    }

    pub fn at_scale(data: Tensor, scale_index: u32) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[2] != 2 || scale_index < 1 {
            return Err(DregError::shape(
                "vector_field",
                format!("expected [H, W, 2], got {:?}", data.shape()),
            ));
        }
        Ok(VectorField { data, scale_index })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        VectorField {
            data: Tensor::zeros(&[h, w, 2]),
            scale_index: 1,
        }
    }

    pub fn h(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn scale_index(&self) -> u32 {
        self.scale_index
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Largest absolute component over all pixels.
    pub fn max_norm_inf(&self) -> f64 {
        self.data.max_abs()
    }
}

/// A dense mapping `phi(x) = x + u(x)`.
///
/// The displacement `u` is the stored representation (it is also what gets
/// serialized); absolute coordinates are materialized on demand.  Storing `u`
/// keeps `compose` with the identity and displacement recovery exact.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    u: Tensor,
}

impl DeformationField {
    /// Builds a field from its displacement `u = phi - id`.
    pub fn from_displacement(u: Tensor) -> Result<Self> {
        if u.shape().len() != 3 || u.shape()[2] != 2 {
            return Err(DregError::shape(
                "deformation_field",
                format!("expected [H, W, 2], got {:?}", u.shape()),
            ));
        }
        Ok(DeformationField { u })
    }

    /// Builds a field from absolute target coordinates `phi`.
    pub fn from_absolute(phi: Tensor) -> Result<Self> {
        if phi.shape().len() != 3 || phi.shape()[2] != 2 {
            return Err(DregError::shape(
                "deformation_field",
                format!("expected [H, W, 2], got {:?}", phi.shape()),
            ));
        }
        let id = identity_grid(phi.shape()[0], phi.shape()[1]);
        let u: Vec<f64> = phi
            .data()
            .iter()
            .zip(id.data())
            .map(|(p, i)| p - i)
            .collect();
        let shape = phi.shape().to_vec();
        Ok(DeformationField {
            u: Tensor::new(shape, u).expect("shape"),
        })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        DeformationField {
            u: Tensor::zeros(&[h, w, 2]),
        }
    }

    pub fn h(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.u.shape()[1]
    }

    /// The stored displacement tensor.
    pub fn displacement_tensor(&self) -> &Tensor {
        &self.u
    }

    /// Displacement as a [`VectorField`].
    pub fn displacement(&self) -> VectorField {
        VectorField::new(self.u.clone()).expect("shape")
    }

    /// Absolute coordinates `phi(x) = x + u(x)` as a `[H, W, 2]` tensor.
    pub fn absolute(&self) -> Tensor {
        let id = identity_grid(self.h(), self.w());
        let data: Vec<f64> = id
            .data()
            .iter()
            .zip(self.u.data())
            .map(|(i, u)| i + u)
            .collect();
        Tensor::new(vec![self.h(), self.w(), 2], data).expect("shape")
    }
}

/// The identity sampling grid as a `[H, W, 2]` tensor.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(x as f64);
            data.push(y as f64);
        }
    }
    Tensor::new(vec![h, w, 2], data).expect("shape")
}

/// Samples a normalized Gaussian kernel of odd size `k`.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Vec<f64> {
    let c = (k as isize - 1) / 2;
    let mut kw: Vec<f64> = (0..k as isize)
        .map(|t| {
            let d = (t - c) as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = kw.iter().sum();
    for v in &mut kw {
        *v /= s;
    }
    kw
}

// ---------------------------------------------------------------------------
// Tape (differentiable) variants.
// ---------------------------------------------------------------------------

/// Taped exponential: the displacement and the absolute map of `exp(v)`.
pub struct TapedExp {
    /// Displacement `u = exp(v) - id`.
    pub u: Value,
    /// Absolute coordinates `id + u`, ready for [`Tape::warp`].
    pub phi: Value,
}

/// Scaling-and-squaring exponential on the tape.
///
/// Works on displacements: `u_0 = v / 2^N`, then `N` times
/// `u <- u + sample(u, at id + u)`.  The plain [`exponentiate`] runs the same
/// kernel sequence, so both paths agree bitwise.
pub fn exponentiate_on(tape: &mut Tape, v: Value, steps: u32) -> Result<TapedExp> {
    let shape = tape.value(v).shape().to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(DregError::shape(
            "exponentiate",
            format!("expected [H, W, 2], got {shape:?}"),
        ));
    }
    warn_if_coarse(tape.value(v).max_abs(), steps);
    let factor = 0.5f64.powi(steps as i32);
    let id = tape.constant(identity_grid(shape[0], shape[1]));
    let mut u = tape.scale(v, factor)?;
    let mut phi = tape.add(id, u)?;
    for _ in 0..steps {
        let moved = tape.warp(u, phi)?;
        u = tape.add(u, moved)?;
        phi = tape.add(id, u)?;
    }
    Ok(TapedExp { u, phi })
}

/// Gaussian velocity smoothing on the tape; `sigma = 0` is the identity.
pub fn gaussian_smooth_on(tape: &mut Tape, v: Value, sigma: f64, kernel_size: usize) -> Result<Value> {
    if kernel_size.is_multiple_of(2) {
        return Err(DregError::Invalid(format!(
            "gaussian_smooth: kernel size {kernel_size} must be odd"
        )));
    }
    if sigma == 0.0 {
        return Ok(v);
    }
    let kw = gaussian_kernel(sigma, kernel_size);
    tape.separable_filter(v, &kw)
}

fn warn_if_coarse(max_norm: f64, steps: u32) {
    let scaled = max_norm * 0.5f64.powi(steps as i32);
    if scaled > 0.5 {
        log::warn!(
            "exponentiate: scaled step {scaled:.3} px exceeds 0.5 px (max-norm {max_norm:.3}, N={steps}); accuracy degrades"
        );
    }
}

// ---------------------------------------------------------------------------
// Plain variants on domain types.
// ---------------------------------------------------------------------------

/// `phi = exp(v)` by scaling and squaring with `steps` self-compositions.
pub fn exponentiate(v: &VectorField, steps: u32) -> DeformationField {
    warn_if_coarse(v.max_norm_inf(), steps);
    let (h, w) = (v.h(), v.w());
    let factor = 0.5f64.powi(steps as i32);
    let id = identity_grid(h, w);
    let mut u: Vec<f64> = v.tensor().data().iter().map(|vv| vv * factor).collect();
    let mut phi: Vec<f64> = id.data().iter().zip(&u).map(|(i, uu)| i + uu).collect();
    let mut moved = vec![0.0; u.len()];
    for _ in 0..steps {
        kernels::warp_fwd(&u, (h, w, 2), &phi, &mut moved);
        for (uu, m) in u.iter_mut().zip(&moved) {
            *uu += m;
        }
        for ((p, i), uu) in phi.iter_mut().zip(id.data()).zip(&u) {
            *p = i + uu;
        }
    }
    DeformationField {
        u: Tensor::new(vec![h, w, 2], u).expect("shape"),
    }
}

/// Bilinear warp with clamp-to-edge boundary.
pub fn warp(img: &ScalarImage, phi: &DeformationField) -> Result<ScalarImage> {
    if (img.h(), img.w()) != (phi.h(), phi.w()) {
        return Err(DregError::shape(
            "warp",
            format!(
                "image {}x{} vs field {}x{}",
                img.h(),
                img.w(),
                phi.h(),
                phi.w()
            ),
        ));
    }
    let mut out = vec![0.0; img.h() * img.w()];
    kernels::warp_fwd(
        img.tensor().data(),
        (img.h(), img.w(), 1),
        phi.absolute().data(),
        &mut out,
    );
    ScalarImage::from_grid(img.h(), img.w(), out, img.spacing())
}

/// `(phi1 o phi2)(x) = phi1(phi2(x))`: channelwise bilinear sampling of
/// `phi1`'s displacement at `phi2`, clamp-to-edge.
pub fn compose(phi1: &DeformationField, phi2: &DeformationField) -> Result<DeformationField> {
    if (phi1.h(), phi1.w()) != (phi2.h(), phi2.w()) {
        return Err(DregError::shape(
            "compose",
            format!(
                "{}x{} vs {}x{}",
                phi1.h(),
                phi1.w(),
                phi2.h(),
                phi2.w()
            ),
        ));
    }
    let (h, w) = (phi1.h(), phi1.w());
    let mut moved = vec![0.0; h * w * 2];
    kernels::warp_fwd(
        phi1.displacement_tensor().data(),
        (h, w, 2),
        phi2.absolute().data(),
        &mut moved,
    );
    let out: Vec<f64> = phi2
        .displacement_tensor()
        .data()
        .iter()
        .zip(&moved)
        .map(|(p, m)| p + m)
        .collect();
    Ok(DeformationField {
        u: Tensor::new(vec![h, w, 2], out).expect("shape"),
    })
}

/// Per-pixel determinant of the spatial Jacobian of `phi`, by central
/// differences (one-sided at the borders).
pub fn jacobian_determinant(phi: &DeformationField) -> Result<ScalarImage> {
    let (h, w) = (phi.h(), phi.w());
    if h < 3 || w < 3 {
        return Err(DregError::Invalid(format!(
            "jacobian_determinant: grid {h}x{w} must be at least 3x3"
        )));
    }
    let d = phi.displacement_tensor().data();
    let at = |y: usize, x: usize, c: usize| d[(y * w + x) * 2 + c];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1, ddx) = if x == 0 {
                (0, 1, 1.0)
            } else if x == w - 1 {
                (w - 2, w - 1, 1.0)
            } else {
                (x - 1, x + 1, 2.0)
            };
            let (y0, y1, ddy) = if y == 0 {
                (0, 1, 1.0)
            } else if y == h - 1 {
                (h - 2, h - 1, 1.0)
            } else {
                (y - 1, y + 1, 2.0)
            };
            // d phi / d axis = identity Jacobian + displacement differences
            let dxdx = 1.0 + (at(y, x1, 0) - at(y, x0, 0)) / ddx;
            let dydx = (at(y, x1, 1) - at(y, x0, 1)) / ddx;
            let dxdy = (at(y1, x, 0) - at(y0, x, 0)) / ddy;
            let dydy = 1.0 + (at(y1, x, 1) - at(y0, x, 1)) / ddy;
            out[y * w + x] = dxdx * dydy - dxdy * dydx;
        }
    }
    ScalarImage::from_grid(h, w, out, 1.0)
}

/// Separable Gaussian smoothing with border renormalization; `sigma = 0`
/// returns the field unchanged.
pub fn gaussian_smooth(v: &VectorField, sigma: f64, kernel_size: usize) -> Result<VectorField> {
    if kernel_size.is_multiple_of(2) {
        return Err(DregError::Invalid(format!(
            "gaussian_smooth: kernel size {kernel_size} must be odd"
        )));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let kw = gaussian_kernel(sigma, kernel_size);
    let mut out = vec![0.0; v.tensor().numel()];
    kernels::separable_filter_fwd(v.tensor().data(), (v.h(), v.w(), 2), &kw, &mut out);
    VectorField::at_scale(
        Tensor::new(vec![v.h(), v.w(), 2], out)?,
        v.scale_index(),
    )
}

/// Seeded smooth random velocity field rescaled to a given max-norm;
/// Gaussian-filtered white noise.  Used by oracle comparisons and property
/// sweeps that need "a smooth field of bounded magnitude".
pub fn random_smooth_field(h: usize, w: usize, max_norm: f64, seed: u64) -> VectorField {
    random_smooth_field_with(h, w, max_norm, 3.0, 13, seed)
}

/// [`random_smooth_field`] with an explicit smoothing scale.
pub fn random_smooth_field_with(
    h: usize,
    w: usize,
    max_norm: f64,
    sigma: f64,
    kernel: usize,
    seed: u64,
) -> VectorField {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..h * w * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let raw = VectorField::new(Tensor::new(vec![h, w, 2], noise).expect("shape")).expect("shape");
    let smooth = gaussian_smooth(&raw, sigma, kernel).expect("odd kernel");
    let m = smooth.max_norm_inf();
    let data: Vec<f64> = smooth
        .tensor()
        .data()
        .iter()
        .map(|v| v * max_norm / m)
        .collect();
    VectorField::new(Tensor::new(vec![h, w, 2], data).expect("shape")).expect("shape")
}

/// Squaring-step count from the accuracy rule `N = max(2, ceil(log2(maxnorm / 0.5)))`.
/// Diagnostic only; the trainer uses a fixed N.
pub fn choose_squaring_steps(v: &VectorField) -> u32 {
    let m = v.max_norm_inf();
    if m <= 0.0 {
        return 2;
    }
    let n = (m / 0.5).log2().ceil();
    (n.max(2.0)) as u32
}

// ---------------------------------------------------------------------------
// Binary masks.
// ---------------------------------------------------------------------------

/// A binary pixel mask, serialized as a 0/1-valued DRT1 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(DregError::shape("binary_mask", format!("{h}x{w}")));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.h, self.w],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(DregError::shape(
                "binary_mask",
                format!("expected [H, W], got {:?}", t.shape()),
            ));
        }
        Ok(BinaryMask {
            h: t.shape()[0],
            w: t.shape()[1],
            data: t.data().iter().map(|&v| v >= 0.5).collect(),
        })
    }
}

/// Warps a mask by nearest-neighbor sampling of `phi`, preserving binarity.
pub fn warp_mask_nearest(mask: &BinaryMask, phi: &DeformationField) -> Result<BinaryMask> {
    if (mask.h(), mask.w()) != (phi.h(), phi.w()) {
        return Err(DregError::shape(
            "warp_mask_nearest",
            format!(
                "mask {}x{} vs field {}x{}",
                mask.h(),
                mask.w(),
                phi.h(),
                phi.w()
            ),
        ));
    }
    let (h, w) = (mask.h(), mask.w());
    let abs = phi.absolute();
    let d = abs.data();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = d[(y * w + x) * 2].clamp(0.0, (w - 1) as f64);
            let py = d[(y * w + x) * 2 + 1].clamp(0.0, (h - 1) as f64);
            out[y * w + x] = mask.at(py.round() as usize, px.round() as usize);
        }
    }
    BinaryMask::new(h, w, out)
}
