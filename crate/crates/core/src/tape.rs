//! Reverse-mode automatic differentiation over a recorded primitive tape.
//!
//! A [`Tape`] owns every intermediate tensor of a forward computation.
//! Primitive applications append nodes; [`Tape::backward`] replays the tape
//! in reverse creation order (which is a reverse topological order, since
//! inputs always precede outputs) and accumulates adjoints.  The engine is
//! deliberately small: dense tensors, a fixed primitive set, no broadcasting,
//! no second-order derivatives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DregError, Result};
use crate::kernels;
use crate::tensor::{Parameter, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(u32);

impl Value {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { stride: usize },
    ConvTranspose2d,
    Dense,
    LeakyRelu { slope: f64 },
    Tanh,
    Exp,
    Add,
    Sub,
    Mul,
    Div,
    Scale { factor: f64 },
    AddScalar {
        #[allow(dead_code)] // kept for Debug output; the adjoint is the identity
        offset: f64,
    },
    ConcatChannels { left_channels: usize },
    SpatialDownsample,
    MeanFilter { k: usize },
    SeparableFilter { kernel: Vec<f64> },
    ReduceSum,
    ReduceMean,
    Warp,
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d => "conv2d_transpose",
            Op::Dense => "dense",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SpatialDownsample => "spatial_downsample",
            Op::MeanFilter { .. } => "mean_filter",
            Op::SeparableFilter { .. } => "separable_filter",
            Op::ReduceSum => "reduce_sum",
            Op::ReduceMean => "reduce_mean",
            Op::Warp => "warp",
            Op::Reshape => "reshape",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Value>,
    out: Tensor,
    requires_grad: bool,
}

/// Recorded forward computation plus, after [`Tape::backward`], its adjoints.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_leaves: Vec<(usize, Value)>,
}

/// `(h, w, c)` of a rank-2 or rank-3 tensor, treating `[H, W]` as one channel.
fn dims_hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(DregError::shape(op, format!("expected [H,W] or [H,W,C], got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.idx()].out
    }

    /// Adjoint of a node, if `backward` reached it.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.idx()).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, inputs: Vec<Value>, out: Tensor) -> Value {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.idx()].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            out,
            requires_grad,
        });
        Value((self.nodes.len() - 1) as u32)
    }

    /// Records an input tensor; gradient tracking follows its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            out: t,
            requires_grad,
        });
        Value((self.nodes.len() - 1) as u32)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a parameter leaf bound to registry slot `slot`, so that
    /// [`Tape::accumulate_param_grads`] can route its adjoint back.
    pub fn param(&mut self, slot: usize, p: &Parameter) -> Value {
        let v = self.leaf(p.value().clone().with_requires_grad(true));
        self.param_leaves.push((slot, v));
        v
    }

    // -- primitives ---------------------------------------------------------

    /// Strided 2-D convolution with zero "same" padding.
    /// `x`: `[H,W,Ci]`, `w`: `[K,K,Co,Ci]` (odd `K`), `b`: `[Co]`.
    pub fn conv2d(&mut self, x: Value, w: Value, b: Value, stride: usize) -> Result<Value> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let ok = xs.len() == 3
            && ws.len() == 4
            && ws[0] == ws[1]
            && ws[0] % 2 == 1
            && ws[3] == xs[2]
            && bs == [ws[2]]
            && stride >= 1;
        if !ok {
            return Err(DregError::shape(
                "conv2d",
                format!("x {xs:?}, w {ws:?}, b {bs:?}, stride {stride}"),
            ));
        }
        let (h, w_, ci) = (xs[0], xs[1], xs[2]);
        let (k, co) = (ws[0], ws[2]);
        let (ho, wo) = (
            kernels::conv_out_extent(h, stride),
            kernels::conv_out_extent(w_, stride),
        );
        let mut out = Tensor::zeros(&[ho, wo, co]);
        kernels::conv2d_fwd(
            self.value(x).data(),
            (h, w_, ci),
            self.value(w).data(),
            (k, co),
            self.value(b).data(),
            stride,
            out.data_mut(),
        );
        Ok(self.push(Op::Conv2d { stride }, vec![x, w, b], out))
    }

    /// Stride-2 transposed convolution; doubles both spatial extents.
    /// `x`: `[H,W,Ci]`, `w`: `[K,K,Co,Ci]` (odd `K`), `b`: `[Co]`.
    pub fn conv2d_transpose(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let ok = xs.len() == 3
            && ws.len() == 4
            && ws[0] == ws[1]
            && ws[0] % 2 == 1
            && ws[3] == xs[2]
            && bs == [ws[2]];
        if !ok {
            return Err(DregError::shape(
                "conv2d_transpose",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (h, w_, ci) = (xs[0], xs[1], xs[2]);
        let (k, co) = (ws[0], ws[2]);
        let mut out = Tensor::zeros(&[2 * h, 2 * w_, co]);
        kernels::convt2d_fwd(
            self.value(x).data(),
            (h, w_, ci),
            self.value(w).data(),
            (k, co),
            self.value(b).data(),
            out.data_mut(),
        );
        Ok(self.push(Op::ConvTranspose2d, vec![x, w, b], out))
    }

    /// Fully connected layer: `x`: `[N]`, `w`: `[M,N]`, `b`: `[M]`.
    pub fn dense(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(DregError::shape(
                "dense",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let mut out = Tensor::zeros(&[ws[0]]);
        kernels::dense_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        Ok(self.push(Op::Dense, vec![x, w, b], out))
    }

    pub fn leaky_relu(&mut self, x: Value, slope: f64) -> Result<Value> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::LeakyRelu { slope }, vec![x], out))
    }

    /// `max(x, 0)`; used to clamp variance estimates.
    pub fn relu(&mut self, x: Value) -> Result<Value> {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Value) -> Result<Value> {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Tanh, vec![x], out))
    }

    pub fn exp(&mut self, x: Value) -> Result<Value> {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Exp, vec![x], out))
    }

    fn binary(&mut self, op: Op, a: Value, b: Value) -> Result<Value> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DregError::shape(
                op.name(),
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| match op {
                Op::Add => x + y,
                Op::Sub => x - y,
                Op::Mul => x * y,
                Op::Div => x / y,
                _ => unreachable!(),
            })
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(op, vec![a, b], out))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(Op::Div, a, b)
    }

    pub fn scale(&mut self, x: Value, factor: f64) -> Result<Value> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Scale { factor }, vec![x], out))
    }

    pub fn add_scalar(&mut self, x: Value, offset: f64) -> Result<Value> {
        let data = self.value(x).data().iter().map(|v| v + offset).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::AddScalar { offset }, vec![x], out))
    }

    /// Concatenates two `[H,W,C]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(DregError::shape(
                "concat_channels",
                format!("{sa:?} vs {sb:?}"),
            ));
        }
        let (h, w, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for p in 0..h * w {
            data.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        let out = Tensor::new(vec![h, w, ca + cb], data)?;
        Ok(self.push(Op::ConcatChannels { left_channels: ca }, vec![a, b], out))
    }

    /// Factor-2 linear downsampling (2x2 block mean); extents must be even.
    pub fn spatial_downsample(&mut self, x: Value) -> Result<Value> {
        let (h, w, c) = dims_hwc("spatial_downsample", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DregError::shape(
                "spatial_downsample",
                format!("odd extents {:?}", self.value(x).shape()),
            ));
        }
        let rank2 = self.value(x).shape().len() == 2;
        let shape = if rank2 {
            vec![h / 2, w / 2]
        } else {
            vec![h / 2, w / 2, c]
        };
        let mut out = Tensor::zeros(&shape);
        kernels::downsample_fwd(self.value(x).data(), (h, w, c), out.data_mut());
        Ok(self.push(Op::SpatialDownsample, vec![x], out))
    }

    /// k x k mean filter, normalized by the in-bounds pixel count near borders.
    pub fn mean_filter(&mut self, x: Value, k: usize) -> Result<Value> {
        if k.is_multiple_of(2) || k == 0 {
            return Err(DregError::Invalid(format!(
                "mean_filter: window size {k} must be odd"
            )));
        }
        let dims = dims_hwc("mean_filter", self.value(x))?;
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::mean_filter_fwd(self.value(x).data(), dims, k, out.data_mut());
        Ok(self.push(Op::MeanFilter { k }, vec![x], out))
    }

    /// Separable correlation with a 1-D kernel, renormalized over in-bounds
    /// taps near borders.  Used for Gaussian velocity smoothing.
    pub fn separable_filter(&mut self, x: Value, kernel: &[f64]) -> Result<Value> {
        if kernel.len().is_multiple_of(2) || kernel.is_empty() {
            return Err(DregError::Invalid(format!(
                "separable_filter: kernel size {} must be odd",
                kernel.len()
            )));
        }
        let dims = dims_hwc("separable_filter", self.value(x))?;
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::separable_filter_fwd(self.value(x).data(), dims, kernel, out.data_mut());
        Ok(self.push(
            Op::SeparableFilter {
                kernel: kernel.to_vec(),
            },
            vec![x],
            out,
        ))
    }

    pub fn reduce_sum(&mut self, x: Value) -> Result<Value> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Op::ReduceSum, vec![x], Tensor::scalar(s)))
    }

    pub fn reduce_mean(&mut self, x: Value) -> Result<Value> {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Op::ReduceMean, vec![x], Tensor::scalar(s / n)))
    }

    /// Bilinear resampling of `img` (`[H,W]` or `[H,W,C]`) at absolute
    /// coordinates `phi` (`[H,W,2]`), clamp-to-edge; differentiable in both.
    pub fn warp(&mut self, img: Value, phi: Value) -> Result<Value> {
        let dims = dims_hwc("warp", self.value(img))?;
        let ps = self.value(phi).shape().to_vec();
        if ps != [dims.0, dims.1, 2] {
            return Err(DregError::shape(
                "warp",
                format!("img {:?}, phi {:?}", self.value(img).shape(), ps),
            ));
        }
        let mut out = Tensor::zeros(self.value(img).shape());
        kernels::warp_fwd(
            self.value(img).data(),
            dims,
            self.value(phi).data(),
            out.data_mut(),
        );
        Ok(self.push(Op::Warp, vec![img, phi], out))
    }

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], out))
    }

    // -- backward -----------------------------------------------------------

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    /// `loss` must be scalar.  A loss with no differentiable ancestry leaves
    /// all gradients zero.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(DregError::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.idx()].requires_grad {
            return Ok(());
        }
        self.grads[loss.idx()] = Some(vec![1.0]);
        for id in (0..=loss.idx()).rev() {
            if self.grads[id].is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = self.grads[id].take().expect("grad present");
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Adds the adjoints of parameter leaves into `Parameter::grad`.
    pub fn accumulate_param_grads(&self, params: &mut [Parameter]) {
        for &(slot, v) in &self.param_leaves {
            if let Some(g) = self.grad(v) {
                kernels::axpy(params[slot].grad_mut().data_mut(), 1.0, g);
            }
        }
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    fn ensure(grads: &mut [Option<Vec<f64>>], v: Value, n: usize) -> &mut [f64] {
        grads[v.idx()].get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let needs: Vec<bool> = self.nodes[id].inputs.iter().map(|&v| self.needs(v)).collect();
        if !needs.iter().any(|&b| b) {
            return;
        }
        let Tape { nodes, grads, .. } = self;
        let node = &nodes[id];
        let input = |i: usize| -> &Tensor { &nodes[node.inputs[i].idx()].out };
        let mut empty: [f64; 0] = [];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride } => {
                let x = input(0);
                let (h, w_, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let ws = input(1).shape();
                let (k, co) = (ws[0], ws[2]);
                for (i, gref) in [(0usize, true), (1, true), (2, true)] {
                    let _ = gref;
                    if !needs[i] {
                        continue;
                    }
                    let n = input(i).numel();
                    let xd = input(0).data();
                    let wd = input(1).data();
                    let buf = Self::ensure(grads, node.inputs[i], n);
                    let (gx, gw, gb): (&mut [f64], &mut [f64], &mut [f64]) = match i {
                        0 => (buf, &mut empty, &mut []),
                        1 => (&mut [], buf, &mut []),
                        _ => (&mut [], &mut empty, buf),
                    };
                    kernels::conv2d_bwd(g, xd, (h, w_, ci), wd, (k, co), *stride, gx, gw, gb);
                }
            }
            Op::ConvTranspose2d => {
                let x = input(0);
                let (h, w_, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let ws = input(1).shape();
                let (k, co) = (ws[0], ws[2]);
                for i in 0..3 {
                    if !needs[i] {
                        continue;
                    }
                    let n = input(i).numel();
                    let xd = input(0).data();
                    let wd = input(1).data();
                    let buf = Self::ensure(grads, node.inputs[i], n);
                    let (gx, gw, gb): (&mut [f64], &mut [f64], &mut [f64]) = match i {
                        0 => (buf, &mut empty, &mut []),
                        1 => (&mut [], buf, &mut []),
                        _ => (&mut [], &mut empty, buf),
                    };
                    kernels::convt2d_bwd(g, xd, (h, w_, ci), wd, (k, co), gx, gw, gb);
                }
            }
            Op::Dense => {
                for i in 0..3 {
                    if !needs[i] {
                        continue;
                    }
                    let n = input(i).numel();
                    let xd = input(0).data();
                    let wd = input(1).data();
                    let buf = Self::ensure(grads, node.inputs[i], n);
                    let (gx, gw, gb): (&mut [f64], &mut [f64], &mut [f64]) = match i {
                        0 => (buf, &mut empty, &mut []),
                        1 => (&mut [], buf, &mut []),
                        _ => (&mut [], &mut empty, buf),
                    };
                    kernels::dense_bwd(g, xd, wd, gx, gw, gb);
                }
            }
            Op::LeakyRelu { slope } => {
                let x = input(0).data();
                let buf = Self::ensure(grads, node.inputs[0], x.len());
                for i in 0..x.len() {
                    buf[i] += g[i] * if x[i] >= 0.0 { 1.0 } else { *slope };
                }
            }
            Op::Tanh => {
                let y = node.out.data();
                let buf = Self::ensure(grads, node.inputs[0], y.len());
                for i in 0..y.len() {
                    buf[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Exp => {
                let y = node.out.data();
                let buf = Self::ensure(grads, node.inputs[0], y.len());
                for i in 0..y.len() {
                    buf[i] += g[i] * y[i];
                }
            }
            Op::Add => {
                for i in 0..2 {
                    if needs[i] {
                        let buf = Self::ensure(grads, node.inputs[i], g.len());
                        kernels::axpy(buf, 1.0, g);
                    }
                }
            }
            Op::Sub => {
                if needs[0] {
                    let buf = Self::ensure(grads, node.inputs[0], g.len());
                    kernels::axpy(buf, 1.0, g);
                }
                if needs[1] {
                    let buf = Self::ensure(grads, node.inputs[1], g.len());
                    kernels::axpy(buf, -1.0, g);
                }
            }
            Op::Mul => {
                if needs[0] {
                    let other = input(1).data();
                    let buf = Self::ensure(grads, node.inputs[0], g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * other[i];
                    }
                }
                if needs[1] {
                    let other = input(0).data();
                    let buf = Self::ensure(grads, node.inputs[1], g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * other[i];
                    }
                }
            }
            Op::Div => {
                if needs[0] {
                    let b = input(1).data();
                    let buf = Self::ensure(grads, node.inputs[0], g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] / b[i];
                    }
                }
                if needs[1] {
                    let a = input(0).data();
                    let b = input(1).data();
                    let buf = Self::ensure(grads, node.inputs[1], g.len());
                    for i in 0..g.len() {
                        buf[i] -= g[i] * a[i] / (b[i] * b[i]);
                    }
                }
            }
            Op::Scale { factor } => {
                let buf = Self::ensure(grads, node.inputs[0], g.len());
                kernels::axpy(buf, *factor, g);
            }
            Op::AddScalar { .. } => {
                let buf = Self::ensure(grads, node.inputs[0], g.len());
                kernels::axpy(buf, 1.0, g);
            }
            Op::ConcatChannels { left_channels } => {
                let ca = *left_channels;
                let c = node.out.shape()[2];
                let cb = c - ca;
                let pixels = node.out.numel() / c;
                if needs[0] {
                    let buf = Self::ensure(grads, node.inputs[0], pixels * ca);
                    for p in 0..pixels {
                        kernels::axpy(&mut buf[p * ca..(p + 1) * ca], 1.0, &g[p * c..p * c + ca]);
                    }
                }
                if needs[1] {
                    let buf = Self::ensure(grads, node.inputs[1], pixels * cb);
                    for p in 0..pixels {
                        kernels::axpy(
                            &mut buf[p * cb..(p + 1) * cb],
                            1.0,
                            &g[p * c + ca..(p + 1) * c],
                        );
                    }
                }
            }
            Op::SpatialDownsample => {
                let dims = dims_hwc("spatial_downsample", input(0)).expect("validated");
                let buf = Self::ensure(grads, node.inputs[0], input(0).numel());
                kernels::downsample_bwd(g, dims, buf);
            }
            Op::MeanFilter { k } => {
                let dims = dims_hwc("mean_filter", input(0)).expect("validated");
                let buf = Self::ensure(grads, node.inputs[0], input(0).numel());
                kernels::mean_filter_bwd(g, dims, *k, buf);
            }
            Op::SeparableFilter { kernel } => {
                let dims = dims_hwc("separable_filter", input(0)).expect("validated");
                let kernel = kernel.clone();
                let buf = Self::ensure(grads, node.inputs[0], input(0).numel());
                kernels::separable_filter_bwd(g, dims, &kernel, buf);
            }
            Op::ReduceSum => {
                let buf = Self::ensure(grads, node.inputs[0], input(0).numel());
                for v in buf.iter_mut() {
                    *v += g[0];
                }
            }
            Op::ReduceMean => {
                let n = input(0).numel();
                let go = g[0] / n as f64;
                let buf = Self::ensure(grads, node.inputs[0], n);
                for v in buf.iter_mut() {
                    *v += go;
                }
            }
            Op::Warp => {
                let dims = dims_hwc("warp", input(0)).expect("validated");
                if needs[0] {
                    let phi = input(1).data();
                    let buf = Self::ensure(grads, node.inputs[0], input(0).numel());
                    kernels::warp_bwd_img(g, dims, phi, buf);
                }
                if needs[1] {
                    let img = input(0).data();
                    let phi = input(1).data();
                    let buf = Self::ensure(grads, node.inputs[1], input(1).numel());
                    kernels::warp_bwd_phi(g, img, dims, phi, buf);
                }
            }
            Op::Reshape => {
                let buf = Self::ensure(grads, node.inputs[0], g.len());
                kernels::axpy(buf, 1.0, g);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification harness.
// ---------------------------------------------------------------------------

/// Relative errors are measured against `max(|ad|, |fd|, DENOM_FLOOR)` so that
/// near-zero gradients are compared absolutely at the floor scale.
pub const GRAD_CHECK_DENOM_FLOOR: f64 = 1e-4;

/// Settings for [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Probe at most this many elements per parameter (seeded subsample);
    /// `None` probes every element.
    pub max_probes_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-4,
            max_probes_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    pub pass: bool,
    /// Location and values of the worst probe.
    pub worst: Option<String>,
    /// Set when a probe produced a non-finite loss.
    pub failure: Option<String>,
}

/// Compares the taped gradient of a scalar function against central finite
/// differences, probing each parameter element (or a seeded subsample).
///
/// `build` must be deterministic: it is re-invoked for every probe.
pub fn gradient_check<F>(params: &mut [Parameter], cfg: &GradCheck, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    let eval = |params: &[Parameter]| -> Result<f64> {
        let mut tape = Tape::new();
        let vals: Vec<Value> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let loss = build(&mut tape, &vals)?;
        if !tape.value(loss).is_scalar() {
            return Err(DregError::Invalid(
                "gradient_check: function must produce a scalar".into(),
            ));
        }
        Ok(tape.value(loss).item())
    };

    for p in params.iter_mut() {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let vals: Vec<Value> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let loss = build(&mut tape, &vals)?;
    if !tape.value(loss).is_scalar() {
        return Err(DregError::Invalid(
            "gradient_check: function must produce a scalar".into(),
        ));
    }
    tape.backward(loss)?;
    tape.accumulate_param_grads(params);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        probes: 0,
        pass: false,
        worst: None,
        failure: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..params.len() {
        let n = params[i].value().numel();
        let mut probes: Vec<usize> = match cfg.max_probes_per_param {
            Some(m) if m < n => rand::seq::index::sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        probes.sort_unstable();
        for e in probes {
            let orig = params[i].value().data()[e];
            params[i].value_mut().data_mut()[e] = orig + cfg.step;
            let fp = eval(params)?;
            params[i].value_mut().data_mut()[e] = orig - cfg.step;
            let fm = eval(params)?;
            params[i].value_mut().data_mut()[e] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                report.failure = Some(format!(
                    "non-finite loss while probing {}[{e}]",
                    params[i].name()
                ));
                return Ok(report);
            }
            let fd = (fp - fm) / (2.0 * cfg.step);
            let ad = params[i].grad().data()[e];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(GRAD_CHECK_DENOM_FLOOR);
            report.probes += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(format!(
                    "{}[{e}]: ad={ad:.9e} fd={fd:.9e}",
                    params[i].name()
                ));
            }
        }
    }
    report.pass = report.failure.is_none() && report.max_rel_err <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn dense_identity_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn one_by_one_identity_convolution() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::new(vec![3, 3, 1], img.clone()).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &img[..]);
    }

    #[test]
    fn conv_transpose_doubles_extents() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 6, 3]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 5, 3]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.conv2d_transpose(x, w, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[8, 12, 5]);
    }

    #[test]
    fn shape_mismatch_names_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let p = Parameter::new("x", Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let x = tape.param(0, &p);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.reduce_sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_loss_leaves_gradients_zero() {
        let mut tape = Tape::new();
        let mut p = Parameter::new("x", Tensor::from_vec(vec![1.0, 2.0]));
        let _x = tape.param(0, &p);
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.reduce_sum(c).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(std::slice::from_mut(&mut p));
        assert!(p.grad().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = Parameter::new("x", Tensor::from_vec(vec![1.0, 2.0]));
        let x = tape.param(0, &p);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_scaling_is_exact_for_powers_of_two() {
        // d(alpha * L)/dp == alpha * dL/dp bitwise when alpha is a power of two.
        for &alpha in &[2.0f64, 0.5, -4.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let t = rand_tensor(&[4, 4], &mut rng);
            let mut grads = Vec::new();
            for scaled in [false, true] {
                let mut p = Parameter::new("x", t.clone());
                let mut tape = Tape::new();
                let x = tape.param(0, &p);
                let y = tape.tanh(x).unwrap();
                let mut loss = tape.reduce_sum(y).unwrap();
                if scaled {
                    loss = tape.scale(loss, alpha).unwrap();
                }
                tape.backward(loss).unwrap();
                tape.accumulate_param_grads(std::slice::from_mut(&mut p));
                grads.push(p.grad().data().to_vec());
            }
            for (a, b) in grads[0].iter().zip(&grads[1]) {
                assert_eq!((a * alpha).to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut p = Parameter::new("w", rand_tensor(&[3, 3, 2, 2], &mut rng));
            let x = rand_tensor(&[6, 6, 2], &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let wv = tape.param(0, &p);
            let bv = tape.constant(Tensor::zeros(&[2]));
            let y = tape.conv2d(xv, wv, bv, 1).unwrap();
            let t = tape.tanh(y).unwrap();
            let loss = tape.reduce_mean(t).unwrap();
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(std::slice::from_mut(&mut p));
            (tape.value(loss).item(), p.grad().data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gradient_of_linear_function_is_exact() {
        let mut params = vec![Parameter::new("x", Tensor::from_vec(vec![0.3, -1.7, 2.2]))];
        let report = gradient_check(&mut params, &GradCheck::default(), |tape, vals| {
            tape.reduce_sum(vals[0])
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn gradient_check_tanh_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = vec![
            Parameter::new("w", rand_tensor(&[4, 4], &mut rng)),
            Parameter::new("b", rand_tensor(&[4], &mut rng)),
        ];
        let x = rand_tensor(&[4], &mut rng);
        let report = gradient_check(&mut params, &GradCheck::default(), move |tape, vals| {
            let xv = tape.constant(x.clone());
            let y = tape.dense(xv, vals[0], vals[1])?;
            let t = tape.tanh(y)?;
            tape.reduce_sum(t)
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    /// Every primitive's gradient matches central finite differences on
    /// random small tensors, ten seeds each.
    #[test]
    fn all_primitives_pass_finite_difference_check() {
        type Builder = fn(&mut Tape, &[Value]) -> Result<Value>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("conv2d_s1", vec![vec![5, 6, 2], vec![3, 3, 2, 2], vec![2]], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1)?;
                t.reduce_sum(y)
            }),
            ("conv2d_s2", vec![vec![6, 6, 2], vec![3, 3, 3, 2], vec![3]], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2)?;
                let s = t.tanh(y)?;
                t.reduce_sum(s)
            }),
            ("conv2d_transpose", vec![vec![3, 3, 2], vec![3, 3, 2, 2], vec![2]], |t, v| {
                let y = t.conv2d_transpose(v[0], v[1], v[2])?;
                let s = t.tanh(y)?;
                t.reduce_sum(s)
            }),
            ("dense", vec![vec![3], vec![4, 3], vec![4]], |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                let s = t.exp(y)?;
                t.reduce_sum(s)
            }),
            ("leaky_relu", vec![vec![4, 4]], |t, v| {
                let y = t.leaky_relu(v[0], 0.2)?;
                t.reduce_sum(y)
            }),
            ("tanh", vec![vec![4, 4]], |t, v| {
                let y = t.tanh(v[0])?;
                t.reduce_sum(y)
            }),
            ("exp", vec![vec![4, 4]], |t, v| {
                let y = t.exp(v[0])?;
                t.reduce_sum(y)
            }),
            ("elementwise", vec![vec![3, 3], vec![3, 3]], |t, v| {
                let s = t.add(v[0], v[1])?;
                let m = t.mul(s, v[0])?;
                let d = t.div(m, v[1])?;
                let sc = t.scale(d, 0.7)?;
                let o = t.add_scalar(sc, 0.3)?;
                let q = t.sub(o, v[1])?;
                t.reduce_mean(q)
            }),
            ("concat_channels", vec![vec![3, 3, 1], vec![3, 3, 2]], |t, v| {
                let c = t.concat_channels(v[0], v[1])?;
                let s = t.tanh(c)?;
                t.reduce_sum(s)
            }),
            ("spatial_downsample", vec![vec![4, 6, 2]], |t, v| {
                let y = t.spatial_downsample(v[0])?;
                let s = t.tanh(y)?;
                t.reduce_sum(s)
            }),
            ("mean_filter", vec![vec![5, 5]], |t, v| {
                let y = t.mean_filter(v[0], 3)?;
                let s = t.mul(y, y)?;
                t.reduce_sum(s)
            }),
            ("separable_filter", vec![vec![5, 4, 2]], |t, v| {
                let y = t.separable_filter(v[0], &[0.25, 0.5, 0.25])?;
                let s = t.mul(y, y)?;
                t.reduce_sum(s)
            }),
            ("reduce_mean", vec![vec![3, 4]], |t, v| t.reduce_mean(v[0])),
            ("reshape", vec![vec![2, 6]], |t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                let s = t.tanh(y)?;
                t.reduce_sum(s)
            }),
        ];
        for (name, shapes, build) in cases {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let mut params: Vec<Parameter> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let mut t = rand_tensor(s, &mut rng);
                        // keep denominators away from zero for the div case
                        if name == "elementwise" && i == 1 {
                            for v in t.data_mut() {
                                *v = 1.5 + v.abs();
                            }
                        }
                        Parameter::new(format!("{name}/{i}"), t)
                    })
                    .collect();
                let report = gradient_check(&mut params, &GradCheck::default(), build).unwrap();
                assert!(report.pass, "{name} seed {seed}: {report:?}");
            }
        }
    }

    /// Warp gradients, checked separately because probes near bilinear cell
    /// boundaries are invalid; displacements are kept away from integers.
    #[test]
    fn warp_passes_finite_difference_check() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let (h, w) = (5, 5);
            let img = rand_tensor(&[h, w], &mut rng);
            let mut disp = Tensor::zeros(&[h, w, 2]);
            for v in disp.data_mut() {
                *v = rng.random_range(0.15..0.35) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
            let mut params = vec![
                Parameter::new("img", img),
                Parameter::new("disp", disp),
            ];
            let report = gradient_check(&mut params, &GradCheck::default(), move |tape, vals| {
                let id = crate::diffeo::identity_grid(h, w);
                let idv = tape.constant(id);
                let phi = tape.add(idv, vals[1])?;
                let warped = tape.warp(vals[0], phi)?;
                let sq = tape.mul(warped, warped)?;
                tape.reduce_sum(sq)
            })
            .unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn mean_filter_gradient_matches_box_weights() {
        // d(sum(mean_filter(x)))/dx[i] equals the sum over windows containing
        // i of 1/count -- verified here against finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = vec![Parameter::new("x", rand_tensor(&[4, 5], &mut rng))];
        let report = gradient_check(&mut params, &GradCheck::default(), |tape, vals| {
            let y = tape.mean_filter(vals[0], 3)?;
            tape.reduce_sum(y)
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
        // interior pixel of a 3x3 count-normalized filter on a 4x5 grid:
        // windows centered at the 9 neighbours all contain it.
        let g = params[0].grad().data();
        let interior = g[1 * 5 + 2];
        let mut expect = 0.0;
        for wy in 0..=2i64 {
            for wx in 1..=3i64 {
                let cy = ((wy - 0).max(0) - (wy - 3).min(0)) as f64; // rows in bounds
                let _ = cy;
                let rows = (wy.min(1) - (wy - 3).max(-1) + 1).min(3);
                let cols = (wx.min(3) - (wx - 4).max(-1).max(wx - 4) + 1).min(3);
                let _ = (rows, cols);
                // count computed directly:
                let r0 = (wy - 1).max(0);
                let r1 = (wy + 1).min(3);
                let c0 = (wx - 1).max(0);
                let c1 = (wx + 1).min(4);
                expect += 1.0 / (((r1 - r0 + 1) * (c1 - c0 + 1)) as f64);
            }
        }
        assert!((interior - expect).abs() < 1e-12, "{interior} vs {expect}");
    }
}
