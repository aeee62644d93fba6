//! Reverse-mode differentiation over 5-D fields.
//!
//! A [`Graph`] is a tape: every operator appends a node holding its value and
//! whatever it needs for the backward pass. [`Graph::backward`] walks the tape
//! in reverse creation order, which is a valid reverse topological order
//! because inputs always precede their consumers. Gradients of shared nodes
//! accumulate. Leaf gradients are kept; intermediate gradients are dropped
//! once propagated.

mod field;
pub mod kernels;

pub use field::{ActivationField, Shape};

use rand::Rng;
use thiserror::Error;

use crate::loss::{combined_loss, LossError};
use crate::real::Real;
use crate::volume::OneHot;
use kernels::ConvGeometry;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Shape, got: Shape },
    #[error("{op}: spatial size {size} along axis {axis} is not divisible by 2")]
    OddSpatial { op: &'static str, axis: char, size: usize },
    #[error("conv3d: kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("backward requires a scalar root, got {0:?}")]
    NotScalar(Shape),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("batch norm in inference mode before any running statistics were recorded")]
    BatchNormUninitialized,
    #[error("batch norm has {expected} channels, input has {got}")]
    BatchNormChannels { expected: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
///
/// The first training batch sets the running values directly; later batches
/// update them as `r ← r + (1 − momentum)(batch − r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        if !self.initialized {
            self.running_mean.copy_from_slice(mean);
            self.running_var.copy_from_slice(var);
            self.initialized = true;
            return;
        }
        let a = 1.0 - self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r += a * (b - *r);
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r += a * (b - *r);
        }
    }
}

enum Op<T> {
    Leaf,
    Conv3d { x: NodeId, w: NodeId, b: NodeId, k: usize, cols: Vec<Vec<T>> },
    TransposeConv3d { x: NodeId, w: NodeId, b: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<f64>, batch_stats: bool },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Dropout { x: NodeId, mask: Vec<T> },
    Softmax { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Loss { x: NodeId, grad: Vec<T> },
}

pub struct Graph<T> {
    values: Vec<ActivationField<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_shape(op: &'static str, expected: Shape, got: Shape) -> Result<()> {
    if expected != got {
        return Err(AutodiffError::ShapeMismatch { op, expected, got });
    }
    Ok(())
}

fn check_even(op: &'static str, s: Shape) -> Result<()> {
    for (axis, size) in [('x', s.x), ('y', s.y), ('z', s.z)] {
        if size % 2 != 0 {
            return Err(AutodiffError::OddSpatial { op, axis, size });
        }
    }
    Ok(())
}

/// Zero-initialized gradient buffer of node `id`, taken out of the tape.
fn take_grad<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> Vec<T> {
    grads[id.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, delta: impl Iterator<Item = T>, len: usize) {
    let g = grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
    for (gi, d) in g.iter_mut().zip(delta) {
        *gi += d;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), grads: Vec::new(), requires_grad: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: ActivationField<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.requires_grad[id.0])
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, value: ActivationField<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf; its gradient is retained after [`Graph::backward`].
    pub fn parameter(&mut self, value: ActivationField<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &ActivationField<T> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.values[id.0].shape
    }

    /// Gradient of the last backward root with respect to `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires_grad[id.0]
    }

    /// Same-padded stride-1 convolution with weight `(out, in, k, k, k)` and
    /// bias `(1, out, 1, 1, 1)`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let k = ws.x;
        if k % 2 == 0 {
            return Err(AutodiffError::EvenKernel(k));
        }
        expect_shape("conv3d weight", Shape::kernel(ws.batch, xs.channels, k), ws)?;
        expect_shape("conv3d bias", Shape::channel_vector(ws.batch), self.shape(b))?;
        let g = ConvGeometry { batch: xs.batch, in_channels: xs.channels, out_channels: ws.batch, dims: xs.spatial_dims(), k };
        let keep = self.requires_grad[w.0];
        let (out, cols) =
            kernels::conv3d_forward(&g, &self.values[x.0].values, &self.values[w.0].values, &self.values[b.0].values, keep);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(ActivationField::new(xs.with_channels(ws.batch), out), rg, Op::Conv3d { x, w, b, k, cols }))
    }

    /// Kernel-2 stride-2 transpose convolution with weight `(in, out, 2, 2, 2)`.
    pub fn transpose_conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let co = ws.channels;
        expect_shape("transpose_conv3d weight", Shape::new(xs.channels, co, 2, 2, 2), ws)?;
        expect_shape("transpose_conv3d bias", Shape::channel_vector(co), self.shape(b))?;
        let g = ConvGeometry { batch: xs.batch, in_channels: xs.channels, out_channels: co, dims: xs.spatial_dims(), k: 2 };
        let out =
            kernels::transpose_conv_forward(&g, &self.values[x.0].values, &self.values[w.0].values, &self.values[b.0].values);
        let shape = Shape::new(xs.batch, co, 2 * xs.x, 2 * xs.y, 2 * xs.z);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(ActivationField::new(shape, out), rg, Op::TransposeConv3d { x, w, b }))
    }

    /// Per-channel normalization. In `Train` mode batch statistics (biased
    /// variance) are used and folded into `state`; in `Eval` mode the running
    /// statistics are used.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let c = xs.channels;
        if state.channels() != c {
            return Err(AutodiffError::BatchNormChannels { expected: state.channels(), got: c });
        }
        expect_shape("batch_norm gamma", Shape::channel_vector(c), self.shape(gamma))?;
        expect_shape("batch_norm beta", Shape::channel_vector(c), self.shape(beta))?;
        let sp = xs.spatial();
        let count = (xs.batch * sp) as f64;
        let xv = &self.values[x.0].values;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..xs.batch {
                        s += xv[(b * c + ch) * sp..][..sp].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for b in 0..xs.batch {
                        ss += xv[(b * c + ch) * sp..][..sp]
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap() - m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                (mean, var)
            }
            Mode::Eval => {
                if !state.initialized {
                    return Err(AutodiffError::BatchNormUninitialized);
                }
                (state.running_mean.clone(), state.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let gv = &self.values[gamma.0].values;
        let bv = &self.values[beta.0].values;
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..xs.batch {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (g, bb) = (gv[ch].to_f64().unwrap(), bv[ch].to_f64().unwrap());
                for i in base..base + sp {
                    let h = (xv[i].to_f64().unwrap() - m) * is;
                    xhat[i] = T::from_f64_lossy(h);
                    out[i] = T::from_f64_lossy(g * h + bb);
                }
            }
        }
        if mode == Mode::Train {
            state.update(&mean, &var);
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train };
        Ok(self.push(ActivationField::new(xs, out), rg, op))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.values[x.0];
        let out = v.values.iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let shape = v.shape;
        let rg = self.rg(&[x]);
        self.push(ActivationField::new(shape, out), rg, Op::Relu { x })
    }

    /// 2×2×2 max pooling with stride 2. Every spatial size must be even.
    pub fn max_pool3d(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        check_even("max_pool3d", xs)?;
        let (out, argmax) = kernels::max_pool2(&self.values[x.0].values, xs.batch * xs.channels, xs.spatial_dims());
        let shape = xs.with_spatial([xs.x / 2, xs.y / 2, xs.z / 2]);
        let rg = self.rg(&[x]);
        Ok(self.push(ActivationField::new(shape, out), rg, Op::MaxPool { x, argmax }))
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 − rate)`. A zero rate returns `x`
    /// unchanged and draws nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let v = &self.values[x.0];
        let mask: Vec<T> =
            (0..v.values.len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale }).collect();
        let out = v.values.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = v.shape;
        let rg = self.rg(&[x]);
        Ok(self.push(ActivationField::new(shape, out), rg, Op::Dropout { x, mask }))
    }

    /// Softmax across channels at every voxel.
    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let v = &self.values[x.0];
        let s = v.shape;
        let out = softmax_values(&v.values, s);
        let rg = self.rg(&[x]);
        self.push(ActivationField::new(s, out), rg, Op::Softmax { x })
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        expect_shape("concat_channels", sa.with_channels(sb.channels), sb)?;
        let sp = sa.spatial();
        let mut out = Vec::with_capacity(sa.len() + sb.len());
        for n in 0..sa.batch {
            out.extend_from_slice(&self.values[a.0].values[n * sa.channels * sp..(n + 1) * sa.channels * sp]);
            out.extend_from_slice(&self.values[b.0].values[n * sb.channels * sp..(n + 1) * sb.channels * sp]);
        }
        let shape = sa.with_channels(sa.channels + sb.channels);
        let rg = self.rg(&[a, b]);
        Ok(self.push(ActivationField::new(shape, out), rg, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        expect_shape("add", self.shape(a), self.shape(b))?;
        let out = self.values[a.0].values.iter().zip(&self.values[b.0].values).map(|(&p, &q)| p + q).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(ActivationField::new(self.shape(a), out), rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        expect_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.values[a.0].values.iter().zip(&self.values[b.0].values).map(|(&p, &q)| p * q).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(ActivationField::new(self.shape(a), out), rg, Op::Mul { a, b }))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = kernels::sum_f64(&self.values[x.0].values);
        let rg = self.rg(&[x]);
        self.push(ActivationField::scalar(s), rg, Op::Sum { x })
    }

    /// Combined soft-Dice and cross-entropy loss of channel logits against a
    /// one-hot target, as a scalar node.
    pub fn combined_loss(&mut self, logits: NodeId, target: &OneHot) -> Result<NodeId> {
        let v = &self.values[logits.0];
        let lv = combined_loss(&v.values, v.shape, target)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(ActivationField::scalar(T::from_f64_lossy(lv.total)), rg, Op::Loss { x: logits, grad: lv.grad_logits }))
    }

    /// Accumulates `∂root/∂node` into every node that requires a gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rs = self.shape(root);
        if rs.len() != 1 {
            return Err(AutodiffError::NotScalar(rs));
        }
        if !self.requires_grad[root.0] {
            return Ok(());
        }
        add_into(&mut self.grads, root, std::iter::once(T::one()), 1);
        for i in (0..=root.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(dout) = self.grads[i].take() else { continue };
            if !self.requires_grad[i] {
                continue;
            }
            self.propagate(i, &dout);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, dout: &[T]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let rg = &self.requires_grad;
        let len = |id: NodeId| values[id.0].values.len();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, k, cols } => {
                let xs = values[x.0].shape;
                let g = ConvGeometry {
                    batch: xs.batch,
                    in_channels: xs.channels,
                    out_channels: values[w.0].shape.batch,
                    dims: xs.spatial_dims(),
                    k: *k,
                };
                if rg[w.0] || rg[b.0] {
                    let mut dw = take_grad(grads, *w, len(*w));
                    let mut db = take_grad(grads, *b, len(*b));
                    kernels::conv3d_backward_params(&g, &values[x.0].values, cols, dout, &mut dw, &mut db);
                    if rg[w.0] {
                        grads[w.0] = Some(dw);
                    }
                    if rg[b.0] {
                        grads[b.0] = Some(db);
                    }
                }
                if rg[x.0] {
                    let mut dx = take_grad(grads, *x, len(*x));
                    kernels::conv3d_backward_input(&g, &values[w.0].values, dout, &mut dx);
                    grads[x.0] = Some(dx);
                }
            }
            Op::TransposeConv3d { x, w, b } => {
                let xs = values[x.0].shape;
                let g = ConvGeometry {
                    batch: xs.batch,
                    in_channels: xs.channels,
                    out_channels: values[w.0].shape.channels,
                    dims: xs.spatial_dims(),
                    k: 2,
                };
                let mut dx = rg[x.0].then(|| take_grad(grads, *x, len(*x)));
                let mut dw = rg[w.0].then(|| take_grad(grads, *w, len(*w)));
                let mut db = rg[b.0].then(|| take_grad(grads, *b, len(*b)));
                kernels::transpose_conv_backward(
                    &g,
                    &values[x.0].values,
                    &values[w.0].values,
                    dout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (id, gbuf) in [(x, dx), (w, dw), (b, db)] {
                    if gbuf.is_some() {
                        grads[id.0] = gbuf;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xs = values[x.0].shape;
                let c = xs.channels;
                let sp = xs.spatial();
                let count = (xs.batch * sp) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..xs.batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * sp;
                        for j in base..base + sp {
                            let d = dout[j].to_f64().unwrap();
                            sum_dy[ch] += d;
                            sum_dy_xhat[ch] += d * xhat[j].to_f64().unwrap();
                        }
                    }
                }
                if rg[gamma.0] {
                    add_into(grads, *gamma, sum_dy_xhat.iter().map(|&v| T::from_f64_lossy(v)), c);
                }
                if rg[beta.0] {
                    add_into(grads, *beta, sum_dy.iter().map(|&v| T::from_f64_lossy(v)), c);
                }
                if rg[x.0] {
                    let gv = &values[gamma.0].values;
                    let dx = grads[x.0].get_or_insert_with(|| vec![T::zero(); xs.len()]);
                    for b in 0..xs.batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let scale = gv[ch].to_f64().unwrap() * inv_std[ch];
                            for j in base..base + sp {
                                let d = dout[j].to_f64().unwrap();
                                let v = if *batch_stats {
                                    scale * (d - sum_dy[ch] / count - xhat[j].to_f64().unwrap() * sum_dy_xhat[ch] / count)
                                } else {
                                    scale * d
                                };
                                dx[j] += T::from_f64_lossy(v);
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = &values[x.0].values;
                add_into(grads, *x, dout.iter().zip(xv).map(|(&d, &a)| if a > T::zero() { d } else { T::zero() }), xv.len());
            }
            Op::MaxPool { x, argmax } => {
                let dx = grads[x.0].get_or_insert_with(|| vec![T::zero(); values[x.0].values.len()]);
                for (&a, &d) in argmax.iter().zip(dout) {
                    dx[a as usize] += d;
                }
            }
            Op::Dropout { x, mask } => {
                add_into(grads, *x, dout.iter().zip(mask).map(|(&d, &m)| d * m), mask.len());
            }
            Op::Softmax { x } => {
                let p = &values[i];
                let s = p.shape;
                let (c, sp) = (s.channels, s.spatial());
                let mut dx = vec![T::zero(); s.len()];
                for b in 0..s.batch {
                    for n in 0..sp {
                        let at = |k: usize| (b * c + k) * sp + n;
                        let dot: f64 = (0..c).map(|k| p.values[at(k)].to_f64().unwrap() * dout[at(k)].to_f64().unwrap()).sum();
                        for k in 0..c {
                            let pk = p.values[at(k)].to_f64().unwrap();
                            dx[at(k)] = T::from_f64_lossy(pk * (dout[at(k)].to_f64().unwrap() - dot));
                        }
                    }
                }
                add_into(grads, *x, dx.into_iter(), s.len());
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (values[a.0].shape, values[b.0].shape);
                let sp = sa.spatial();
                let (na, nb) = (sa.channels * sp, sb.channels * sp);
                for n in 0..sa.batch {
                    let chunk = &dout[n * (na + nb)..(n + 1) * (na + nb)];
                    if rg[a.0] {
                        let g = grads[a.0].get_or_insert_with(|| vec![T::zero(); sa.len()]);
                        for (gi, &d) in g[n * na..(n + 1) * na].iter_mut().zip(&chunk[..na]) {
                            *gi += d;
                        }
                    }
                    if rg[b.0] {
                        let g = grads[b.0].get_or_insert_with(|| vec![T::zero(); sb.len()]);
                        for (gi, &d) in g[n * nb..(n + 1) * nb].iter_mut().zip(&chunk[na..]) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if rg[id.0] {
                        add_into(grads, *id, dout.iter().copied(), dout.len());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&values[a.0].values, &values[b.0].values);
                if rg[a.0] {
                    add_into(grads, *a, dout.iter().zip(bv).map(|(&d, &q)| d * q), dout.len());
                }
                if rg[b.0] {
                    add_into(grads, *b, dout.iter().zip(av).map(|(&d, &p)| d * p), dout.len());
                }
            }
            Op::Sum { x } => {
                let n = len(*x);
                add_into(grads, *x, std::iter::repeat(dout[0]).take(n), n);
            }
            Op::Loss { x, grad } => {
                add_into(grads, *x, grad.iter().map(|&g| g * dout[0]), grad.len());
            }
        }
    }
}

/// Channel softmax of a `(batch, channels, …)` buffer, max-shifted.
pub fn softmax_values<T: Real>(values: &[T], s: Shape) -> Vec<T> {
    let (c, sp) = (s.channels, s.spatial());
    let mut out = vec![T::zero(); values.len()];
    let mut e = vec![0f64; c];
    for b in 0..s.batch {
        for n in 0..sp {
            let at = |k: usize| (b * c + k) * sp + n;
            let max = (0..c).map(|k| values[at(k)].to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, ek) in e.iter_mut().enumerate() {
                *ek = (values[at(k)].to_f64().unwrap() - max).exp();
                sum += *ek;
            }
            for (k, ek) in e.iter().enumerate() {
                out[at(k)] = T::from_f64_lossy(ek / sum);
            }
        }
    }
    out
}
