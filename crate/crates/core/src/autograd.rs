//! Tape-based reverse-mode differentiation over [`Tensor4`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its adjoint. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because inputs
//! must exist before the node that consumes them.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{Shape4, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Resize {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Silu {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add {
        parts: Vec<Var>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    MaskedSquaredError {
        pred: Var,
        target: Tensor4,
        mask: Tensor4,
        denom: f64,
    },
    NormalError {
        pred: Var,
        target: Tensor4,
        mask: Tensor4,
        denom: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore: u8,
        denom: f64,
    },
    SigmoidCrossEntropy {
        logit: Var,
        target: Tensor4,
        mask: Tensor4,
        pos_weight: f64,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

/// Smoothing constant inside the vector norm of [`Tape::normal_error`].
pub const NORMAL_EPS: f64 = 1e-8;

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    conv_weight_grad_scale: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. `None` only for nodes that do
    /// not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            conv_weight_grad_scale: 1.0,
        }
    }

    /// Scales the weight gradient emitted by every convolution backward pass.
    /// Only useful for proving that the finite-difference checker catches a
    /// broken adjoint.
    #[doc(hidden)]
    pub fn corrupt_conv_weight_grad(&mut self, scale: f64) {
        self.conv_weight_grad_scale = scale;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: impl IntoIterator<Item = Var>) -> bool {
        vars.into_iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b).data()),
            spec,
        )?;
        let rg = self.grad_any([x, w].into_iter().chain(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Transposed convolution; `w` has shape `(in, out, kh, kw)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b).data()),
            spec,
        )?;
        let rg = self.grad_any([x, w].into_iter().chain(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, spec }, rg))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.h == out_h && s.w == out_w {
            return Ok(x);
        }
        let value = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Resize { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let rg = self.requires_grad(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// `x * sigmoid(x)`, the smooth rectifier used between layers.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * kernels::sigmoid(v));
        let rg = self.requires_grad(x);
        self.push(value, Op::Silu { x }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_channels needs at least one input".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let s0 = self.shape(*first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::Config(format!(
                    "concat_channels: input {s} does not match batch/spatial dims of {s0}"
                )));
            }
            channels += s.c;
        }
        let mut out = Tensor4::zeros(s0.with_channels(channels));
        for n in 0..s0.n {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                for c in 0..src.shape().c {
                    out.plane_mut(n, offset + c).copy_from_slice(src.plane(n, c));
                }
                offset += src.shape().c;
            }
        }
        let rg = self.grad_any(parts.iter().copied());
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("add needs at least one input".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            if v.shape() != out.shape() {
                return Err(Error::Config(format!(
                    "add: shape {} does not match {}",
                    v.shape(),
                    out.shape()
                )));
            }
            out.add_scaled(v, 1.0);
        }
        let rg = self.grad_any(parts.iter().copied());
        Ok(self.push(out, Op::Add { parts: parts.to_vec() }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Config(format!(
                "mul: shape {} does not match {}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor4::from_vec(va.shape(), data)?;
        let rg = self.grad_any([a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor4::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(value, Op::SumAll { x }, rg)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if !t.shape().is_scalar() {
                return Err(Error::Usage(format!(
                    "weighted_sum expects scalar terms, got {}",
                    t.shape()
                )));
            }
            total += w * t.item();
        }
        let rg = self.grad_any(terms.iter().map(|t| t.0));
        Ok(self.push(Tensor4::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    /// `Σ mask·(pred − target)² / max(Σ mask, 1)`.
    pub fn masked_squared_error(&mut self, pred: Var, target: &Tensor4, mask: &Tensor4) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return Err(Error::Config(format!(
                "masked_squared_error: pred {}, target {}, mask {} must match",
                p.shape(),
                target.shape(),
                mask.shape()
            )));
        }
        let denom = mask.sum().max(1.0);
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((p, t), m)| if *m != 0.0 { m * (p - t) * (p - t) } else { 0.0 })
            .sum();
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor4::scalar(total / denom),
            Op::MaskedSquaredError {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                denom,
            },
            rg,
        ))
    }

    /// Squared distance between the unit-normalized 3-vector `pred` and
    /// `target` per pixel, masked and averaged over valid pixels. `mask` has
    /// one channel.
    pub fn normal_error(&mut self, pred: Var, target: &Tensor4, mask: &Tensor4) -> Result<Var> {
        let p = self.value(pred);
        let s = p.shape();
        if s.c != 3 || target.shape() != s || mask.shape() != s.with_channels(1) {
            return Err(Error::Config(format!(
                "normal_error: pred {s}, target {}, mask {} (need 3 channels and a 1-channel mask)",
                target.shape(),
                mask.shape()
            )));
        }
        let denom = mask.sum().max(1.0);
        let mut total = 0.0;
        for n in 0..s.n {
            for i in 0..s.plane() {
                let m = mask.plane(n, 0)[i];
                if m == 0.0 {
                    continue;
                }
                let v = [p.plane(n, 0)[i], p.plane(n, 1)[i], p.plane(n, 2)[i]];
                let q = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + NORMAL_EPS * NORMAL_EPS).sqrt();
                for (c, vc) in v.iter().enumerate() {
                    let d = vc / q - target.plane(n, c)[i];
                    total += m * d * d;
                }
            }
        }
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor4::scalar(total / denom),
            Op::NormalError {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                denom,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over pixels whose label is not `ignore`.
    /// `labels` is `n*h*w` row-major.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let z = self.value(logits);
        let s = z.shape();
        if labels.len() != s.n * s.plane() {
            return Err(Error::Config(format!(
                "softmax_cross_entropy: {} labels for logits {s}",
                labels.len()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for n in 0..s.n {
            for i in 0..s.plane() {
                let y = labels[n * s.plane() + i];
                if y == ignore {
                    continue;
                }
                if y as usize >= s.c {
                    return Err(Error::Data(format!(
                        "label {y} at (sample {n}, row {}, col {}) is outside [0, {})",
                        i / s.w,
                        i % s.w,
                        s.c
                    )));
                }
                let (lse, _) = log_sum_exp(z, n, i);
                total += lse - z.plane(n, y as usize)[i];
                count += 1;
            }
        }
        let denom = (count as f64).max(1.0);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor4::scalar(total / denom),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                denom,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits with positives weighted by
    /// `pos_weight`, over pixels where `mask` is nonzero.
    pub fn sigmoid_cross_entropy(
        &mut self,
        logit: Var,
        target: &Tensor4,
        mask: &Tensor4,
        pos_weight: f64,
    ) -> Result<Var> {
        let x = self.value(logit);
        if x.shape() != target.shape() || x.shape() != mask.shape() {
            return Err(Error::Config(format!(
                "sigmoid_cross_entropy: logit {}, target {}, mask {} must match",
                x.shape(),
                target.shape(),
                mask.shape()
            )));
        }
        let denom = mask.sum().max(1.0);
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((&x, &y), &m)| {
                if m == 0.0 {
                    0.0
                } else {
                    m * (pos_weight * y * kernels::softplus(-x) + (1.0 - y) * kernels::softplus(x))
                }
            })
            .sum();
        let rg = self.requires_grad(logit);
        Ok(self.push(
            Tensor4::scalar(total / denom),
            Op::SigmoidCrossEntropy {
                logit,
                target: target.clone(),
                mask: mask.clone(),
                pos_weight,
                denom,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every gradient-requiring leaf gets
    /// an entry, all zeros when it does not reach the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {ls}")));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor4::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor4::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4>], v: Var, g: Tensor4) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_bias(&self, grads: &mut [Option<Tensor4>], b: Option<Var>, gb: Vec<f64>) {
        if let Some(b) = b {
            let shape = self.shape(b);
            // bias lengths were validated on the forward pass
            let t = Tensor4::from_vec(shape, gb).expect("bias gradient length");
            self.accumulate(grads, b, t);
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor4, grads: &mut [Option<Tensor4>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (gx, mut gw, gb) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *spec);
                if self.conv_weight_grad_scale != 1.0 {
                    gw = gw.map(|v| v * self.conv_weight_grad_scale);
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate_bias(grads, *b, gb);
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let (gx, mut gw, gb) =
                    kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), g, *spec);
                if self.conv_weight_grad_scale != 1.0 {
                    gw = gw.map(|v| v * self.conv_weight_grad_scale);
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate_bias(grads, *b, gb);
            }
            Op::Resize { x } => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, kernels::bilinear_resize_backward(g, s.h, s.w));
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(y, g)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, Tensor4::from_vec(y.shape(), data).expect("same shape"));
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, g)| {
                        let s = kernels::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor4::from_vec(xv.shape(), data).expect("same shape"));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).c;
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.channel_slice(offset, c));
                    }
                    offset += c;
                }
            }
            Op::Add { parts } => {
                for &p in parts {
                    self.accumulate(grads, p, g.clone());
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = vb.data().iter().zip(g.data()).map(|(y, g)| y * g).collect();
                    self.accumulate(grads, *a, Tensor4::from_vec(va.shape(), d).expect("same shape"));
                }
                if self.requires_grad(*b) {
                    let d = va.data().iter().zip(g.data()).map(|(x, g)| x * g).collect();
                    self.accumulate(grads, *b, Tensor4::from_vec(vb.shape(), d).expect("same shape"));
                }
            }
            Op::SumAll { x } => {
                self.accumulate(grads, *x, Tensor4::full(self.shape(*x), g.item()));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor4::scalar(w * g.item()));
                }
            }
            Op::MaskedSquaredError {
                pred,
                target,
                mask,
                denom,
            } => {
                let scale = 2.0 * g.item() / denom;
                let p = self.value(*pred);
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(mask.data())
                    .map(|((p, t), m)| if *m != 0.0 { scale * m * (p - t) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *pred, Tensor4::from_vec(p.shape(), data).expect("same shape"));
            }
            Op::NormalError {
                pred,
                target,
                mask,
                denom,
            } => {
                let p = self.value(*pred);
                let s = p.shape();
                let mut gp = Tensor4::zeros(s);
                for n in 0..s.n {
                    for i in 0..s.plane() {
                        let m = mask.plane(n, 0)[i];
                        if m == 0.0 {
                            continue;
                        }
                        let v = [p.plane(n, 0)[i], p.plane(n, 1)[i], p.plane(n, 2)[i]];
                        let q = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + NORMAL_EPS * NORMAL_EPS).sqrt();
                        let mut gu = [0.0; 3];
                        for c in 0..3 {
                            gu[c] = 2.0 * m * g.item() / denom * (v[c] / q - target.plane(n, c)[i]);
                        }
                        let gdotv = gu[0] * v[0] + gu[1] * v[1] + gu[2] * v[2];
                        for c in 0..3 {
                            gp.plane_mut(n, c)[i] = gu[c] / q - v[c] * gdotv / (q * q * q);
                        }
                    }
                }
                self.accumulate(grads, *pred, gp);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                ignore,
                denom,
            } => {
                let z = self.value(*logits);
                let s = z.shape();
                let scale = g.item() / denom;
                let mut gz = Tensor4::zeros(s);
                for n in 0..s.n {
                    for i in 0..s.plane() {
                        let y = labels[n * s.plane() + i];
                        if y == *ignore {
                            continue;
                        }
                        let (lse, _) = log_sum_exp(z, n, i);
                        for c in 0..s.c {
                            let p = (z.plane(n, c)[i] - lse).exp();
                            let t = if c == y as usize { 1.0 } else { 0.0 };
                            gz.plane_mut(n, c)[i] = scale * (p - t);
                        }
                    }
                }
                self.accumulate(grads, *logits, gz);
            }
            Op::SigmoidCrossEntropy {
                logit,
                target,
                mask,
                pos_weight,
                denom,
            } => {
                let x = self.value(*logit);
                let scale = g.item() / denom;
                let data = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(mask.data())
                    .map(|((&x, &y), &m)| {
                        if m == 0.0 {
                            0.0
                        } else {
                            let s = kernels::sigmoid(x);
                            scale * m * (pos_weight * y * (s - 1.0) + (1.0 - y) * s)
                        }
                    })
                    .collect();
                self.accumulate(grads, *logit, Tensor4::from_vec(x.shape(), data).expect("same shape"));
            }
        }
    }
}

/// Stable `log Σ_c exp(z_c)` at pixel `i` of sample `n`, with the max logit.
fn log_sum_exp(z: &Tensor4, n: usize, i: usize) -> (f64, f64) {
    let c = z.shape().c;
    let max = (0..c).map(|k| z.plane(n, k)[i]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..c).map(|k| (z.plane(n, k)[i] - max).exp()).sum();
    (max + sum.ln(), max)
}
