//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op evaluates eagerly, appends a node holding its output and whatever
//! it needs for the backward pass, and hands back a [`Var`] handle. Nodes are
//! appended in execution order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Every op output is checked for NaN/Inf; a non-finite value is reported as
//! [`Error::Numeric`] naming the op and the active scope.

use super::kernels::{self, ConvGeom};
use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};
use crate::tikan::spline::{KnotVector, MAX_ORDER};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max2x2,
    GlobalAvg,
    GlobalMax,
    ChannelMean,
    ChannelMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Batch statistics from a training-mode batchnorm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2 { x: Var, idx: Vec<u32> },
    GlobalAvg { x: Var },
    GlobalMax { x: Var, idx: Vec<u32> },
    ChannelMean { x: Var },
    ChannelMax { x: Var, idx: Vec<u32> },
    Resize { x: Var, mode: ResizeMode },
    Relu { x: Var },
    Sigmoid { x: Var },
    Silu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Softmax { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Concat { a: Var, b: Var },
    Sum { x: Var },
    WeightedCe { logits: Var, probs: Vec<T>, target: Vec<u32>, weights: Vec<T> },
    TokenMinMax { x: Var, lo: Vec<u32>, hi: Vec<u32>, denom: Vec<T> },
    Spline { u: Var, control: Var, knots: KnotVector },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvg { .. } => "global_avg",
            Op::GlobalMax { .. } => "global_max",
            Op::ChannelMean { .. } => "channel_mean",
            Op::ChannelMax { .. } => "channel_max",
            Op::Resize { .. } => "resize",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Silu { .. } => "silu",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax_channel",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Concat { .. } => "concat_channels",
            Op::Sum { .. } => "sum",
            Op::WeightedCe { .. } => "weighted_ce",
            Op::TokenMinMax { .. } => "token_minmax",
            Op::Spline { .. } => "spline",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    scope: String,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaves
/// that require gradients are retained.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scope: Vec<String>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `b`'s strides when broadcast against `a` (zero on singleton axes).
fn broadcast_strides(a: Shape, b: Shape) -> Result<[usize; 4]> {
    let (ad, bd) = (a.dims(), b.dims());
    let bs = b.strides();
    let mut st = [0; 4];
    for i in 0..4 {
        if bd[i] == ad[i] {
            st[i] = if bd[i] == 1 { 0 } else { bs[i] };
        } else if bd[i] == 1 {
            st[i] = 0;
        } else {
            return Err(Error::config(format!("cannot broadcast {b} against {a}")));
        }
    }
    Ok(st)
}

#[inline]
fn for_each_broadcast(a: Shape, st: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = a.dims();
    let mut ia = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..w {
                    f(ia, base + i3 * st[3]);
                    ia += 1;
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), scope: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pushes a name onto the diagnostic scope stack.
    pub fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn scope_label(&self) -> String {
        self.scope.join(".")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Shape, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.numel(), data.len());
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "{} at '{}' produced a non-finite value (element {pos} of {shape})",
                op.name(),
                self.scope_label()
            )));
        }
        let value = Tensor::from_vec(shape, data)?;
        self.nodes.push(Node { value, op, requires_grad, scope: self.scope_label() });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let shape = t.shape();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), groups, stride, pad)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.c_out {
                return Err(Error::config(format!(
                    "conv2d bias has {} values for {} output channels",
                    self.value(b).len(),
                    geom.c_out
                )));
            }
        }
        let y = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        self.push(geom.out_shape(), y, Op::Conv { x, w, b, geom }, rg)
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.dims();
        let xd = self.value(x).data();
        let rg = self.requires_grad(x);
        let plane = h * w;
        match kind {
            PoolKind::Max2x2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::config(format!("max2x2 pooling needs even spatial dims, got {s}")));
                }
                let (y, idx) = kernels::max_pool2(s, xd);
                self.push(Shape::new(n, c, h / 2, w / 2), y, Op::MaxPool2 { x, idx }, rg)
            }
            PoolKind::GlobalAvg => {
                let inv = T::of(1.0 / plane as f64);
                let y = (0..n * c).map(|p| xd[p * plane..(p + 1) * plane].iter().copied().sum::<T>() * inv).collect();
                self.push(Shape::new(n, c, 1, 1), y, Op::GlobalAvg { x }, rg)
            }
            PoolKind::GlobalMax => {
                let mut y = Vec::with_capacity(n * c);
                let mut idx = Vec::with_capacity(n * c);
                for p in 0..n * c {
                    let mut best = p * plane;
                    for i in p * plane..(p + 1) * plane {
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    y.push(xd[best]);
                    idx.push(best as u32);
                }
                self.push(Shape::new(n, c, 1, 1), y, Op::GlobalMax { x, idx }, rg)
            }
            PoolKind::ChannelMean => {
                let inv = T::of(1.0 / c as f64);
                let mut y = vec![T::zero(); n * plane];
                for b in 0..n {
                    let out = &mut y[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        for (o, &v) in out.iter_mut().zip(&xd[(b * c + ch) * plane..][..plane]) {
                            *o = *o + v;
                        }
                    }
                    for o in out.iter_mut() {
                        *o = *o * inv;
                    }
                }
                self.push(Shape::new(n, 1, h, w), y, Op::ChannelMean { x }, rg)
            }
            PoolKind::ChannelMax => {
                let mut y = Vec::with_capacity(n * plane);
                let mut idx = Vec::with_capacity(n * plane);
                for b in 0..n {
                    for p in 0..plane {
                        let mut best = 0;
                        let mut bv = xd[b * c * plane + p];
                        for ch in 1..c {
                            let v = xd[(b * c + ch) * plane + p];
                            if v > bv {
                                bv = v;
                                best = ch;
                            }
                        }
                        y.push(bv);
                        idx.push(best as u32);
                    }
                }
                self.push(Shape::new(n, 1, h, w), y, Op::ChannelMax { x, idx }, rg)
            }
        }
    }

    /// Resizes the spatial dims to `(oh, ow)`; bilinear uses half-pixel centers.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize, mode: ResizeMode) -> Result<Var> {
        let s = self.shape(x);
        if s.h() == 0 || s.w() == 0 || oh == 0 || ow == 0 {
            return Err(Error::config(format!("cannot resize {s} to {oh}x{ow}")));
        }
        let y = match mode {
            ResizeMode::Bilinear => kernels::resize_bilinear(s, self.value(x).data(), oh, ow),
            ResizeMode::Nearest => kernels::resize_nearest(s, self.value(x).data(), oh, ow),
        };
        let rg = self.requires_grad(x);
        self.push(Shape::new(s.n(), s.c(), oh, ow), y, Op::Resize { x, mode }, rg)
    }

    pub fn resize2x(&mut self, x: Var, mode: ResizeMode) -> Result<Var> {
        let s = self.shape(x);
        self.resize(x, 2 * s.h(), 2 * s.w(), mode)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let (s, rg) = (t.shape(), self.requires_grad(x));
        self.push(s, y, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = t.data().iter().map(|&v| sigmoid(v)).collect();
        let (s, rg) = (t.shape(), self.requires_grad(x));
        self.push(s, y, Op::Sigmoid { x }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let (s, rg) = (t.shape(), self.requires_grad(x));
        self.push(s, y, Op::Silu { x }, rg)
    }

    /// `a + b`, with `b` broadcast over its singleton axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let st = broadcast_strides(sa, self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(sa.numel());
        if sa == self.shape(b) {
            y.extend(ad.iter().zip(bd).map(|(&p, &q)| p + q));
        } else {
            for_each_broadcast(sa, st, |ia, ib| y.push(ad[ia] + bd[ib]));
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(sa, y, Op::Add { a, b }, rg)
    }

    /// `a * b`, with `b` broadcast over its singleton axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let st = broadcast_strides(sa, self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(sa.numel());
        if sa == self.shape(b) {
            y.extend(ad.iter().zip(bd).map(|(&p, &q)| p * q));
        } else {
            for_each_broadcast(sa, st, |ia, ib| y.push(ad[ia] * bd[ib]));
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(sa, y, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.value(x);
        let y = t.data().iter().map(|&v| v * s).collect();
        let (sh, rg) = (t.shape(), self.requires_grad(x));
        self.push(sh, y, Op::Scale { x, s }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    /// Per-pixel softmax over channels (max-subtracted).
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.c() == 0 {
            return Err(Error::config("softmax over zero channels"));
        }
        let y = softmax_channels(s, t.data());
        let rg = self.requires_grad(x);
        self.push(s, y, Op::Softmax { x }, rg)
    }

    /// Batch normalization. In training mode normalizes with batch statistics
    /// and returns them for the caller's running-stat update; in eval mode
    /// `running` must hold `(mean, var)`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        training: bool,
        eps: f64,
    ) -> Result<(Var, Option<BnStats>)> {
        let s = self.shape(x);
        let [n, c, h, w] = s.dims();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::config(format!("batchnorm has {} affine channels for input {s}", self.value(gamma).len())));
        }
        let plane = h * w;
        let (mean, inv_std, stats): (Vec<f64>, Vec<f64>, Option<BnStats>) = if training {
            let m = n * plane;
            if m < 2 {
                return Err(Error::config(format!("training-mode batchnorm needs more than one value per channel, got {s}")));
            }
            let (mean, var) = kernels::channel_stats(s, self.value(x).data());
            let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let unb = var.iter().map(|v| v * m as f64 / (m as f64 - 1.0)).collect();
            (mean.clone(), inv, Some(BnStats { mean, var_unbiased: unb }))
        } else {
            let (rm, rv) = running.ok_or_else(|| Error::config("eval-mode batchnorm needs running statistics"))?;
            if rm.len() != c || rv.len() != c {
                return Err(Error::config(format!("batchnorm running stats have {} channels for {s}", rm.len())));
            }
            let mean = rm.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let inv = rv.iter().map(|v| 1.0 / (v.to_f64().unwrap_or(f64::NAN) + eps).sqrt()).collect();
            (mean, inv, None)
        };
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut y = vec![T::zero(); s.numel()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (mu, is) = (T::of(mean[ch]), T::of(inv_std[ch]));
                for i in off..off + plane {
                    let xh = (xd[i] - mu) * is;
                    xhat[i] = xh;
                    y[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let inv_std: Vec<T> = inv_std.into_iter().map(T::of).collect();
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let v = self.push(s, y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training }, rg)?;
        Ok((v, stats))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(Error::config(format!("concat_channels spatial mismatch {sa} vs {sb}")));
        }
        let plane = sa.plane();
        let (ia, ib) = (sa.c() * plane, sb.c() * plane);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n() {
            y.extend_from_slice(&ad[n * ia..(n + 1) * ia]);
            y.extend_from_slice(&bd[n * ib..(n + 1) * ib]);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w()), y, Op::Concat { a, b }, rg)
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Shape::new(1, 1, 1, 1), vec![total], Op::Sum { x }, rg)
    }

    /// Class-weighted cross-entropy, mean-reduced over pixels:
    /// `-(1/M) * sum_i w[y_i] * log softmax(logits_i)[y_i]`.
    pub fn weighted_ce(&mut self, logits: Var, target: &[u32], weights: &[T]) -> Result<Var> {
        let s = self.shape(logits);
        let [n, k, h, w] = s.dims();
        let plane = h * w;
        if target.len() != n * plane {
            return Err(Error::config(format!("target has {} labels for logits {s}", target.len())));
        }
        if weights.len() != k {
            return Err(Error::config(format!("{} class weights for {k} classes", weights.len())));
        }
        if let Some(bad) = target.iter().find(|&&t| t as usize >= k) {
            return Err(Error::data(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_channels(s, self.value(logits).data());
        let mut acc = 0.0f64;
        for b in 0..n {
            for p in 0..plane {
                let y = target[b * plane + p] as usize;
                let pr = probs[(b * k + y) * plane + p].to_f64().unwrap_or(f64::NAN);
                // log-prob recomputed from logits for stability
                let ld = self.value(logits).data();
                let mut mx = f64::NEG_INFINITY;
                for c in 0..k {
                    mx = mx.max(ld[(b * k + c) * plane + p].to_f64().unwrap_or(f64::NAN));
                }
                let mut z = 0.0;
                for c in 0..k {
                    z += (ld[(b * k + c) * plane + p].to_f64().unwrap_or(f64::NAN) - mx).exp();
                }
                let logp = ld[(b * k + y) * plane + p].to_f64().unwrap_or(f64::NAN) - mx - z.ln();
                debug_assert!((logp.exp() - pr).abs() < 1e-3);
                acc -= weights[y].to_f64().unwrap_or(f64::NAN) * logp;
            }
        }
        let loss = acc / (n * plane) as f64;
        let rg = self.requires_grad(logits);
        self.push(
            Shape::new(1, 1, 1, 1),
            vec![T::of(loss)],
            Op::WeightedCe { logits, probs, target: target.to_vec(), weights: weights.to_vec() },
            rg,
        )
    }

    /// Per-pixel min-max squash over channels: `(x - min) / (max - min + eps)`.
    pub fn token_minmax(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.dims();
        if c == 0 {
            return Err(Error::config("token_minmax over zero channels"));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let eps = T::of(eps);
        let mut y = vec![T::zero(); s.numel()];
        let mut lo = Vec::with_capacity(n * plane);
        let mut hi = Vec::with_capacity(n * plane);
        let mut denom = Vec::with_capacity(n * plane);
        for b in 0..n {
            for p in 0..plane {
                let (mut li, mut hi_i) = (0, 0);
                for ch in 1..c {
                    let v = xd[(b * c + ch) * plane + p];
                    if v < xd[(b * c + li) * plane + p] {
                        li = ch;
                    }
                    if v > xd[(b * c + hi_i) * plane + p] {
                        hi_i = ch;
                    }
                }
                let m = xd[(b * c + li) * plane + p];
                let d = xd[(b * c + hi_i) * plane + p] - m + eps;
                for ch in 0..c {
                    let i = (b * c + ch) * plane + p;
                    y[i] = (xd[i] - m) / d;
                }
                lo.push(li as u32);
                hi.push(hi_i as u32);
                denom.push(d);
            }
        }
        let rg = self.requires_grad(x);
        self.push(s, y, Op::TokenMinMax { x, lo, hi, denom }, rg)
    }

    /// Per-channel B-spline: `y[n,c,p] = sum_i control[c,i] * B_i(u[n,c,p])`.
    /// `control` has shape `(C, grid + order, 1, 1)`.
    pub fn spline(&mut self, u: Var, control: Var, grid: usize, order: usize) -> Result<Var> {
        let knots = KnotVector::clamped_uniform(grid, order)?;
        let s = self.shape(u);
        let [n, c, h, w] = s.dims();
        let nb = knots.num_basis();
        let cs = self.shape(control);
        if cs != Shape::new(c, nb, 1, 1) {
            return Err(Error::config(format!("spline control shape {cs}, expected ({c},{nb},1,1)")));
        }
        let plane = h * w;
        let ud = self.value(u).data();
        let cd = self.value(control).data();
        let mut y = vec![T::zero(); s.numel()];
        let mut basis = [0.0f64; MAX_ORDER + 1];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let ctrl = &cd[ch * nb..(ch + 1) * nb];
                for i in off..off + plane {
                    let first = knots.eval_local(ud[i].to_f64().unwrap_or(f64::NAN), &mut basis);
                    let mut acc = T::zero();
                    for r in 0..=order {
                        acc = acc + ctrl[first + r] * T::of(basis[r]);
                    }
                    y[i] = acc;
                }
            }
        }
        let rg = self.requires_grad(u) || self.requires_grad(control);
        self.push(s, y, Op::Spline { u, control, knots }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::config(format!("backward needs a scalar loss, got {}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        // keep only leaf gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::MaxPool2 { x, idx } | Op::GlobalMax { x, idx } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&j, &gv) in idx.iter().zip(g) {
                    dx[j as usize] = dx[j as usize] + gv;
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::GlobalAvg { x } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let inv = T::of(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(s.numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::ChannelMean { x } => {
                let s = self.shape(*x);
                let (c, plane) = (s.c(), s.plane());
                let inv = T::of(1.0 / c as f64);
                let mut dx = Vec::with_capacity(s.numel());
                for b in 0..s.n() {
                    for _ in 0..c {
                        dx.extend(g[b * plane..(b + 1) * plane].iter().map(|&v| v * inv));
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::ChannelMax { x, idx } => {
                let s = self.shape(*x);
                let (c, plane) = (s.c(), s.plane());
                let mut dx = vec![T::zero(); s.numel()];
                for b in 0..s.n() {
                    for p in 0..plane {
                        let ch = idx[b * plane + p] as usize;
                        dx[(b * c + ch) * plane + p] = g[b * plane + p];
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Resize { x, mode } => {
                let s = self.shape(*x);
                let dx = match mode {
                    ResizeMode::Bilinear => kernels::resize_bilinear_backward(s, g, out_shape.h(), out_shape.w()),
                    ResizeMode::Nearest => kernels::resize_nearest_backward(s, g, out_shape.h(), out_shape.w()),
                };
                add_into(&mut grads[x.0], dx);
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let dx = xd.iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Sigmoid { x } => {
                let yd = node.value.data();
                let dx = yd.iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Silu { x } => {
                let xd = self.value(*x).data();
                let dx = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    let sb = self.shape(*b);
                    if sb == out_shape {
                        add_into(&mut grads[b.0], g.to_vec());
                    } else {
                        let st = broadcast_strides(out_shape, sb)?;
                        let mut db = vec![T::zero(); sb.numel()];
                        for_each_broadcast(out_shape, st, |ia, ib| db[ib] = db[ib] + g[ia]);
                        add_into(&mut grads[b.0], db);
                    }
                }
            }
            Op::Mul { a, b } => {
                let sb = self.shape(*b);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if sb == out_shape {
                    if self.wants(*a) {
                        add_into(&mut grads[a.0], g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect());
                    }
                    if self.wants(*b) {
                        add_into(&mut grads[b.0], g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect());
                    }
                } else {
                    let st = broadcast_strides(out_shape, sb)?;
                    if self.wants(*a) {
                        let mut da = vec![T::zero(); out_shape.numel()];
                        for_each_broadcast(out_shape, st, |ia, ib| da[ia] = g[ia] * bd[ib]);
                        add_into(&mut grads[a.0], da);
                    }
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); sb.numel()];
                        for_each_broadcast(out_shape, st, |ia, ib| db[ib] = db[ib] + g[ia] * ad[ia]);
                        add_into(&mut grads[b.0], db);
                    }
                }
            }
            Op::Scale { x, s } => {
                add_into(&mut grads[x.0], g.iter().map(|&v| v * *s).collect());
            }
            Op::Softmax { x } => {
                let s = out_shape;
                let (c, plane) = (s.c(), s.plane());
                let yd = node.value.data();
                let mut dx = vec![T::zero(); s.numel()];
                for b in 0..s.n() {
                    for p in 0..plane {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let i = (b * c + ch) * plane + p;
                            dot = dot + g[i] * yd[i];
                        }
                        for ch in 0..c {
                            let i = (b * c + ch) * plane + p;
                            dx[i] = yd[i] * (g[i] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let s = out_shape;
                let [n, c, h, w] = s.dims();
                let plane = h * w;
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); s.numel()];
                    let m = T::of((n * plane) as f64);
                    for ch in 0..c {
                        let k = gd[ch] * inv_std[ch];
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                dx[i] = if *training { k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m) } else { k * g[i] };
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], dgamma);
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], dbeta);
                }
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa.plane();
                let (ia, ib) = (sa.c() * plane, sb.c() * plane);
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(sa.numel());
                    for n in 0..sa.n() {
                        da.extend_from_slice(&g[n * (ia + ib)..n * (ia + ib) + ia]);
                    }
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(sb.numel());
                    for n in 0..sa.n() {
                        db.extend_from_slice(&g[n * (ia + ib) + ia..(n + 1) * (ia + ib)]);
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Sum { x } => {
                add_into(&mut grads[x.0], vec![g[0]; self.value(*x).len()]);
            }
            Op::WeightedCe { logits, probs, target, weights } => {
                let s = self.shape(*logits);
                let [n, k, h, w] = s.dims();
                let plane = h * w;
                let scale = g[0] / T::of((n * plane) as f64);
                let mut dx = vec![T::zero(); s.numel()];
                for b in 0..n {
                    for p in 0..plane {
                        let y = target[b * plane + p] as usize;
                        let wy = weights[y] * scale;
                        for c in 0..k {
                            let i = (b * k + c) * plane + p;
                            let ind = if c == y { T::one() } else { T::zero() };
                            dx[i] = wy * (probs[i] - ind);
                        }
                    }
                }
                add_into(&mut grads[logits.0], dx);
            }
            Op::TokenMinMax { x, lo, hi, denom } => {
                let s = out_shape;
                let [n, c, h, w] = s.dims();
                let plane = h * w;
                let yd = node.value.data();
                let mut dx = vec![T::zero(); s.numel()];
                for b in 0..n {
                    for p in 0..plane {
                        let t = b * plane + p;
                        let d = denom[t];
                        let (mut to_lo, mut to_hi) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let i = (b * c + ch) * plane + p;
                            dx[i] = g[i] / d;
                            to_lo = to_lo + g[i] * (yd[i] - T::one());
                            to_hi = to_hi - g[i] * yd[i];
                        }
                        let il = (b * c + lo[t] as usize) * plane + p;
                        let ih = (b * c + hi[t] as usize) * plane + p;
                        dx[il] = dx[il] + to_lo / d;
                        dx[ih] = dx[ih] + to_hi / d;
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Spline { u, control, knots } => {
                let s = out_shape;
                let [n, c, h, w] = s.dims();
                let plane = h * w;
                let order = knots.order();
                let nb = knots.num_basis();
                let ud = self.value(*u).data();
                let cd = self.value(*control).data();
                let want_u = self.wants(*u);
                let want_c = self.wants(*control);
                let mut du = want_u.then(|| vec![T::zero(); s.numel()]);
                let mut dc = want_c.then(|| vec![T::zero(); cd.len()]);
                let mut vals = [0.0f64; MAX_ORDER + 1];
                let mut ders = [0.0f64; MAX_ORDER + 1];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let ctrl = &cd[ch * nb..(ch + 1) * nb];
                        for i in off..off + plane {
                            let uv = ud[i].to_f64().unwrap_or(f64::NAN);
                            let first = knots.eval_local_with_derivative(uv, &mut vals, &mut ders);
                            if let Some(dc) = dc.as_mut() {
                                for r in 0..=order {
                                    let slot = &mut dc[ch * nb + first + r];
                                    *slot = *slot + g[i] * T::of(vals[r]);
                                }
                            }
                            if let Some(du) = du.as_mut() {
                                // clamped region is flat
                                if (0.0..=1.0).contains(&uv) {
                                    let mut dv = T::zero();
                                    for r in 0..=order {
                                        dv = dv + ctrl[first + r] * T::of(ders[r]);
                                    }
                                    du[i] = g[i] * dv;
                                }
                            }
                        }
                    }
                }
                if let Some(du) = du {
                    add_into(&mut grads[u.0], du);
                }
                if let Some(dc) = dc {
                    add_into(&mut grads[control.0], dc);
                }
            }
        }
        Ok(())
    }

    /// Name of the first op whose output holds a non-finite value, if any.
    /// Ops already refuse to produce such values, so this only fires for
    /// leaves fed in from outside.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| format!("{} at '{}'", self.nodes[i].op.name(), self.nodes[i].scope))
    }
}

pub(crate) fn softmax_channels<T: Element>(s: Shape, x: &[T]) -> Vec<T> {
    let [n, c, h, w] = s.dims();
    let plane = h * w;
    let mut y = vec![T::zero(); s.numel()];
    for b in 0..n {
        for p in 0..plane {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(x[(b * c + ch) * plane + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let i = (b * c + ch) * plane + p;
                let e = (x[i] - mx).exp();
                y[i] = e;
                z = z + e;
            }
            for ch in 0..c {
                let i = (b * c + ch) * plane + p;
                y[i] = y[i] / z;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn relu_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64([1, 1, 1, 2], vec![-1.0, 2.0]), true).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64([1, 1, 1, 2], vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64([1, 1, 1, 1], vec![1e300]), true).unwrap();
        let err = tape.scale(x, 1e300).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn max_pool_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let y = tape.pool(x, PoolKind::Max2x2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let odd = tape.leaf(t64([1, 1, 3, 2], vec![0.0; 6]), false).unwrap();
        assert!(matches!(tape.pool(odd, PoolKind::Max2x2), Err(Error::Config(_))));
    }

    #[test]
    fn channel_reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64([1, 3, 1, 1], vec![1.0, 2.0, 6.0]), false).unwrap();
        let m = tape.pool(x, PoolKind::ChannelMean).unwrap();
        let mx = tape.pool(x, PoolKind::ChannelMax).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
        assert_eq!(tape.value(mx).data(), &[6.0]);
    }

    #[test]
    fn broadcast_rejects_non_singleton_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros([1, 3, 2, 2]), false).unwrap();
        let b = tape.leaf(Tensor::<f64>::zeros([1, 2, 1, 1]), false).unwrap();
        assert!(matches!(tape.mul(a, b), Err(Error::Config(_))));
        let ok = tape.leaf(Tensor::<f64>::zeros([1, 1, 2, 2]), false).unwrap();
        assert!(tape.mul(a, ok).is_ok());
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64([1, 2, 1, 1], vec![0.0, 2f64.ln()]), false).unwrap();
        let y = tape.softmax_channel(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
    }
}
