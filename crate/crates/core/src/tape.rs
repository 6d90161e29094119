//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive applied through a [`Tape`] appends one record holding its
//! output value, its input handles and whatever it saved for the backward
//! rule. Records are appended in evaluation order, so the tape is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! Gradients are only propagated into records that (transitively) depend on a
//! leaf created with `requires_grad = true`; frozen parameters cost nothing in
//! the backward pass.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Handle to a record on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Leaf,
    Conv2d,
    InstanceNorm,
    Prelu,
    Linear,
    ConcatChannels,
    GlobalAveragePool,
    SoftmaxTemperature,
    CrossEntropy,
    Add,
    Sub,
    Scale,
    Abs,
    CumulativeSum,
    Sum,
    Reshape,
    SortColumns,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 16] = [
        PrimitiveKind::Conv2d,
        PrimitiveKind::InstanceNorm,
        PrimitiveKind::Prelu,
        PrimitiveKind::Linear,
        PrimitiveKind::ConcatChannels,
        PrimitiveKind::GlobalAveragePool,
        PrimitiveKind::SoftmaxTemperature,
        PrimitiveKind::CrossEntropy,
        PrimitiveKind::Add,
        PrimitiveKind::Sub,
        PrimitiveKind::Scale,
        PrimitiveKind::Abs,
        PrimitiveKind::CumulativeSum,
        PrimitiveKind::Sum,
        PrimitiveKind::Reshape,
        PrimitiveKind::SortColumns,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Leaf => "leaf",
            PrimitiveKind::Conv2d => "conv2d",
            PrimitiveKind::InstanceNorm => "instance_norm",
            PrimitiveKind::Prelu => "prelu",
            PrimitiveKind::Linear => "linear",
            PrimitiveKind::ConcatChannels => "concat_channels",
            PrimitiveKind::GlobalAveragePool => "global_average_pool",
            PrimitiveKind::SoftmaxTemperature => "softmax_temperature",
            PrimitiveKind::CrossEntropy => "cross_entropy",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Scale => "scale",
            PrimitiveKind::Abs => "abs",
            PrimitiveKind::CumulativeSum => "cumulative_sum",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::SortColumns => "sort_columns",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Convolution attributes. Kernels are square or rectangular, taken from the weight shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    GlobalAveragePool {
        x: Var,
    },
    SoftmaxTemperature {
        x: Var,
        scale: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Abs {
        x: Var,
    },
    CumulativeSum {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SortColumns {
        x: Var,
        /// `perm[r * cols + c]` is the source row of sorted element `(r, c)`.
        perm: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> PrimitiveKind {
        match self {
            Op::Leaf => PrimitiveKind::Leaf,
            Op::Conv2d { .. } => PrimitiveKind::Conv2d,
            Op::InstanceNorm { .. } => PrimitiveKind::InstanceNorm,
            Op::Prelu { .. } => PrimitiveKind::Prelu,
            Op::Linear { .. } => PrimitiveKind::Linear,
            Op::ConcatChannels { .. } => PrimitiveKind::ConcatChannels,
            Op::GlobalAveragePool { .. } => PrimitiveKind::GlobalAveragePool,
            Op::SoftmaxTemperature { .. } => PrimitiveKind::SoftmaxTemperature,
            Op::CrossEntropy { .. } => PrimitiveKind::CrossEntropy,
            Op::Add { .. } => PrimitiveKind::Add,
            Op::Sub { .. } => PrimitiveKind::Sub,
            Op::Scale { .. } => PrimitiveKind::Scale,
            Op::Abs { .. } => PrimitiveKind::Abs,
            Op::CumulativeSum { .. } => PrimitiveKind::CumulativeSum,
            Op::Sum { .. } => PrimitiveKind::Sum,
            Op::Reshape { .. } => PrimitiveKind::Reshape,
            Op::SortColumns { .. } => PrimitiveKind::SortColumns,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation record: an append-only list of primitive applications.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    /// Accumulated gradients of leaves, indexed like `nodes`.
    grads: Vec<Option<Tensor<T>>>,
    softmax_scales: Vec<f64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(kind: PrimitiveKind, shapes: &[&[usize]], detail: impl Into<String>) -> Error {
    Error::Shape {
        primitive: kind,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    }
}

/// Sum with eight interleaved accumulators so the loop vectorizes.
fn lane_sum<T: Real>(v: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = v.chunks_exact(8);
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &b| a + b);
    for ch in chunks {
        for k in 0..8 {
            acc[k] = acc[k] + ch[k];
        }
    }
    acc.iter().fold(tail, |a, &b| a + b)
}

fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), softmax_scales: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf tensor (parameter or input).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> PrimitiveKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` before, or for frozen leaves.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Temperature factors seen by every `softmax_temperature` call, in order.
    pub fn softmax_scales(&self) -> &[f64] {
        &self.softmax_scales
    }

    /// Sign bits of every `prelu` and `abs` input and the permutations of every
    /// `sort_columns`. Two evaluations with equal signatures lie on the same
    /// smooth piece of the graph.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Prelu { x, .. } | Op::Abs { x } => {
                    sig.extend(self.nodes[x.0].value.data().iter().map(|v| (*v >= T::zero()) as u64));
                }
                Op::SortColumns { perm, .. } => sig.extend(perm.iter().map(|&p| p as u64)),
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2D convolution of `(N, C, H, W)` by `(O, C, kh, kw)` with optional bias `(O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: Conv2dAttrs) -> Result<Var> {
        let kind = PrimitiveKind::Conv2d;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(kind, &[&xs, &ws], "input and kernel must be 4-axis"));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(kind, &[&xs, &ws], "channel count mismatch"));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(shape_err(kind, &[&xs, &ws, bs], "bias must be (out_channels)"));
            }
        }
        let geom = ConvGeom {
            in_channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_channels: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride: attrs.stride,
            pad: attrs.pad,
        };
        let (oh, ow) = geom
            .output_hw()
            .ok_or_else(|| shape_err(kind, &[&xs, &ws], "kernel larger than padded input"))?;
        let out = conv2d_forward(
            &geom,
            xs[0],
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        let value = Tensor::new([xs[0], ws[0], oh, ow], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, batch: xs[0] }, rg))
    }

    /// Per-instance, per-channel standardization over all axes after the
    /// channel axis, followed by a per-channel affine `gamma·x̂ + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let kind = PrimitiveKind::InstanceNorm;
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gamma).to_vec();
        let bs = self.shape(beta).to_vec();
        if xs.len() < 2 || gs != [xs[1]] || bs != [xs[1]] {
            return Err(shape_err(kind, &[&xs, &gs, &bs], "expected (N, C, ...) with (C) affine"));
        }
        let (n, c) = (xs[0], xs[1]);
        let m: usize = xs[2..].iter().product();
        let eps = T::lit(eps);
        let mf = T::lit(m as f64);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); xd.len()];
        for (i, ((seg, hs), os)) in xd.chunks_exact(m.max(1)).zip(xhat.chunks_exact_mut(m.max(1))).zip(out.chunks_exact_mut(m.max(1))).enumerate() {
            let ch = i % c;
            let mean = lane_sum(seg) / mf;
            for (h, &v) in hs.iter_mut().zip(seg) {
                *h = v - mean;
            }
            let var = lane_dot(hs, hs) / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            let (gc, bc) = (gd[ch], bd[ch]);
            for (o, h) in os.iter_mut().zip(hs.iter_mut()) {
                *h = *h * is;
                *o = gc * *h + bc;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(xs, out),
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// Parametric ReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(slope).to_vec();
        if xs.len() < 2 || ss != [xs[1]] {
            return Err(shape_err(PrimitiveKind::Prelu, &[&xs, &ss], "slope must be (C)"));
        }
        let c = xs[1];
        let m: usize = xs[2..].iter().product();
        let sd = self.value(slope).data();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        if m > 0 {
            for (i, (os, xs_)) in out.chunks_exact_mut(m).zip(xd.chunks_exact(m)).enumerate() {
                let a = sd[i % c];
                for (o, &v) in os.iter_mut().zip(xs_) {
                    *o = if v > T::zero() { v } else { a * v };
                }
            }
        }
        let rg = self.rg(&[x, slope]);
        Ok(self.push(Tensor::new(xs, out), Op::Prelu { x, slope }, rg))
    }

    /// `x · wᵀ + b` for `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let kind = PrimitiveKind::Linear;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(kind, &[&xs, &ws], "expected (N, in) and (out, in)"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(kind, &[&xs, &ws, self.shape(b)], "bias must be (out)"));
            }
        }
        let (n, o) = (xs[0], ws[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(
            MatRef::new(self.value(x).data(), n, xs[1]),
            MatRef::t(self.value(w).data(), o, ws[1]),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v = *v + bb;
                }
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(Tensor::new([n, o], out), Op::Linear { x, w, b }, rg))
    }

    /// Concatenate `(N, Ca, ...)` and `(N, Cb, ...)` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || as_.len() != bs.len() || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(shape_err(
                PrimitiveKind::ConcatChannels,
                &[&as_, &bs],
                "batch and trailing axes must agree",
            ));
        }
        let n = as_[0];
        let la: usize = as_[1..].iter().product();
        let lb: usize = bs[1..].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(&ad[i * la..(i + 1) * la]);
            out.extend_from_slice(&bd[i * lb..(i + 1) * lb]);
        }
        let mut shape = as_.clone();
        shape[1] += bs[1];
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out), Op::ConcatChannels { a, b }, rg))
    }

    /// Mean over all axes after the channel axis: `(N, C, ...) → (N, C)`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(shape_err(PrimitiveKind::GlobalAveragePool, &[&xs], "expected (N, C, ...)"));
        }
        let m: usize = xs[2..].iter().product();
        let mf = T::lit(m as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(m)
            .map(|s| s.iter().copied().sum::<T>() / mf)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([xs[0], xs[1]], out), Op::GlobalAveragePool { x }, rg))
    }

    /// Row-wise `softmax(scale · x)` over the last axis.
    pub fn softmax_temperature(&mut self, x: Var, scale: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || !(scale > 0.0 && scale.is_finite()) {
            return Err(shape_err(
                PrimitiveKind::SoftmaxTemperature,
                &[&xs],
                format!("needs at least one axis and a positive scale (got {scale})"),
            ));
        }
        self.softmax_scales.push(scale);
        let c = *xs.last().unwrap();
        let s = T::lit(scale);
        let mut out = vec![T::zero(); self.value(x).len()];
        for (row, o) in self.value(x).data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            softmax_row(row, s, o);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(xs, out), Op::SoftmaxTemperature { x, scale: s }, rg))
    }

    /// Mean cross entropy of `(N, C)` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let kind = PrimitiveKind::CrossEntropy;
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err(kind, &[&ls, &[labels.len()]], "expected (N, C) logits and N labels"));
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err(kind, &[&ls], format!("label {bad} out of range")));
        }
        let mut probs = vec![T::zero(); ls[0] * c];
        let mut loss = T::zero();
        for ((row, p), &label) in self
            .value(logits)
            .data()
            .chunks_exact(c)
            .zip(probs.chunks_exact_mut(c))
            .zip(labels)
        {
            softmax_row(row, T::one(), p);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss = loss + lse - row[label];
        }
        loss = loss / T::lit(ls[0] as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    fn same_shape(&self, kind: PrimitiveKind, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(kind, &[self.shape(a), self.shape(b)], "operands must have equal shapes"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(PrimitiveKind::Add, a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out), Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(PrimitiveKind::Sub, a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out), Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let out = self.value(x).data().iter().map(|&v| v * f).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out), Op::Scale { x, factor: f }, rg))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.abs()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out), Op::Abs { x }, rg))
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumulative_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(shape_err(PrimitiveKind::CumulativeSum, &[&xs], format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_split(&xs, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for k in 0..len {
                    let idx = (o * len + k) * inner + i;
                    acc = acc + out[idx];
                    out[idx] = acc;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(xs, out), Op::CumulativeSum { x, axis }, rg))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if shape.iter().product::<usize>() != xs.iter().product::<usize>() {
            return Err(shape_err(PrimitiveKind::Reshape, &[xs, shape], "element counts differ"));
        }
        let value = self.value(x).clone().reshaped(shape.to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Sort each column of an `(N, M)` matrix ascending. Ties keep row order.
    pub fn sort_columns(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err(PrimitiveKind::SortColumns, &[&xs], "expected (N, M)"));
        }
        let (n, m) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut perm = vec![0usize; n * m];
        let mut out = vec![T::zero(); n * m];
        let mut idx: Vec<usize> = Vec::with_capacity(n);
        for c in 0..m {
            idx.clear();
            idx.extend(0..n);
            idx.sort_by(|&a, &b| {
                xd[a * m + c]
                    .partial_cmp(&xd[b * m + c])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for (r, &src) in idx.iter().enumerate() {
                perm[r * m + c] = src;
                out[r * m + c] = xd[src * m + c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(xs, out), Op::SortColumns { x, perm }, rg))
    }

    /// Reverse sweep from a scalar `output`, accumulating into leaf gradients.
    ///
    /// Leaf gradients add up across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_shape = self.shape(output);
        if self.value(output).len() != 1 {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let count = output.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(count, || None);
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..count).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            match &mut self.grads[i] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g));
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, batch } => {
                let mut dx = rg(*x).then(|| vec![T::zero(); val(*x).len()]);
                let mut dw = rg(*w).then(|| vec![T::zero(); val(*w).len()]);
                let mut db = b.filter(|b| rg(*b)).map(|b| vec![T::zero(); val(b).len()]);
                conv2d_backward(
                    geom,
                    *batch,
                    val(*x),
                    val(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    accumulate(grads, *x, d);
                }
                if let Some(d) = dw {
                    accumulate(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    accumulate(grads, *b, d);
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let c = val(*gamma).len();
                let nc = inv_std.len();
                let m = xhat.len() / nc;
                let gd = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = rg(*x).then(|| vec![T::zero(); xhat.len()]);
                let mf = T::lit(m as f64);
                for i in 0..nc {
                    let ch = i % c;
                    let gs = &g[i * m..(i + 1) * m];
                    let hs = &xhat[i * m..(i + 1) * m];
                    let sum_g = lane_sum(gs);
                    let sum_gh = lane_dot(gs, hs);
                    dgamma[ch] = dgamma[ch] + sum_gh;
                    dbeta[ch] = dbeta[ch] + sum_g;
                    if let Some(dx) = dx.as_mut() {
                        // dx = γ·σ⁻¹/m · (m·g − Σg − x̂·Σ(g·x̂))
                        let k = gd[ch] * inv_std[i] / mf;
                        let (km, kg, kh) = (k * mf, k * sum_g, k * sum_gh);
                        for ((d, &gj), &hj) in dx[i * m..(i + 1) * m].iter_mut().zip(gs).zip(hs) {
                            *d = km * gj - kg - kh * hj;
                        }
                    }
                }
                if let Some(d) = dx {
                    accumulate(grads, *x, d);
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Prelu { x, slope } => {
                let xd = val(*x);
                let sd = val(*slope);
                let c = sd.len();
                let m = (xd.len() / (c * self.nodes[x.0].value.shape()[0]).max(1)).max(1);
                if rg(*x) {
                    let mut d = vec![T::zero(); xd.len()];
                    for (i, ((ds, xs_), gs)) in d.chunks_exact_mut(m).zip(xd.chunks_exact(m)).zip(g.chunks_exact(m)).enumerate() {
                        let a = sd[i % c];
                        for ((o, &v), &gi) in ds.iter_mut().zip(xs_).zip(gs) {
                            *o = if v > T::zero() { gi } else { a * gi };
                        }
                    }
                    accumulate(grads, *x, d);
                }
                if rg(*slope) {
                    let mut d = vec![T::zero(); c];
                    for (i, (xs_, gs)) in xd.chunks_exact(m).zip(g.chunks_exact(m)).enumerate() {
                        let neg = xs_.iter().zip(gs).map(|(&v, &gi)| if v > T::zero() { T::zero() } else { v * gi });
                        d[i % c] = d[i % c] + neg.fold(T::zero(), |a, b| a + b);
                    }
                    accumulate(grads, *slope, d);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, inp) = (xs[0], xs[1]);
                let o = val(*w).len() / inp;
                if rg(*x) {
                    let mut d = vec![T::zero(); n * inp];
                    gemm(MatRef::new(g, n, o), MatRef::new(val(*w), o, inp), T::zero(), &mut d);
                    accumulate(grads, *x, d);
                }
                if rg(*w) {
                    let mut d = vec![T::zero(); o * inp];
                    gemm(MatRef::t(g, n, o), MatRef::new(val(*x), n, inp), T::zero(), &mut d);
                    accumulate(grads, *w, d);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let mut d = vec![T::zero(); o];
                    for row in g.chunks_exact(o) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    accumulate(grads, b, d);
                }
            }
            Op::ConcatChannels { a, b } => {
                let n = node.value.shape()[0];
                let la = val(*a).len() / n;
                let lb = val(*b).len() / n;
                if rg(*a) {
                    let d = (0..n).flat_map(|i| g[i * (la + lb)..i * (la + lb) + la].iter().copied()).collect();
                    accumulate(grads, *a, d);
                }
                if rg(*b) {
                    let d = (0..n)
                        .flat_map(|i| g[i * (la + lb) + la..(i + 1) * (la + lb)].iter().copied())
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::GlobalAveragePool { x } => {
                if rg(*x) {
                    let len = val(*x).len();
                    let m = len / g.len();
                    let mf = T::lit(m as f64);
                    let d = (0..len).map(|i| g[i / m] / mf).collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::SoftmaxTemperature { x, scale } => {
                if rg(*x) {
                    let y = node.value.data();
                    let c = *node.value.shape().last().unwrap();
                    let mut d = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(d.chunks_exact_mut(c)) {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for k in 0..c {
                            dr[k] = *scale * yr[k] * (gr[k] - dot);
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if rg(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let k = g[0] / T::lit(n as f64);
                    let mut d: Vec<T> = probs.iter().map(|&p| p * k).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] = d[i * c + l] - k;
                    }
                    accumulate(grads, *logits, d);
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Scale { x, factor } => {
                if rg(*x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *factor).collect());
                }
            }
            Op::Abs { x } => {
                if rg(*x) {
                    let d = val(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| {
                            if v > T::zero() {
                                gi
                            } else if v < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::CumulativeSum { x, axis } => {
                if rg(*x) {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let mut d = g.to_vec();
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut acc = T::zero();
                            for k in (0..len).rev() {
                                let idx = (o * len + k) * inner + i;
                                acc = acc + d[idx];
                                d[idx] = acc;
                            }
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Sum { x } => {
                if rg(*x) {
                    accumulate(grads, *x, vec![g[0]; val(*x).len()]);
                }
            }
            Op::Reshape { x } => {
                if rg(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::SortColumns { x, perm } => {
                if rg(*x) {
                    let m = node.value.shape()[1];
                    let mut d = vec![T::zero(); g.len()];
                    for (k, &src) in perm.iter().enumerate() {
                        let c = k % m;
                        d[src * m + c] = d[src * m + c] + g[k];
                    }
                    accumulate(grads, *x, d);
                }
            }
        }
    }
}

fn softmax_row<T: Real>(row: &[T], scale: T, out: &mut [T]) {
    let max = row.iter().map(|&v| v * scale).fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v * scale - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `(product of axes before, axis length, product of axes after)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(t(&[1, 2, 3, 3], &data));
        // 2 → 2 channels, 1×1, identity mixing
        let w = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, None, Conv2dAttrs { stride: 1, pad: 0 }).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn prelu_with_unit_slope_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data = [-3.0, -0.5, 0.0, 0.5, 2.0, -1e-9];
        let x = tape.constant(t(&[1, 2, 3], &data));
        let s = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.prelu(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &data);
    }

    #[test]
    fn instance_norm_of_constant_channel_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([2, 1, 4, 4], 7.5f32));
        let g = tape.constant(Tensor::full([1], 1.0f32));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.instance_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        // a single spatial element is legal and normalizes to zero as well
        let x1 = tape.constant(Tensor::full([3, 1, 1, 1], -2.0f32));
        let y1 = tape.instance_norm(x1, g, b, 1e-5).unwrap();
        assert!(tape.value(y1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn cross_entropy_gradient_on_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros([1, 25]), true);
        let l = tape.cross_entropy(z, &[7]).unwrap();
        assert!((tape.value(l).item() - 25f64.ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = tape.grad(z).unwrap().data();
        for (k, &v) in g.iter().enumerate() {
            let want = if k == 7 { 1.0 / 25.0 - 1.0 } else { 1.0 / 25.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([3]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn repeated_backward_after_zeroing_is_identical() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([1, 4], vec![0.3, -1.2, 2.0, 0.1]), true);
        let y = tape.softmax_temperature(x, 0.1).unwrap();
        let c = tape.cumulative_sum(y, 1).unwrap();
        let a = tape.abs(c).unwrap();
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        let first = tape.grad(x).unwrap().clone();
        tape.backward(s).unwrap();
        let doubled: Vec<f32> = first.data().iter().map(|v| v * 2.0).collect();
        assert_eq!(tape.grad(x).unwrap().data(), &doubled[..]);
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &first);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.starts_with("add:"), "{err}");
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([3, 5, 3, 3]));
        let err = tape.conv2d(x, w, None, Conv2dAttrs { stride: 1, pad: 0 }).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([1, 2], vec![1.0, 2.0]), true);
        let w = tape.leaf(Tensor::new([3, 2], vec![0.1; 6]), false);
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn sort_columns_orders_each_column() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 2], &[3.0, 0.0, 1.0, 2.0, 2.0, 1.0]));
        let y = tape.sort_columns(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 2.0, 1.0, 3.0, 2.0]);
    }
}
