//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order, so node indices are a
//! topological order and the backward sweep simply walks them in reverse.

use super::kernels;
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use crate::wavelet;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// `[B,C,H,W] → [B,C,1,1]` mean over the plane.
    GlobalAvg,
    /// `[B,C,H,W] → [B,C,1,1]` max over the plane.
    GlobalMax,
    /// `[B,C,H,W] → [B,1,H,W]` mean over channels.
    ChannelMean,
    /// `[B,C,H,W] → [B,1,H,W]` max over channels.
    ChannelMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Scale {
        x: Var,
        factor: T,
    },
    AddScalar(Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    ScaleSpatial {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Pool {
        kind: PoolKind,
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        mode: UpsampleMode,
    },
    AvgPool2(Var),
    HaarAnalysis(Var),
    HaarSynthesis(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Record of executed ops supporting exactly one backward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf; its gradient is readable through [`Graph::grad`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf tagged with a parameter slot, see [`Graph::param_grads`].
    pub fn param(&mut self, slot: usize, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(slot);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, f)?
        } else if vb.numel() == 1 {
            let s = vb.data()[0];
            va.map(|x| f(x, s))
        } else if va.numel() == 1 {
            let s = va.data()[0];
            vb.map(|y| f(s, y))
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("{} vs {} (only scalar operands broadcast)", va.shape(), vb.shape()),
            ));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        let out = self.value(x).map(|v| v + offset);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// `x[b,c,:,:] · gate[b,c,0,0]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gate));
        let s = vx.shape();
        if vg.shape() != Shape::new(s.b(), s.c(), 1, 1) {
            return Err(Error::shape("scale_channels", format!("gate {} for input {s}", vg.shape())));
        }
        let plane = s.plane();
        let mut out = vx.clone();
        for (p, &g) in out.data_mut().chunks_exact_mut(plane).zip(vg.data()) {
            for v in p {
                *v = *v * g;
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(out, Op::ScaleChannels { x, gate }, rg))
    }

    /// `x[b,c,h,w] · gate[b,0,h,w]`.
    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gate));
        let s = vx.shape();
        if vg.shape() != Shape::new(s.b(), 1, s.h(), s.w()) {
            return Err(Error::shape("scale_spatial", format!("gate {} for input {s}", vg.shape())));
        }
        let plane = s.plane();
        let mut out = vx.clone();
        for (i, p) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let b = i / s.c();
            let g = &vg.data()[b * plane..(b + 1) * plane];
            for (v, &gv) in p.iter_mut().zip(g) {
                *v = *v * gv;
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(out, Op::ScaleSpatial { x, gate }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(first);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.b() != s0.b() {
                return Err(Error::shape("concat_channels", format!("batch {} vs {}", s.b(), s0.b())));
            }
            if s.h() != s0.h() || s.w() != s0.w() {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial {}x{} vs {}x{}", s.h(), s.w(), s0.h(), s0.w()),
                ));
            }
            total_c += s.c();
        }
        let out_shape = s0.with_c(total_c);
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..s0.b() {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape().c() * v.shape().plane();
                data.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c() {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} out of {}", start + len, s.c()),
            ));
        }
        let plane = s.plane();
        let v = self.value(x);
        let mut data = Vec::with_capacity(s.b() * len * plane);
        for b in 0..s.b() {
            let base = (b * s.c() + start) * plane;
            data.extend_from_slice(&v.data()[base..base + len * plane]);
        }
        let out = Tensor::from_vec(s.with_c(len), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    /// Splits `x` into `n` equal channel groups, in order.
    pub fn chunk_channels(&mut self, x: Var, n: usize) -> Result<Vec<Var>> {
        let c = self.shape(x).c();
        if n == 0 || !c.is_multiple_of(n) {
            return Err(Error::Indivisible { channels: c, parts: n });
        }
        let len = c / n;
        (0..n).map(|i| self.slice_channels(x, i * len, len)).collect()
    }

    pub fn pool(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h() == 0 || s.w() == 0 || s.c() == 0 {
            return Err(Error::shape("pool", format!("empty input {s}")));
        }
        let (out, argmax) = kernels::pool_forward(kind, self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Pool { kind, x, argmax }, rg))
    }

    pub fn upsample2(&mut self, x: Var, mode: UpsampleMode) -> Var {
        let out = kernels::upsample_forward(mode, self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x, mode }, rg)
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::avg_pool2_forward(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// Orthonormal Haar analysis, stacked band-major `[B,4C,H/2,W/2]`.
    pub fn haar_analysis(&mut self, x: Var) -> Result<Var> {
        let out = wavelet::analysis_stacked(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::HaarAnalysis(x), rg))
    }

    /// Inverse of [`Graph::haar_analysis`].
    pub fn haar_synthesis(&mut self, stacked: Var) -> Result<Var> {
        let out = wavelet::synthesis_stacked(self.value(stacked))?;
        let rg = self.rg(stacked);
        Ok(self.push(out, Op::HaarSynthesis(stacked), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(T::lit(v.sum().as_f64() / v.numel() as f64));
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated in the overflow-free log-sum form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape("bce", format!("logits {} vs targets {}", z.shape(), targets.shape())));
        }
        let total = z.data().iter().zip(targets.data()).fold(0.0, |acc, (&z, &t)| {
            let (z, t) = (z.as_f64(), t.as_f64());
            acc + z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
        });
        let out = Tensor::scalar(T::lit(total / z.numel() as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", format!("prediction {} vs target {}", p.shape(), t.shape())));
        }
        let total = p.data().iter().zip(t.data()).fold(0.0, |acc, (&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            acc + d * d
        });
        let out = Tensor::scalar(T::lit(total / p.numel() as f64));
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(out, Op::Mse { pred, target }, rg))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(Error::NonScalarLoss(s));
        }
        self.backward_with(loss, Tensor::ones(s))
    }

    /// Backpropagates a cotangent `seed` from an arbitrary output; leaf
    /// gradients are then the vector-Jacobian product `seedᵀ·J`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!("seed {} for output {}", seed.shape(), self.shape(output)),
            ));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.propagate(i, &dy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, dy: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need = [self.rg(input), self.rg(weight), bias.is_some_and(|b| self.rg(b))];
                let g = kernels::conv2d_backward(self.value(input), self.value(weight), dy, stride, padding, need)?;
                if let Some(dx) = g.input {
                    out.push((input, dx));
                }
                if let Some(dw) = g.weight {
                    out.push((weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, g.bias) {
                    let shape = self.shape(b);
                    out.push((b, db.reshape(shape)?));
                }
            }
            &Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => dy.clone(),
                    BinaryKind::Mul => mul_broadcast(dy, vb),
                };
                let gb = match kind {
                    BinaryKind::Add => dy.clone(),
                    BinaryKind::Sub => dy.map(|v| -v),
                    BinaryKind::Mul => mul_broadcast(dy, va),
                };
                out.push((a, reduce_to(ga, va.shape())));
                out.push((b, reduce_to(gb, vb.shape())));
            }
            &Op::Relu(x) => {
                let g = dy.zip_map(self.value(x), |g, v| if v > T::zero() { g } else { T::zero() })?;
                out.push((x, g));
            }
            &Op::Sigmoid(x) => {
                let g = dy.zip_map(&node.value, |g, s| g * s * (T::one() - s))?;
                out.push((x, g));
            }
            &Op::Scale { x, factor } => out.push((x, dy.map(|g| g * factor))),
            &Op::AddScalar(x) => out.push((x, dy.clone())),
            &Op::ScaleChannels { x, gate } => {
                let (vx, vg) = (self.value(x), self.value(gate));
                let plane = vx.shape().plane();
                if self.rg(x) {
                    let mut gx = dy.clone();
                    for (p, &g) in gx.data_mut().chunks_exact_mut(plane).zip(vg.data()) {
                        for v in p {
                            *v = *v * g;
                        }
                    }
                    out.push((x, gx));
                }
                if self.rg(gate) {
                    let data = dy
                        .data()
                        .chunks_exact(plane)
                        .zip(vx.data().chunks_exact(plane))
                        .map(|(d, v)| d.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
                        .collect();
                    out.push((gate, Tensor::from_vec(vg.shape(), data)?));
                }
            }
            &Op::ScaleSpatial { x, gate } => {
                let (vx, vg) = (self.value(x), self.value(gate));
                let s = vx.shape();
                let plane = s.plane();
                let mut gx = dy.clone();
                let mut gg = Tensor::zeros(vg.shape());
                for (ci, (dp, xp)) in dy.data().chunks_exact(plane).zip(vx.data().chunks_exact(plane)).enumerate() {
                    let b = ci / s.c();
                    let gate_p = &vg.data()[b * plane..(b + 1) * plane];
                    let gx_p = &mut gx.data_mut()[ci * plane..(ci + 1) * plane];
                    for (v, &g) in gx_p.iter_mut().zip(gate_p) {
                        *v = *v * g;
                    }
                    let gg_p = &mut gg.data_mut()[b * plane..(b + 1) * plane];
                    for ((acc, &d), &xv) in gg_p.iter_mut().zip(dp).zip(xp) {
                        *acc = *acc + d * xv;
                    }
                }
                out.push((x, gx));
                out.push((gate, gg));
            }
            Op::Concat(parts) => {
                let s = dy.shape();
                let plane = s.plane();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let mut data = Vec::with_capacity(ps.numel());
                    for b in 0..s.b() {
                        let base = (b * s.c() + offset) * plane;
                        data.extend_from_slice(&dy.data()[base..base + ps.c() * plane]);
                    }
                    offset += ps.c();
                    if self.rg(p) {
                        out.push((p, Tensor::from_vec(ps, data)?));
                    }
                }
            }
            &Op::SliceChannels { x, start } => {
                let s = self.shape(x);
                let len = dy.shape().c();
                let plane = s.plane();
                let mut g = Tensor::zeros(s);
                for b in 0..s.b() {
                    let dst = (b * s.c() + start) * plane;
                    let src = b * len * plane;
                    g.data_mut()[dst..dst + len * plane].copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                out.push((x, g));
            }
            Op::Pool { kind, x, argmax } => {
                out.push((*x, kernels::pool_backward(*kind, self.shape(*x), argmax, dy)));
            }
            &Op::Upsample { x, mode } => {
                out.push((x, kernels::upsample_backward(mode, self.shape(x), dy)));
            }
            &Op::AvgPool2(x) => out.push((x, kernels::avg_pool2_backward(self.shape(x), dy))),
            &Op::HaarAnalysis(x) => out.push((x, wavelet::synthesis_stacked(dy)?)),
            &Op::HaarSynthesis(x) => out.push((x, wavelet::analysis_stacked(dy)?)),
            &Op::Sum(x) => out.push((x, Tensor::full(self.shape(x), dy.data()[0]))),
            &Op::Mean(x) => {
                let s = self.shape(x);
                out.push((x, Tensor::full(s, dy.data()[0] / T::lit(s.numel() as f64))));
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = dy.data()[0] / T::lit(targets.numel() as f64);
                let g = self.value(*logits).zip_map(targets, |z, t| (sigmoid(z) - t) * scale)?;
                out.push((*logits, g));
            }
            &Op::Mse { pred, target } => {
                let scale = dy.data()[0] * T::lit(2.0) / T::lit(self.value(pred).numel() as f64);
                let g = self.value(pred).zip_map(self.value(target), |p, t| (p - t) * scale)?;
                if self.rg(target) {
                    out.push((target, g.map(|v| -v)));
                }
                out.push((pred, g));
            }
        }
        for (v, g) in out {
            self.accumulate(v, g);
        }
        Ok(())
    }

    /// Gradient of a differentiable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `(slot, gradient)` for every parameter leaf reached by backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.nodes
            .iter()
            .zip(&self.grads)
            .filter_map(|(n, g)| Some((n.param?, g.as_ref()?)))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn mul_broadcast<T: Scalar>(dy: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if other.numel() == 1 {
        let s = other.data()[0];
        dy.map(|g| g * s)
    } else if dy.shape() == other.shape() {
        dy.zip_map(other, |g, v| g * v).expect("same shape")
    } else {
        // dy is a scalar broadcast against `other`
        let g = dy.data()[0];
        other.map(|v| g * v)
    }
}

/// Sums a broadcast gradient back down to a scalar operand's shape.
fn reduce_to<T: Scalar>(g: Tensor<T>, shape: Shape) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else if shape.numel() == 1 {
        Tensor::full(shape, g.sum())
    } else {
        Tensor::full(shape, g.data()[0])
    }
}
