//! Reverse-mode autodiff over a linear record of executed ops.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! nodes from the loss to the start, so gradients flow in exact reverse
//! execution order and accumulate when a value is used more than once.
//! Gradients are retained for leaves and for nodes marked with
//! [`Tape::retain_grad`].

use crate::error::{Error, Result};
use crate::heatmap::{self, HeatmapNorm};
use crate::nn::conv::{conv2d_backward, conv2d_forward, Activation, ConvSpec};
use crate::nn::norm::{batch_norm_backward, batch_norm_forward};
use crate::nn::roi::{RoiBox, RoiPlan};

use super::broadcast::{broadcast_shape, source_indices};
use super::{ensure_finite, Real, Tensor, EPS_GUARD};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Exp,
    /// `ln(x + 1e-12)`; negative inputs are an error.
    Log,
    Sigmoid,
    Relu6,
    Clamp { lo: f64, hi: f64 },
    /// `x * scale + shift`.
    Affine { scale: f64, shift: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Batch statistics produced by a training-mode batch norm, for updating
/// running averages.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        /// Output index for every input element.
        out_index: Vec<usize>,
        count: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        act: Activation,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    RoiAlign {
        features: Var,
        plan: RoiPlan<T>,
    },
    SoftArgmax {
        logits: Var,
        norm: HeatmapNorm,
    },
    HeatmapLoss {
        logits: Var,
        target: Tensor<T>,
        coords: Tensor<T>,
    },
    L2Coord {
        pred: Var,
        target: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Unary { a, .. } | Op::Reduce { a, .. } | Op::Reshape { a } => vec![*a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::RoiAlign { features, .. } => vec![*features],
            Op::SoftArgmax { logits, .. } | Op::HeatmapLoss { logits, .. } => vec![*logits],
            Op::L2Coord { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    retain: bool,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or retained node; `None` when it was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but unreached values report zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::InvalidAxis { axis: bad, rank });
    }
    Ok(axes)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep this node's gradient in the [`Gradients`] returned by backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        ensure_finite(value.data(), name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            retain: false,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            retain: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is reported by backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            retain: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape())?;
            let ia = source_indices(va.shape(), &shape);
            let ib = source_indices(vb.shape(), &shape);
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(va.data()[i], vb.data()[j])).collect();
            Tensor::new(shape, data)?
        };
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        self.push(value, Op::Binary { kind, a, b }, name)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            UnaryKind::Exp => x.map(|v| v.exp()),
            UnaryKind::Log => {
                let eps = T::of(EPS_GUARD);
                x.map(|v| (v + eps).ln())
            }
            UnaryKind::Sigmoid => x.map(heatmap::sigmoid),
            UnaryKind::Relu6 => {
                let six = T::of(6.0);
                x.map(|v| v.max(T::zero()).min(six))
            }
            UnaryKind::Clamp { lo, hi } => {
                let (lo, hi) = (T::of(lo), T::of(hi));
                x.map(|v| v.max(lo).min(hi))
            }
            UnaryKind::Affine { scale, shift } => {
                let (scale, shift) = (T::of(scale), T::of(shift));
                x.map(|v| v * scale + shift)
            }
        };
        let name = match kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu6 => "relu6",
            UnaryKind::Clamp { .. } => "clamp",
            UnaryKind::Affine { .. } => "affine",
        };
        self.push(value, Op::Unary { kind, a }, name)
    }

    /// Dispatch for the elementwise family: binary kinds need `b`.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Binary(k), Some(b)) => self.binary(k, a, b),
            (ElementwiseKind::Unary(k), None) => self.unary(k, a),
            (ElementwiseKind::Binary(_), None) => Err(Error::shape("binary op needs two operands")),
            (ElementwiseKind::Unary(_), Some(_)) => Err(Error::shape("unary op takes one operand")),
        }
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu6(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu6, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp { lo, hi }, a)
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(UnaryKind::Affine { scale, shift }, a)
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let input = self.value(a);
        let shape = input.shape().to_vec();
        let axes = normalize_axes(axes, shape.len())?;
        let out_shape: Vec<usize> = (0..shape.len())
            .filter(|d| !axes.contains(d))
            .map(|d| shape[d])
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&d| shape[d]).product();
        // Map every input element to its output slot.
        let mut out_index = Vec::with_capacity(input.len());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..input.len() {
            let mut o = 0;
            for d in 0..shape.len() {
                if !axes.contains(&d) {
                    o = o * shape[d] + idx[d];
                }
            }
            out_index.push(o);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out = match kind {
            ReduceKind::Max => vec![T::neg_infinity(); out_len],
            _ => vec![T::zero(); out_len],
        };
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (&v, &o) in input.data().iter().zip(&out_index) {
                    out[o] += v;
                }
                if kind == ReduceKind::Mean {
                    let c = T::of(count as f64);
                    out.iter_mut().for_each(|v| *v /= c);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; out_len];
                for (i, (&v, &o)) in input.data().iter().zip(&out_index).enumerate() {
                    if v > out[o] {
                        out[o] = v;
                        argmax[o] = i;
                    }
                }
            }
        }
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
        };
        let value = Tensor::new(out_shape, out)?;
        self.push(
            value,
            Op::Reduce {
                kind,
                a,
                out_index,
                count,
                argmax,
            },
            name,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).ndim()).collect();
        self.reduce(ReduceKind::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).ndim()).collect();
        self.reduce(ReduceKind::Mean, a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { a }, "reshape")
    }

    /// Linear convolution (the activation in `spec` is not applied here).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        self.push(value, Op::Conv2d { x, w, b, spec: *spec }, "conv2d")
    }

    /// Training-mode batch normalization over N, H, W.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BnStats<T>)> {
        self.batch_norm_act(x, gamma, beta, Activation::None)
    }

    /// Batch normalization followed by `act`, as one node.
    pub fn batch_norm_act(&mut self, x: Var, gamma: Var, beta: Var, act: Activation) -> Result<(Var, BnStats<T>)> {
        let bn = batch_norm_forward(self.value(x), self.value(gamma).data(), self.value(beta).data(), act)?;
        let shape = self.value(x).shape();
        let stats = BnStats {
            mean: bn.mean.clone(),
            var: bn.var,
            count: shape[0] * shape[2] * shape[3],
        };
        let var = self.push(
            bn.output,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                act,
                mean: bn.mean,
                inv_std: bn.inv_std,
            },
            "batch_norm",
        )?;
        Ok((var, stats))
    }

    /// Crop `boxes.len() / N` boxes per sample; output `[N, L*C, S, S]`.
    /// Box placement is constant: no gradient flows into it.
    pub fn roi_align(&mut self, features: Var, boxes: &[RoiBox], out_size: usize) -> Result<Var> {
        let plan = RoiPlan::new(self.value(features).shape(), boxes, out_size)?;
        let value = Tensor::new(plan.output_shape(), plan.forward(self.value(features).data()))?;
        self.push(value, Op::RoiAlign { features, plan }, "roi_align")
    }

    /// Expected coordinates of `[N, L, H, W]` heatmaps as `[N, L, 2]` in
    /// heatmap units, or relative to the grid center when `centered`.
    pub fn soft_argmax(&mut self, logits: Var, norm: HeatmapNorm, centered: bool) -> Result<Var> {
        let z = self.value(logits);
        let &[n, l, h, w] = z.shape() else {
            return Err(Error::shape(format!("soft_argmax expects [N,L,H,W], got {:?}", z.shape())));
        };
        let plane = h * w;
        let mut out = Vec::with_capacity(n * l * 2);
        for k in 0..n * l {
            let c = heatmap::soft_argmax_one(&z.data()[k * plane..][..plane], h, w, norm, centered)?;
            out.extend(c);
        }
        let value = Tensor::new([n, l, 2], out)?;
        // Centering is a constant shift, so backward is identical.
        self.push(value, Op::SoftArgmax { logits, norm }, "soft_argmax")
    }

    /// Weighted pixelwise sigmoid cross-entropy against constant targets.
    pub fn heatmap_loss(&mut self, logits: Var, target: Tensor<T>, coords: Tensor<T>) -> Result<Var> {
        let loss = heatmap::heatmap_loss(self.value(logits), &target, &coords)?;
        self.push(Tensor::scalar(loss), Op::HeatmapLoss { logits, target, coords }, "heatmap_loss")
    }

    pub fn l2_coord_loss(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let loss = heatmap::l2_coord_loss(self.value(pred), &target)?;
        self.push(Tensor::scalar(loss), Op::L2Coord { pred, target }, "l2_coord_loss")
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut kept: Vec<Option<Tensor<T>>> = Vec::new();
        kept.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            if node.retain {
                kept[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients {
            grads: kept,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let same = va.shape() == vb.shape();
                let ia = (!same).then(|| source_indices(va.shape(), out.shape()));
                let ib = (!same).then(|| source_indices(vb.shape(), out.shape()));
                let at = |ix: &Option<Vec<usize>>, k: usize| ix.as_ref().map_or(k, |v| v[k]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for (k, &gk) in g.iter().enumerate() {
                        let (i, j) = (at(&ia, k), at(&ib, k));
                        da[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gk,
                            BinaryKind::Mul => gk * vb.data()[j],
                            BinaryKind::Div => gk / vb.data()[j],
                        };
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for (k, &gk) in g.iter().enumerate() {
                        let (i, j) = (at(&ia, k), at(&ib, k));
                        db[j] += match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * va.data()[i],
                            BinaryKind::Div => -gk * va.data()[i] / (vb.data()[j] * vb.data()[j]),
                        };
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Unary { kind, a } => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let y = out.data();
                    let pass = |lo: T, hi: T| -> Vec<T> {
                        g.iter().zip(x).map(|(&gk, &xk)| if xk >= lo && xk <= hi { gk } else { T::zero() }).collect()
                    };
                    let da: Vec<T> = match *kind {
                        UnaryKind::Exp => g.iter().zip(y).map(|(&gk, &yk)| gk * yk).collect(),
                        UnaryKind::Log => {
                            let eps = T::of(EPS_GUARD);
                            g.iter().zip(x).map(|(&gk, &xk)| gk / (xk + eps)).collect()
                        }
                        UnaryKind::Sigmoid => g.iter().zip(y).map(|(&gk, &yk)| gk * yk * (T::one() - yk)).collect(),
                        UnaryKind::Relu6 => {
                            let six = T::of(6.0);
                            g.iter()
                                .zip(x)
                                .map(|(&gk, &xk)| if xk > T::zero() && xk < six { gk } else { T::zero() })
                                .collect()
                        }
                        UnaryKind::Clamp { lo, hi } => pass(T::of(lo), T::of(hi)),
                        UnaryKind::Affine { scale, .. } => {
                            let scale = T::of(scale);
                            g.iter().map(|&gk| gk * scale).collect()
                        }
                    };
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::Reduce {
                kind,
                a,
                out_index,
                count,
                argmax,
            } => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let da = match kind {
                        ReduceKind::Sum => out_index.iter().map(|&o| g[o]).collect(),
                        ReduceKind::Mean => {
                            let c = T::of(*count as f64);
                            out_index.iter().map(|&o| g[o] / c).collect()
                        }
                        ReduceKind::Max => {
                            let mut da = vec![T::zero(); n];
                            for (o, &i) in argmax.iter().enumerate() {
                                da[i] += g[o];
                            }
                            da
                        }
                    };
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::Reshape { a } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let need_b = b.is_some_and(|b| self.wants(b));
                let cg = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    spec,
                    g,
                    (self.wants(*x), self.wants(*w), need_b),
                )?;
                if let Some(dx) = cg.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = cg.dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                act,
                mean,
                inv_std,
            } => {
                let masked;
                let g = match act {
                    Activation::None => g,
                    Activation::Relu6 => {
                        // the clamp passes gradient exactly where its output is strictly inside
                        let six = T::of(6.0);
                        masked = g
                            .iter()
                            .zip(out.data())
                            .map(|(&gk, &y)| if y > T::zero() && y < six { gk } else { T::zero() })
                            .collect::<Vec<T>>();
                        &masked[..]
                    }
                };
                let bg = batch_norm_backward(self.value(*x), self.value(*gamma).data(), mean, inv_std, g)?;
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], bg.dx);
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], bg.dgamma);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], bg.dbeta);
                }
            }
            Op::RoiAlign { features, plan } => {
                if self.wants(*features) {
                    accumulate(&mut grads[features.0], plan.backward(g));
                }
            }
            Op::SoftArgmax { logits, norm } => {
                if self.wants(*logits) {
                    let z = self.value(*logits);
                    let (h, w) = (z.shape()[2], z.shape()[3]);
                    let plane = h * w;
                    let mut dz = vec![T::zero(); z.len()];
                    for k in 0..z.len() / plane {
                        heatmap::soft_argmax_one_backward(
                            &z.data()[k * plane..][..plane],
                            h,
                            w,
                            *norm,
                            [g[2 * k], g[2 * k + 1]],
                            &mut dz[k * plane..][..plane],
                        )?;
                    }
                    accumulate(&mut grads[logits.0], dz);
                }
            }
            Op::HeatmapLoss { logits, target, coords } => {
                if self.wants(*logits) {
                    let dz = heatmap::heatmap_loss_backward(self.value(*logits), target, coords, g[0])?;
                    accumulate(&mut grads[logits.0], dz);
                }
            }
            Op::L2Coord { pred, target } => {
                if self.wants(*pred) {
                    let p = self.value(*pred);
                    let scale = T::of(2.0) * g[0] / T::of((p.len() / 2).max(1) as f64);
                    let dp = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * scale).collect();
                    accumulate(&mut grads[pred.0], dp);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Binary(BinaryKind),
    Unary(UnaryKind),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_fixtures() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let x = tape.constant(t(&[1], &[7.2]));
        let r = tape.relu6(x).unwrap();
        assert_eq!(tape.value(r).data(), &[6.0]);
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.elementwise(ElementwiseKind::Binary(BinaryKind::Add), a, Some(b)).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcast_add_and_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let d = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(matches!(tape.add(a, d), Err(Error::Shape(_))));
    }

    #[test]
    fn log_and_div_surface_non_finite() {
        let mut tape = Tape::<f64>::new();
        let neg = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(tape.log(neg), Err(Error::NonFinite(_))));
        let zero = tape.constant(t(&[1], &[0.0]));
        assert!(tape.log(zero).unwrap().index() > 0);
        let one = tape.constant(t(&[1], &[1.0]));
        assert!(matches!(tape.div(one, zero), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum_all(a).unwrap();
        assert_eq!(tape.value(s).data(), &[10.0]);
        let m = tape.reduce(ReduceKind::Mean, a, &[0]).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
        let mx = tape.reduce(ReduceKind::Max, a, &[1]).unwrap();
        assert_eq!(tape.value(mx).data(), &[2.0, 4.0]);
        let empty = tape.constant(Tensor::zeros([0, 3]));
        let es = tape.reduce(ReduceKind::Sum, empty, &[0]).unwrap();
        assert_eq!(tape.value(es).data(), &[0.0, 0.0, 0.0]);
        assert!(matches!(
            tape.reduce(ReduceKind::Sum, a, &[2]),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn analytic_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[0.0]));
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.25]);
    }

    #[test]
    fn unreached_params_report_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.sum_all(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reuse_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[2.5]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }
}
