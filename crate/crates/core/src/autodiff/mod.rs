//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores its value and
//! the operation that produced it; [`Tape::backward`] walks the list once in
//! reverse, accumulating adjoints into every input that needs a gradient.

pub mod kernels;

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable operation.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradients for each input, or `None` if the operation has no adjoint.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Option<Vec<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    L1(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Softmax(Var, usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize },
    GridSample(Var, Var),
    UpsampleNearest2(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | L1(a, b) | GridSample(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Scale(x, _)
            | AddScalar(x)
            | Exp(x)
            | Sin(x)
            | Cos(x)
            | Sqrt(x)
            | Abs(x)
            | Relu(x)
            | Sigmoid(x)
            | Sum(x)
            | Mean(x)
            | SumAxis(x)
            | Reshape(x)
            | Permute(x, _)
            | BroadcastTo(x)
            | Softmax(x, _)
            | UpsampleNearest2(x)
            | AvgPool2(x)
            | GlobalAvgPool(x) => vec![*x],
            Narrow { x, .. } => vec![*x],
            Concat(xs, _) | Custom(xs, _) => xs.clone(),
            Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Leaf | Op::Param)
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward computation for later differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::ForeignVar { var: v.0, len: self.nodes.len() })
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // -- leaves -------------------------------------------------------------

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A grad-flagged input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// The tape's single leaf for parameter `id`; repeated calls return the
    /// same variable so every consumer shares one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Value-identical copy that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.0].value.clone();
        Ok(self.constant(value))
    }

    // -- elementwise ----------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = kernels::broadcast_zip(self.value(a), self.value(b), f)?;
        self.push(v, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(f);
        self.push(v, op, name)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::ONE)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sin", |v| v.sin(), Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "cos", |v| v.cos(), Op::Cos(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.value(x).data().iter().any(|&v| v < T::ZERO) {
            return Err(invalid("sqrt", "negative input"));
        }
        self.unary(x, "sqrt", |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", |v| v.abs(), Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(T::ZERO), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", |v| T::ONE / (T::ONE + (-v).exp()), Op::Sigmoid(x))
    }

    // -- reductions -----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::from_usize(t.numel()));
        self.push(v, Op::Mean(x), "mean")
    }

    /// Sum over `axis`, keeping it as a size-1 axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let v = kernels::sum_axis(self.value(x), axis)?;
        self.push(v, Op::SumAxis(x), "sum_axis")
    }

    /// Mean absolute difference of two equally shaped tensors.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("l1", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let v = Tensor::scalar(s / T::from_usize(ta.numel()));
        self.push(v, Op::L1(a, b), "l1")
    }

    // -- layout ---------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = kernels::permute(self.value(x), perm)?;
        self.push(v, Op::Permute(x, perm.to_vec()), "permute")
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = kernels::broadcast_to(self.value(x), shape)?;
        self.push(v, Op::BroadcastTo(x), "broadcast_to")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        for &x in xs {
            self.check(x)?;
        }
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let v = kernels::concat(&vals, axis)?;
        self.push(v, Op::Concat(xs.to_vec(), axis), "concat")
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let v = kernels::narrow(self.value(x), axis, start, len)?;
        self.push(v, Op::Narrow { x, axis, start }, "narrow")
    }

    /// Consecutive pieces of the given sizes along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check(x)?;
        let shape = self.shape(x);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(invalid("split", format!("sizes {sizes:?} on axis {axis} of {shape:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    // -- structured -----------------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let v = kernels::softmax(self.value(x), axis)?;
        self.push(v, Op::Softmax(x, axis), "softmax")
    }

    /// `op(a) * op(b)` for rank-2 operands, equal-batch rank-3 operands, or a
    /// rank-3 `a` against a shared rank-2 `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = kernels::matmul(self.value(a), self.value(b), ta, tb)?;
        self.push(v, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D convolution with zero padding. `w` is `[C_out, C_in, k, k]` or a
    /// per-batch `[B, C_out, C_in, k, k]`; a batch-1 input is broadcast.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let v = kernels::conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), stride, padding)?;
        self.push(v, Op::Conv2d { x, w, bias, stride, padding }, "conv2d")
    }

    /// Bilinear sampling of `x` at normalized coordinates `grid: [B, H', W', 2]`.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        self.check(x)?;
        self.check(grid)?;
        let v = kernels::grid_sample(self.value(x), self.value(grid))?;
        self.push(v, Op::GridSample(x, grid), "grid_sample")
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = kernels::upsample_nearest2(self.value(x))?;
        self.push(v, Op::UpsampleNearest2(x), "upsample_nearest2")
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = kernels::avg_pool2(self.value(x))?;
        self.push(v, Op::AvgPool2(x), "avg_pool2")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = kernels::global_avg_pool(self.value(x))?;
        self.push(v, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var> {
        for &x in inputs {
            self.check(x)?;
        }
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&x| self.value(x)).collect();
        let v = op.forward(&vals)?;
        self.push(v, Op::Custom(inputs.to_vec(), op), "custom")
    }

    // -- reverse sweep --------------------------------------------------------

    /// Differentiates the scalar `loss` with respect to every grad-flagged
    /// node. The tape is left untouched, so the sweep can be repeated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::ONE));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(Error::CyclicTape { node: i, input: inp.0 });
                }
            }
            if node.op.is_leaf() {
                grads[i] = Some(g);
                continue;
            }
            for (inp, gi) in self.adjoint(i, &g)? {
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its inputs given its adjoint `g`.
    fn adjoint(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        use kernels::*;
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                out.push((*a, reduce_to(g, val(*a).shape())));
                out.push((*b, reduce_to(g, val(*b).shape())));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce_to(g, val(*a).shape())));
                out.push((*b, reduce_to(&g.map(|v| -v), val(*b).shape())));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = broadcast_zip(g, val(*b), |x, y| x * y)?;
                    out.push((*a, reduce_to(&ga, val(*a).shape())));
                }
                if self.needs(*b) {
                    let gb = broadcast_zip(g, val(*a), |x, y| x * y)?;
                    out.push((*b, reduce_to(&gb, val(*b).shape())));
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    let ga = broadcast_zip(g, val(*b), |x, y| x / y)?;
                    out.push((*a, reduce_to(&ga, val(*a).shape())));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -y / b
                    let q = broadcast_zip(y, val(*b), |x, y| x / y)?;
                    let gb = g.zip_map(&q, |x, y| -x * y)?;
                    out.push((*b, reduce_to(&gb, val(*b).shape())));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Exp(x) => out.push((*x, g.zip_map(y, |a, b| a * b)?)),
            Op::Sin(x) => out.push((*x, g.zip_map(val(*x), |a, v| a * v.cos())?)),
            Op::Cos(x) => out.push((*x, g.zip_map(val(*x), |a, v| -a * v.sin())?)),
            Op::Sqrt(x) => {
                let half = T::from_f64(0.5);
                out.push((*x, g.zip_map(y, |a, b| a * half / b)?));
            }
            Op::Abs(x) => {
                let s = val(*x).map(sign);
                out.push((*x, g.zip_map(&s, |a, b| a * b)?));
            }
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), |a, v| if v > T::ZERO { a } else { T::ZERO })?;
                out.push((*x, gx));
            }
            Op::Sigmoid(x) => out.push((*x, g.zip_map(y, |a, s| a * s * (T::ONE - s))?)),
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Mean(x) => {
                let n = T::from_usize(val(*x).numel());
                out.push((*x, Tensor::full(val(*x).shape(), g.item() / n)));
            }
            Op::SumAxis(x) => out.push((*x, broadcast_to(g, val(*x).shape())?)),
            Op::L1(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let scale = g.item() / T::from_usize(ta.numel());
                let ga = ta.zip_map(tb, |p, q| sign(p - q) * scale)?;
                if self.needs(*b) {
                    out.push((*b, ga.map(|v| -v)));
                }
                out.push((*a, ga));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape())?)),
            Op::Permute(x, perm) => out.push((*x, permute(g, &inverse_perm(perm))?)),
            Op::BroadcastTo(x) => out.push((*x, reduce_to(g, val(*x).shape()))),
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    if self.needs(x) {
                        out.push((x, narrow(g, *axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                out.push((*x, narrow_backward(g, val(*x).shape(), *axis, *start)));
            }
            Op::Softmax(x, axis) => out.push((*x, softmax_backward(y, g, *axis))),
            Op::MatMul { a, b, ta, tb } => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), *ta, *tb, g);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Conv2d { x, w, bias, stride, padding } => {
                let (gx, gw, gb) = conv2d_backward(
                    val(*x),
                    val(*w),
                    bias.is_some(),
                    *stride,
                    *padding,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    out.push((*b, gb));
                }
            }
            Op::GridSample(x, grid) => {
                let (gx, gg) = grid_sample_backward(val(*x), val(*grid), g, self.needs(*x), self.needs(*grid));
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gg) = gg {
                    out.push((*grid, gg));
                }
            }
            Op::UpsampleNearest2(x) => out.push((*x, upsample_nearest2_backward(g))),
            Op::AvgPool2(x) => out.push((*x, avg_pool2_backward(g))),
            Op::GlobalAvgPool(x) => out.push((*x, global_avg_pool_backward(g, val(*x).shape()))),
            Op::Custom(xs, op) => {
                let vals: Vec<&Tensor<T>> = xs.iter().map(|&x| val(x)).collect();
                let grads =
                    op.backward(&vals, y, g).ok_or_else(|| Error::MissingAdjoint { op: op.name().to_string() })?;
                if grads.len() != xs.len() {
                    return Err(Error::MissingAdjoint { op: op.name().to_string() });
                }
                for (&x, gx) in xs.iter().zip(grads) {
                    if gx.shape() != val(x).shape() {
                        return Err(shape_err("custom adjoint", format!("{} gradient shape", op.name())));
                    }
                    out.push((x, gx));
                }
            }
        }
        Ok(out)
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::ZERO {
        T::ONE
    } else if v < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, with zeros for leaves the loss does not depend on.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Collects parameter gradients in [`ParamId`] order.
    pub fn params(&self, tape: &Tape<T>, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for (i, slot) in tape.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                grads[i] = self.get(*v).cloned();
            }
        }
        ParamGrads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape, f)
    }

    #[test]
    fn sum_gives_ones_and_square_gives_twice_input() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], |i| i as f64 - 2.5));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(&tape, x).data().iter().all(|&v| v == 1.0));

        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq).unwrap();
        let g = tape.backward(s2).unwrap();
        let want = tape.value(x).map(|v| 2.0 * v);
        assert_eq!(g.wrt(&tape, x), want);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], |i| i as f64 + 1.0));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(&tape, x).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn unused_leaves_get_zero() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], |_| 1.0));
        let y = tape.input(t(&[4], |_| 1.0));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(&tape, y), Tensor::zeros(&[4]));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[4], |i| i as f64));
        let y = tape.input(t(&[4], |i| i as f64 * 2.0 + 1.0));
        let dx = tape.detach(x).unwrap();
        let l = tape.l1(y, dx).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(&tape, x), Tensor::zeros(&[4]));
        assert!(g.wrt(&tape, y).data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn detach_matches_constant_copy() {
        let xv = t(&[5], |i| (i as f64).cos());
        let cv = xv.map(|v| v + 0.3);
        let run = |use_detach: bool| {
            let mut tape = Tape::new();
            let x = tape.input(xv.clone());
            let c = if use_detach {
                let s = tape.add_scalar(x, 0.3).unwrap();
                tape.detach(s).unwrap()
            } else {
                tape.constant(cv.clone())
            };
            let l = tape.l1(c, x).unwrap();
            tape.backward(l).unwrap().wrt(&tape, x)
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], |_| 1.0));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let mut other = Tape::<f64>::new();
        for _ in 0..5 {
            other.constant(Tensor::scalar(1.0));
        }
        let stray = other.constant(Tensor::scalar(2.0));
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(1.0));
        assert!(matches!(tape.add(x, stray), Err(Error::ForeignVar { .. })));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[2], |_| 0.0));
        let y = tape.input(t(&[2], |_| 0.0));
        assert!(matches!(tape.div(x, y), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn replayed_backward_is_identical() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 4], |i| (i as f64 * 0.7).sin()));
        let s = tape.softmax(x, 1).unwrap();
        let e = tape.exp(s).unwrap();
        let l = tape.sum(e).unwrap();
        let g1 = tape.backward(l).unwrap().wrt(&tape, x);
        let g2 = tape.backward(l).unwrap().wrt(&tape, x);
        assert_eq!(g1, g2);
    }

    struct NoAdjoint;
    impl CustomOp<f64> for NoAdjoint {
        fn name(&self) -> &str {
            "no_adjoint"
        }
        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].clone())
        }
        fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, _: &Tensor<f64>) -> Option<Vec<Tensor<f64>>> {
            None
        }
    }

    #[test]
    fn missing_adjoint_is_reported() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], |_| 1.0));
        let y = tape.custom(&[x], Box::new(NoAdjoint)).unwrap();
        let l = tape.sum(y).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::MissingAdjoint { .. })));
    }

    #[test]
    fn params_share_one_node() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], |_| 1.5)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p).unwrap();
        let grads = tape.backward(l).unwrap().params(&tape, &store);
        assert_eq!(grads.get(id).unwrap().data(), &[3.0, 3.0]);
    }
}
