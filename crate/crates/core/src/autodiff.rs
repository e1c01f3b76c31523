//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its vector-Jacobian product. [`Graph::backward`] walks the tape in
//! reverse from a scalar loss.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{EdmError, Result};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::ops::layout;
use crate::ops::matmul::{bmm, bmm_backward, linear, linear_backward};
use crate::ops::norm::{self, NormSaved};
use crate::ops::rope::{rope2d, rope2d_backward, RopeTables};
use crate::ops::softmax;
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{lit, Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Powf(Var, T),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    L2Normalize(Var, usize, T, Vec<T>),
    Bmm(Var, Var, bool, bool),
    Linear(Var, Var, Option<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm(Var, Var, Var, NormSaved<T>),
    LayerNorm(Var, Var, Var, NormSaved<T>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Upsample2x(Var),
    Rope(Var, Arc<RopeTables<T>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], retained for leaf nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// A graph that records everything needed for backward.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that keeps only forward values.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input whose gradient is wanted.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter into the graph (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).value.clone());
        self.params.insert(id, v);
        v
    }

    pub fn buffer(&mut self, store: &ParamStore<T>, id: BufferId) -> Var {
        self.constant(store.buffer(id).clone())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(EdmError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.value(a).zip_map(self.value(b), f);
        out.ensure_finite(op)?;
        Ok(self.push(out, node, &[a, b]))
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(T) -> T, node: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        out.ensure_finite(op)?;
        Ok(self.push(out, node, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c: T = lit(c);
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c: T = lit(c);
        self.unary("mul_scalar", a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, T::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, T::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, T::abs, Op::Abs(a))
    }

    pub fn powf(&mut self, a: Var, e: f64) -> Result<Var> {
        let e: T = lit(e);
        self.unary("powf", a, |x| x.powf(e), Op::Powf(a, e))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi): (T, T) = (lit(lo), lit(hi));
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(EdmError::invalid("mean", "empty tensor"));
        }
        let s = self.value(a).sum() / lit(n as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = softmax::split_axis(x.shape(), axis, "sum_axis")?;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * n + k) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::SumAxis(a, axis), &[a]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = softmax::softmax(self.value(a), axis)?;
        Ok(self.push(y, Op::Softmax(a, axis), &[a]))
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let eps: T = lit(eps);
        let (y, norms) = softmax::l2_normalize(self.value(a), axis, eps)?;
        Ok(self.push(y, Op::L2Normalize(a, axis, eps, norms), &[a]))
    }

    /// `op(a) · op(b)` with optional transposition of the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let y = bmm(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(y, Op::Bmm(a, b, ta, tb), &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear(x, w, b), &inputs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (y, geom) = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding, groups)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Batch normalization. In training mode the running statistics in
    /// `store` are updated with `momentum` (unbiased variance); in eval mode
    /// they are used for normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &mut ParamStore<T>,
        running: (BufferId, BufferId),
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (rm, rv) = running;
        let stats = if training {
            None
        } else {
            Some((store.buffer(rm).data(), store.buffer(rv).data()))
        };
        let (y, saved, batch) =
            norm::batchnorm2d_forward(self.value(x), self.value(gamma), self.value(beta), stats, eps)?;
        if let Some((mean, var, count)) = batch {
            let m: T = lit(momentum);
            let unbias: T = if count > 1 { lit(count as f64 / (count - 1) as f64) } else { T::one() };
            for (r, mu) in store.buffer_mut(rm).data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * *mu;
            }
            for (r, v) in store.buffer_mut(rv).data_mut().iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * *v * unbias;
            }
        }
        Ok(self.push(y, Op::BatchNorm(x, gamma, beta, saved), &[x, gamma, beta]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, saved) = norm::layernorm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm(x, gamma, beta, saved), &[x, gamma, beta]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(y, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let y = layout::permute(self.value(a), axes)?;
        Ok(self.push(y, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = layout::concat(&ts, axis)?;
        Ok(self.push(y, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = layout::narrow(self.value(a), axis, start, len)?;
        Ok(self.push(y, Op::Narrow(a, axis, start), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let y = layout::gather_rows(self.value(a), indices)?;
        Ok(self.push(y, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let y = layout::upsample2x(self.value(a))?;
        Ok(self.push(y, Op::Upsample2x(a), &[a]))
    }

    pub fn rope2d(&mut self, a: Var, tables: Arc<RopeTables<T>>) -> Result<Var> {
        let y = rope2d(self.value(a), &tables)?;
        Ok(self.push(y, Op::Rope(a, tables), &[a]))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(EdmError::invalid("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, dg) in self.vjp(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, g.zip_map(val(*b), |d, x| d * x)), (*b, g.zip_map(val(*a), |d, x| d * x))],
            Op::Div(a, b) => {
                let db = g.zip_map(y, |d, q| d * q).zip_map(val(*b), |dq, bv| -dq / bv);
                vec![(*a, g.zip_map(val(*b), |d, bv| d / bv)), (*b, db)]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, c) => vec![(*a, g.map(|d| d * *c))],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |d, e| d * e))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |d, x| d / x))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |d, s| d * s * (T::one() - s)))],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |d, x| if x > T::zero() { d } else { T::zero() }))],
            Op::Tanh(a) => vec![(*a, g.zip_map(y, |d, t| d * (T::one() - t * t)))],
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |d, x| d * x.signum()))],
            Op::Powf(a, e) => vec![(*a, g.zip_map(val(*a), |d, x| d * *e * x.powf(*e - T::one())))],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                g.zip_map(val(*a), |d, x| if x >= *lo && x <= *hi { d } else { T::zero() }),
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n: T = lit(val(*a).numel() as f64);
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::SumAxis(a, axis) => {
                let shape = val(*a).shape();
                let (outer, n, inner) = softmax::split_axis(shape, *axis, "sum_axis").expect("validated");
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![(*a, Tensor::new(shape, dx).expect("shape"))]
            }
            Op::Softmax(a, axis) => vec![(*a, softmax::softmax_backward(y, g, *axis))],
            Op::L2Normalize(a, axis, eps, norms) => {
                vec![(*a, softmax::l2_normalize_backward(y, norms, g, *axis, *eps))]
            }
            Op::Bmm(a, b, ta, tb) => {
                let (da, db) = bmm_backward(val(*a), val(*b), g, *ta, *tb);
                vec![(*a, da), (*b, db)]
            }
            Op::Linear(x, w, b) => {
                let (dx, dw, db) = linear_backward(val(*x), val(*w), g);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    g,
                    (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))),
                );
                let mut out = Vec::new();
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm(x, gamma, beta, saved) => {
                let (dx, dg, db) = norm::batchnorm2d_backward(saved, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::LayerNorm(x, gamma, beta, saved) => {
                let (dx, dg, db) = norm::layernorm_backward(saved, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape()).expect("same numel"))],
            Op::Permute(a, axes) => vec![(
                *a,
                layout::permute(g, &layout::inverse_permutation(axes)).expect("valid permutation"),
            )],
            Op::Concat(xs, axis) => {
                let mut start = 0;
                xs.iter()
                    .map(|&v| {
                        let len = val(v).dim(*axis);
                        let part = layout::narrow(g, *axis, start, len).expect("in range");
                        start += len;
                        (v, part)
                    })
                    .collect()
            }
            Op::Narrow(a, axis, start) => vec![(*a, layout::narrow_backward(val(*a).shape(), g, *axis, *start))],
            Op::GatherRows(a, idx) => vec![(*a, layout::gather_rows_backward(val(*a).shape(), idx, g))],
            Op::Upsample2x(a) => vec![(*a, layout::upsample2x_backward(val(*a).shape(), g))],
            Op::Rope(a, tables) => vec![(*a, rope2d_backward(g, tables))],
        }
    }
}

impl<T: Element> ParamStore<T> {
    /// Adds the gradients of every parameter bound in `graph` into the
    /// store's gradient buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (&id, &var) in &graph.params {
            if let Some(g) = grads.get(var) {
                self.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
