//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to [`Var`]s. [`Tape::backward`]
//! walks the tape in reverse. With `create_graph = true` the backward pass
//! is itself recorded, so gradients can be differentiated again; this is
//! what the gradient-penalty critic loss needs. Only ops whose vector-Jacobian
//! product is expressed through other recorded ops support that second pass
//! (linear maps, convolutions, piecewise-linear activations, reductions);
//! smooth nonlinearities are first-order only and panic if asked for more.
//!
//! Leaves created with [`Tape::param`] receive gradients; [`Tape::constant`]
//! leaves never do, which is how frozen networks are evaluated.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::kernels::{self, ConvGeom, RoiPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    /// Piecewise-linear map: the local slope is constant almost everywhere.
    Piecewise(usize, Rc<Tensor<T>>),
    /// Smooth elementwise map with a precomputed derivative (first order only).
    Smooth(usize, Rc<Tensor<T>>, &'static str),
    Sum(usize),
    BroadcastScalar(usize),
    SumTrailing(usize),
    BroadcastTrailing(usize),
    ChannelSum(usize),
    ChannelBroadcast(usize),
    Reshape(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Conv { x: usize, w: usize, g: ConvGeom },
    ConvInputGrad { gy: usize, w: usize, g: ConvGeom },
    ConvWeightGrad { x: usize, gy: usize, g: ConvGeom },
    Upsample2(usize),
    SumPool2(usize),
    Roi(usize, Rc<RoiPlan<T>>),
    RoiAdjoint(usize, Rc<RoiPlan<T>>),
    Gather(usize, Rc<Vec<usize>>),
    ScatterAdd(usize, Rc<Vec<usize>>),
    LogSoftmaxRows(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of a backward pass: one optional gradient per tape node.
pub struct Gradients<'t, T: Scalar> {
    tape: &'t Tape<T>,
    grads: Vec<Option<usize>>,
}

impl<'t, T: Scalar> Gradients<'t, T> {
    pub fn var(&self, v: Var<'t, T>) -> Option<Var<'t, T>> {
        self.grads
            .get(v.id)
            .copied()
            .flatten()
            .map(|id| Var { tape: self.tape, id })
    }

    pub fn tensor(&self, v: Var<'t, T>) -> Option<Tensor<T>> {
        self.var(v).map(|g| (*g.value()).clone())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Rc<Tensor<T>>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.recording.get() && parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Reverse pass from a single-element `root`.
    ///
    /// With `create_graph` the gradient computation is recorded and the
    /// returned gradients can themselves be differentiated.
    pub fn backward<'t>(&'t self, root: Var<'t, T>, create_graph: bool) -> Gradients<'t, T> {
        assert_eq!(root.value().len(), 1, "backward root must be a scalar");
        let n = root.id + 1;
        let mut grads: Vec<Option<usize>> = vec![None; n];
        if !self.needs(root.id) {
            return Gradients { tape: self, grads };
        }
        let prev = self.recording.replace(create_graph);
        let seed = self.constant(Tensor::full(root.value().shape(), T::one()));
        grads[root.id] = Some(seed.id);
        for id in (0..n).rev() {
            let Some(gid) = grads[id] else { continue };
            let (op, needs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].needs_grad)
            };
            if !needs || matches!(op, Op::Leaf) {
                continue;
            }
            let g = self.var(gid);
            for (parent, contrib) in self.vjp(id, &op, g, create_graph) {
                grads[parent] = Some(match grads[parent] {
                    None => contrib.id,
                    Some(prev) => self.var(prev).add(contrib).id,
                });
            }
        }
        self.recording.set(prev);
        Gradients { tape: self, grads }
    }

    fn vjp<'t>(
        &'t self,
        id: usize,
        op: &Op<T>,
        g: Var<'t, T>,
        create_graph: bool,
    ) -> Vec<(usize, Var<'t, T>)> {
        let mut out = Vec::with_capacity(2);
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'t, T>| {
            if self.needs(p) {
                out.push((p, f()));
            }
        };
        let first_order_only = |x: usize, name: &str| {
            assert!(
                !(create_graph && self.needs(x)),
                "second-order gradient through `{name}` is not supported"
            );
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                emit(a, &|| g.mul(self.var(b)));
                emit(b, &|| g.mul(self.var(a)));
            }
            Op::Scale(a, s) => emit(a, &|| g.scale_t(s)),
            Op::AddScalar(a) => emit(a, &|| g),
            Op::Piecewise(a, ref slope) => {
                emit(a, &|| g.mul(self.constant_rc(slope.clone())));
            }
            Op::Smooth(a, ref deriv, name) => {
                first_order_only(a, name);
                emit(a, &|| g.mul(self.constant_rc(deriv.clone())));
            }
            Op::Sum(a) => {
                let shape = self.value_of(a).shape().to_vec();
                emit(a, &|| g.broadcast_scalar(&shape));
            }
            Op::BroadcastScalar(a) => emit(a, &|| g.sum()),
            Op::SumTrailing(a) => {
                let shape = self.value_of(a).shape().to_vec();
                emit(a, &|| g.broadcast_trailing(&shape));
            }
            Op::BroadcastTrailing(a) => emit(a, &|| g.sum_trailing()),
            Op::ChannelSum(a) => {
                let shape = self.value_of(a).shape().to_vec();
                emit(a, &|| g.channel_broadcast(&shape));
            }
            Op::ChannelBroadcast(a) => emit(a, &|| g.channel_sum()),
            Op::Reshape(a) => {
                let shape = self.value_of(a).shape().to_vec();
                emit(a, &|| g.reshape(&shape));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.var(a), self.var(b));
                emit(a, &|| {
                    if ta {
                        vb.matmul(g, tb, true)
                    } else {
                        g.matmul(vb, false, !tb)
                    }
                });
                emit(b, &|| {
                    if tb {
                        g.matmul(va, true, ta)
                    } else {
                        va.matmul(g, !ta, false)
                    }
                });
            }
            Op::Conv { x, w, g: geom } => {
                emit(x, &|| g.conv2d_input_grad(self.var(w), geom));
                emit(w, &|| self.var(x).conv2d_weight_grad(g, geom));
            }
            Op::ConvInputGrad { gy, w, g: geom } => {
                // y = C^T(gy, w); cotangent g lives in input space.
                emit(gy, &|| g.conv2d(self.var(w), geom));
                emit(w, &|| g.conv2d_weight_grad(self.var(gy), geom));
            }
            Op::ConvWeightGrad { x, gy, g: geom } => {
                // y = Cw(x, gy); cotangent g lives in weight space.
                emit(x, &|| self.var(gy).conv2d_input_grad(g, geom));
                emit(gy, &|| self.var(x).conv2d(g, geom));
            }
            Op::Upsample2(a) => emit(a, &|| g.sum_pool2()),
            Op::SumPool2(a) => emit(a, &|| g.upsample2()),
            Op::Roi(a, ref plan) => emit(a, &|| g.roi_adjoint(plan.clone())),
            Op::RoiAdjoint(a, ref plan) => emit(a, &|| g.roi_pool(plan.clone())),
            Op::Gather(a, ref idx) => {
                let shape = self.value_of(a).shape().to_vec();
                emit(a, &|| g.scatter_add(idx.clone(), &shape));
            }
            Op::ScatterAdd(a, ref idx) => emit(a, &|| g.gather(idx.clone())),
            Op::LogSoftmaxRows(a) => {
                first_order_only(a, "log_softmax");
                // dx = g - softmax * rowsum(g)
                let y = self.value_of(id);
                let gv = g.value();
                let cols = y.shape()[1];
                let mut dx = (*gv).clone();
                for (row_y, row_d) in y.data().chunks(cols).zip(dx.data_mut().chunks_mut(cols)) {
                    let s: T = row_d.iter().copied().sum();
                    for (d, &ly) in row_d.iter_mut().zip(row_y) {
                        *d -= ly.exp() * s;
                    }
                }
                emit(a, &|| self.constant(dx.clone()));
            }
        }
        out
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Self {
        self.tape.push(value, op, &[self.id])
    }

    fn binary(self, other: Self, value: Tensor<T>, op: Op<T>) -> Self {
        self.tape.push(value, op, &[self.id, other.id])
    }

    /// A copy of this value that gradients do not flow through.
    pub fn detach(self) -> Self {
        self.tape.constant_rc(self.value())
    }

    pub fn add(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Self {
        self.mul(self)
    }

    pub fn scale(self, s: f64) -> Self {
        self.scale_t(T::lit(s))
    }

    pub fn scale_t(self, s: T) -> Self {
        let v = self.value().map(|a| a * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Self {
        let s = T::lit(s);
        let v = self.value().map(|a| a + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let slope = T::lit(slope);
        let x = self.value();
        let v = x.map(|a| if a > T::zero() { a } else { a * slope });
        let d = x.map(|a| if a > T::zero() { T::one() } else { slope });
        self.unary(v, Op::Piecewise(self.id, Rc::new(d)))
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(0.0)
    }

    pub fn abs(self) -> Self {
        let x = self.value();
        let v = x.map(|a| a.abs());
        let d = x.map(|a| {
            if a > T::zero() {
                T::one()
            } else if a < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        self.unary(v, Op::Piecewise(self.id, Rc::new(d)))
    }

    /// Square root; the derivative at 0 is taken against a tiny floor.
    pub fn sqrt(self) -> Self {
        let x = self.value();
        let v = x.map(|a| a.max(T::zero()).sqrt());
        let floor = T::lit(1e-12);
        let d = v.map(|r| T::lit(0.5) / r.max(floor));
        self.unary(v, Op::Smooth(self.id, Rc::new(d), "sqrt"))
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(|a| a.exp());
        let d = v.clone();
        self.unary(v, Op::Smooth(self.id, Rc::new(d), "exp"))
    }

    pub fn ln(self) -> Self {
        let x = self.value();
        let v = x.map(|a| a.ln());
        let d = x.map(|a| a.recip());
        self.unary(v, Op::Smooth(self.id, Rc::new(d), "ln"))
    }

    pub fn sigmoid(self) -> Self {
        let v = self.value().map(sigmoid);
        let d = v.map(|s| s * (T::one() - s));
        self.unary(v, Op::Smooth(self.id, Rc::new(d), "sigmoid"))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Self {
        let x = self.value();
        let v = x.map(softplus);
        let d = x.map(sigmoid);
        self.unary(v, Op::Smooth(self.id, Rc::new(d), "softplus"))
    }

    /// Elementwise Huber with unit transition: `0.5 x^2` inside `|x| < 1`.
    pub fn smooth_l1(self) -> Self {
        let x = self.value();
        let half = T::lit(0.5);
        let v = x.map(|a| {
            if a.abs() < T::one() {
                half * a * a
            } else {
                a.abs() - half
            }
        });
        let d = x.map(|a| a.max(-T::one()).min(T::one()));
        self.unary(v, Op::Smooth(self.id, Rc::new(d), "smooth_l1"))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn broadcast_scalar(self, shape: &[usize]) -> Self {
        let v = Tensor::full(shape, self.item());
        self.unary(v, Op::BroadcastScalar(self.id))
    }

    /// `[L, ..] -> [L]`.
    pub fn sum_trailing(self) -> Self {
        let v = kernels::sum_trailing(&self.value());
        self.unary(v, Op::SumTrailing(self.id))
    }

    /// `[L] -> shape`, with `shape[0] == L`.
    pub fn broadcast_trailing(self, shape: &[usize]) -> Self {
        let v = kernels::broadcast_trailing(&self.value(), shape);
        self.unary(v, Op::BroadcastTrailing(self.id))
    }

    /// `[N, C, ..] -> [C]`.
    pub fn channel_sum(self) -> Self {
        let v = kernels::channel_sum(&self.value());
        self.unary(v, Op::ChannelSum(self.id))
    }

    /// `[C] -> shape`, with `shape[1] == C`.
    pub fn channel_broadcast(self, shape: &[usize]) -> Self {
        let v = kernels::channel_broadcast(&self.value(), shape);
        self.unary(v, Op::ChannelBroadcast(self.id))
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ..]`.
    pub fn add_channel_bias(self, bias: Self) -> Self {
        let shape = self.shape();
        self.add(bias.channel_broadcast(&shape))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn matmul(self, other: Self, ta: bool, tb: bool) -> Self {
        let v = kernels::matmul(&self.value(), &other.value(), ta, tb);
        self.binary(
            other,
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    pub fn conv2d(self, w: Self, g: ConvGeom) -> Self {
        let v = kernels::conv2d(&self.value(), &w.value(), &g);
        self.binary(w, v, Op::Conv { x: self.id, w: w.id, g })
    }

    pub fn conv2d_input_grad(self, w: Self, g: ConvGeom) -> Self {
        let v = kernels::conv2d_input_grad(&self.value(), &w.value(), &g);
        self.binary(w, v, Op::ConvInputGrad { gy: self.id, w: w.id, g })
    }

    /// Called on the convolution input `x` with upstream gradient `gy`.
    pub fn conv2d_weight_grad(self, gy: Self, g: ConvGeom) -> Self {
        let v = kernels::conv2d_weight_grad(&self.value(), &gy.value(), &g);
        self.binary(gy, v, Op::ConvWeightGrad { x: self.id, gy: gy.id, g })
    }

    pub fn upsample2(self) -> Self {
        let v = kernels::upsample2(&self.value());
        self.unary(v, Op::Upsample2(self.id))
    }

    pub fn sum_pool2(self) -> Self {
        let v = kernels::sum_pool2(&self.value());
        self.unary(v, Op::SumPool2(self.id))
    }

    pub fn roi_pool(self, plan: Rc<RoiPlan<T>>) -> Self {
        let v = plan.forward(&self.value());
        self.unary(v, Op::Roi(self.id, plan))
    }

    pub fn roi_adjoint(self, plan: Rc<RoiPlan<T>>) -> Self {
        let v = plan.adjoint(&self.value());
        self.unary(v, Op::RoiAdjoint(self.id, plan))
    }

    /// Flat-index gather into a 1-D result.
    pub fn gather(self, idx: Rc<Vec<usize>>) -> Self {
        let v = kernels::gather(&self.value(), &idx);
        self.unary(v, Op::Gather(self.id, idx))
    }

    pub fn scatter_add(self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Self {
        let v = kernels::scatter_add(&self.value(), &idx, shape);
        self.unary(v, Op::ScatterAdd(self.id, idx))
    }

    /// Row-wise log-softmax of a `[R, C]` matrix.
    pub fn log_softmax_rows(self) -> Self {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "log_softmax_rows expects a matrix");
        let cols = x.shape()[1];
        let mut v = (*x).clone();
        for row in v.data_mut().chunks_mut(cols) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&r| (r - m).exp()).sum::<T>().ln();
            for r in row.iter_mut() {
                *r -= lse;
            }
        }
        self.unary(v, Op::LogSoftmaxRows(self.id))
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
