//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order, so the node list is already topologically sorted. A single
//! [`Tape::backward`] walks it in reverse and stores a gradient on every node
//! that requires one. A tape supports one backward pass; call [`Tape::reset`]
//! (or build a new tape) before recording the next step.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{MicoError, Result};
use crate::tensor::{matmul_raw, Tensor};

/// sqrt(2/pi), for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    Sum { input: usize, axis: usize },
    Mean { input: usize, axis: usize },
    Max { input: usize, axis: usize, argmax: Vec<usize> },
    SumAll(usize),
    RowNormalize { input: usize, norms: Vec<f64>, eps: f64 },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Elementwise operations, for callers that select one at runtime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Gelu,
    Relu,
    Exp,
    Log,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
    norm_clamps: Cell<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of rows whose norm was clamped by [`Var::row_normalize`].
    pub fn norm_clamps(&self) -> usize {
        self.norm_clamps.get()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.backward_done.set(false);
        self.norm_clamps.set(0);
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Populates the gradient of `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(MicoError::Autodiff("loss belongs to another tape".into()));
        }
        if self.backward_done.get() {
            return Err(MicoError::Autodiff(
                "backward already ran on this tape; reset before recording again".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(MicoError::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(MicoError::Autodiff(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (target, contrib) in local_grads(&nodes, id, &g) {
                if !nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let shape = node.value.shape().to_vec();
            nodes[id].grad = Some(Tensor::from_parts(shape, g));
        }
        Ok(())
    }
}

fn broadcast_back(g: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

/// Splits a shape around `axis` into (outer, n, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Gradient contributions of node `id` to each of its inputs, given the
/// gradient `g` flowing into its output.
fn local_grads(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let node = &nodes[id];
    let out = node.value.data();
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, broadcast_back(g, val(*a).len())),
            (*b, broadcast_back(g, val(*b).len())),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![
                (*a, broadcast_back(g, val(*a).len())),
                (*b, broadcast_back(&neg, val(*b).len())),
            ]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let da: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * pick(bv, i)).collect();
            let db: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * pick(av, i)).collect();
            vec![
                (*a, broadcast_back(&da, av.len())),
                (*b, broadcast_back(&db, bv.len())),
            ]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let da: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi / pick(bv, i)).collect();
            let db: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, gi)| {
                    let d = pick(bv, i);
                    -gi * pick(av, i) / (d * d)
                })
                .collect();
            vec![
                (*a, broadcast_back(&da, av.len())),
                (*b, broadcast_back(&db, bv.len())),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
        Op::Gelu(a) => unary(*a, g, val(*a), |x, _| gelu_grad(x), out),
        Op::Relu(a) => unary(*a, g, val(*a), |x, _| if x > 0.0 { 1.0 } else { 0.0 }, out),
        Op::Exp(a) => unary(*a, g, val(*a), |_, y| y, out),
        Op::Log(a) => unary(*a, g, val(*a), |x, _| 1.0 / x, out),
        Op::Tanh(a) => unary(*a, g, val(*a), |_, y| 1.0 - y * y, out),
        Op::Sigmoid(a) => unary(*a, g, val(*a), |_, y| y * (1.0 - y), out),
        Op::LogSigmoid(a) => unary(*a, g, val(*a), |x, _| sigmoid(-x), out),
        Op::MatMul(a, b) => {
            let (at, bt) = (&nodes[*a].value, &nodes[*b].value);
            let (p, q, r) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            let bt_t = bt.transpose();
            let at_t = at.transpose();
            vec![
                (*a, matmul_raw(g, bt_t.data(), p, r, q)),
                (*b, matmul_raw(at_t.data(), g, q, p, r)),
            ]
        }
        Op::Transpose(a) => {
            let shape = node.value.shape();
            let gt = Tensor::from_parts(shape.to_vec(), g.to_vec()).transpose();
            vec![(*a, gt.into_data())]
        }
        Op::AddRow(a, b) => {
            let n = val(*b).len();
            let mut db = vec![0.0; n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            vec![(*a, g.to_vec()), (*b, db)]
        }
        Op::Sum { input, axis } | Op::Mean { input, axis } => {
            let shape = nodes[*input].value.shape();
            let (outer, n, inner) = axis_extents(shape, *axis);
            let factor = if matches!(node.op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
            let mut d = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        d[(o * n + k) * inner + i] = g[o * inner + i] * factor;
                    }
                }
            }
            vec![(*input, d)]
        }
        Op::Max { input, axis, argmax } => {
            let shape = nodes[*input].value.shape();
            let (outer, n, inner) = axis_extents(shape, *axis);
            let mut d = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let k = argmax[o * inner + i];
                    d[(o * n + k) * inner + i] = g[o * inner + i];
                }
            }
            vec![(*input, d)]
        }
        Op::SumAll(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::RowNormalize { input, norms, eps } => {
            let x = val(*input);
            let cols = node.value.cols();
            let mut d = vec![0.0; x.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let span = r * cols..(r + 1) * cols;
                let (y, gr) = (&out[span.clone()], &g[span.clone()]);
                let dr = &mut d[span];
                if norm > *eps {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = (gr[j] - y[j] * dot) / norm;
                    }
                } else {
                    for j in 0..cols {
                        dr[j] = gr[j] / eps;
                    }
                }
            }
            vec![(*input, d)]
        }
        Op::SoftmaxRows(a) => {
            let cols = node.value.cols();
            let mut d = vec![0.0; g.len()];
            for ((y, gr), dr) in out.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    dr[j] = y[j] * (gr[j] - dot);
                }
            }
            vec![(*a, d)]
        }
        Op::LogSoftmaxRows(a) => {
            let cols = node.value.cols();
            let mut d = vec![0.0; g.len()];
            for ((y, gr), dr) in out.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                let total: f64 = gr.iter().sum();
                for j in 0..cols {
                    dr[j] = gr[j] - y[j].exp() * total;
                }
            }
            vec![(*a, d)]
        }
    }
}

fn pick(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn unary(
    input: usize,
    g: &[f64],
    x: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    y: &[f64],
) -> Vec<(usize, Vec<f64>)> {
    let d = g
        .iter()
        .zip(x.iter().zip(y))
        .map(|(gi, (&xi, &yi))| gi * deriv(xi, yi))
        .collect();
    vec![(input, d)]
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// Borrow the value without bumping the refcount.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Gradient stored by the last backward pass, if this node received one.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn unary_op(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            self.requires_grad(),
            op,
        )
    }

    fn binary_op(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = if a.shape() == b.shape() || b.numel() == 1 {
            a.shape().to_vec()
        } else if a.numel() == 1 {
            b.shape().to_vec()
        } else {
            return Err(MicoError::dim(name, a.shape(), b.shape()));
        };
        let n = a.numel().max(b.numel());
        let data = (0..n).map(|i| f(pick(a.data(), i), pick(b.data(), i))).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::from_parts(shape, data), rg, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.with_value(|t| t.data().contains(&0.0)) {
            return Err(MicoError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary_op(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary_op(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary_op(Op::Gelu(self.id), gelu)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary_op(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_op(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.with_value(|t| t.data().iter().any(|&x| x <= 0.0 || x.is_nan())) {
            return Err(MicoError::Domain {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        Ok(self.unary_op(Op::Log(self.id), f64::ln))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary_op(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_op(Op::Sigmoid(self.id), sigmoid)
    }

    /// `log(sigmoid(x))`, stable for large |x|.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.unary_op(Op::LogSigmoid(self.id), log_sigmoid)
    }

    pub fn elementwise(self, op: Elementwise, rhs: Option<Var<'t>>) -> Result<Var<'t>> {
        let need = |rhs: Option<Var<'t>>| {
            rhs.ok_or_else(|| MicoError::Config(format!("{op:?} needs a second operand")))
        };
        match op {
            Elementwise::Add => self.add(need(rhs)?),
            Elementwise::Sub => self.sub(need(rhs)?),
            Elementwise::Mul => self.mul(need(rhs)?),
            Elementwise::Div => self.div(need(rhs)?),
            Elementwise::Gelu => Ok(self.gelu()),
            Elementwise::Relu => Ok(self.relu()),
            Elementwise::Exp => Ok(self.exp()),
            Elementwise::Log => self.log(),
            Elementwise::Scale(c) => Ok(self.scale(c)),
        }
    }

    /// Stop-gradient: same value, no path back to `self`.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.push((*v).clone(), false, Op::Leaf)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, rg, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(MicoError::dim("transpose", v.shape(), &[]));
        }
        Ok(self.tape.push(v.transpose(), self.requires_grad(), Op::Transpose(self.id)))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        if a.rank() != 2 || b.numel() != a.cols() {
            return Err(MicoError::dim("add_row", a.shape(), b.shape()));
        }
        let n = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % n])
            .collect();
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            rg,
            Op::AddRow(self.id, bias.id),
        ))
    }

    pub fn reduce(self, op: Reduce, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(MicoError::Config(format!(
                "reduce axis {axis} out of range for shape {:?}",
                v.shape()
            )));
        }
        let (outer, n, inner) = axis_extents(v.shape(), axis);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let x = v.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| x[(o * n + k) * inner + i];
                let slot = o * inner + i;
                match op {
                    Reduce::Sum | Reduce::Mean => {
                        let s: f64 = (0..n).map(at).sum();
                        out[slot] = if op == Reduce::Mean { s / n as f64 } else { s };
                    }
                    Reduce::Max => {
                        let mut best = 0;
                        for k in 1..n {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        out[slot] = at(best);
                        argmax[slot] = best;
                    }
                }
            }
        }
        let rec = match op {
            Reduce::Sum => Op::Sum { input: self.id, axis },
            Reduce::Mean => Op::Mean { input: self.id, axis },
            Reduce::Max => Op::Max { input: self.id, axis, argmax },
        };
        Ok(self.tape.push(Tensor::from_parts(shape, out), self.requires_grad(), rec))
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Reduce::Sum, axis)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Reduce::Mean, axis)
    }

    pub fn max(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Reduce::Max, axis)
    }

    pub fn sum_all(self) -> Var<'t> {
        let s = self.with_value(|t| t.data().iter().sum());
        self.tape.push(Tensor::scalar(s), self.requires_grad(), Op::SumAll(self.id))
    }

    /// Divides each row of a matrix by its Euclidean norm, clamped below at
    /// `eps`. Clamped rows are counted on the tape.
    pub fn row_normalize(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(MicoError::dim("row_normalize", v.shape(), &[]));
        }
        let cols = v.cols();
        let mut norms = Vec::with_capacity(v.rows());
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= eps {
                self.tape.norm_clamps.set(self.tape.norm_clamps.get() + 1);
            }
            let denom = norm.max(eps);
            data.extend(row.iter().map(|x| x / denom));
            norms.push(norm);
        }
        Ok(self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            self.requires_grad(),
            Op::RowNormalize { input: self.id, norms, eps },
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(self) -> Var<'t> {
        let v = self.value();
        let cols = v.cols();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            data.extend(e.iter().map(|x| x / z));
        }
        self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            self.requires_grad(),
            Op::SoftmaxRows(self.id),
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let v = self.value();
        let cols = v.cols();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            self.requires_grad(),
            Op::LogSoftmaxRows(self.id),
        )
    }
}
