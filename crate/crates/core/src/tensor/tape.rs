//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. Nodes are only ever appended, so the node order is a topological
//! order of the computation and [`Tape::backward`] is a single reverse sweep.

use std::borrow::Cow;
use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{check_shape, strides, Tensor};
use crate::error::{Error, Result};

/// Kinds of differentiable operations recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Sqrt,
    Sum,
    Mean,
    Max,
    MatMul,
    Transpose,
    Conv2d,
    Reshape,
    Concat,
    IndexSelect,
    SoftmaxXent,
}

/// Registry of every differentiable operation; the gradient-check runner
/// must cover each entry.
pub const DIFFERENTIABLE_OPS: &[OpKind] = &[
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Tanh,
    OpKind::Softplus,
    OpKind::Sqrt,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Max,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Conv2d,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::IndexSelect,
    OpKind::SoftmaxXent,
];

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Sqrt => "sqrt",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::IndexSelect => "index_select",
            OpKind::SoftmaxXent => "softmax_xent",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        DIFFERENTIABLE_OPS
            .iter()
            .copied()
            .find(|k| k.name() == name)
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Flips the sign of the first operand adjoint of `kind` in every backward
/// pass on this thread. Only meant for checking that gradient checks detect
/// a broken rule.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Sqrt,
    Sum,
    Mean(f64),
    Max(Vec<usize>),
    MatMul,
    Transpose,
    Conv2d(ConvGeom),
    Reshape,
    Concat(usize),
    IndexSelect(Vec<usize>),
    SoftmaxXent { labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Tanh => OpKind::Tanh,
            Op::Softplus => OpKind::Softplus,
            Op::Sqrt => OpKind::Sqrt,
            Op::Sum => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Max(_) => OpKind::Max,
            Op::MatMul => OpKind::MatMul,
            Op::Transpose => OpKind::Transpose,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Reshape => OpKind::Reshape,
            Op::Concat(_) => OpKind::Concat,
            Op::IndexSelect(_) => OpKind::IndexSelect,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
        })
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Record of executed operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tracked leaf; it will receive an adjoint in `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, vec![], true)
    }

    /// Registers an untracked input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, vec![], false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kinds of operation recorded so far.
    pub fn op_kinds(&self) -> BTreeSet<OpKind> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| n.op.kind())
            .collect()
    }

    fn push(&self, value: Tensor, op: Op, parents: Vec<usize>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            parents,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn record(&self, value: Tensor, op: Op, parents: &[Var<'_>]) -> Result<Var<'_>> {
        if !value.is_finite() {
            let name = op.kind().map(OpKind::name).unwrap_or("leaf");
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        Ok(self.push(value, op, ids, requires_grad))
    }

    fn same_tape(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Runs the reverse sweep from a single-element `loss`.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(self.same_tape(&loss), "loss belongs to a different tape");
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let fault = BACKWARD_FAULT.with(Cell::get);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(up) = grads[id].take() else { continue };
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let operands: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|&p| nodes[p].value.as_ref())
                .collect();
            let mut contribs = adjoints(&node.op, &operands, &node.value, &up, &need);
            if fault.is_some() && fault == node.op.kind() {
                if let Some(Some(first)) = contribs.first_mut() {
                    first.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (&p, contrib) in node.parents.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // keep the adjoint of tracked leaves and intermediates queryable
            grads[id] = Some(up);
        }
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::from_parts(shape, vec![0.0; node.value.numel()]),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`; `None` for untracked values.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(mismatch(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch(op, a, b)),
        })
        .collect()
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

/// Strides of `src` viewed inside `dst`, zero along broadcast axes.
fn broadcast_strides(src: &[usize], dst: &[usize]) -> [usize; 4] {
    let s4 = pad4(src);
    let d4 = pad4(dst);
    let st = strides(&s4);
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = if s4[i] == 1 && d4[i] != 1 { 0 } else { st[i] };
    }
    out
}

fn expand<'a>(t: &'a Tensor, shape: &[usize]) -> Cow<'a, [f64]> {
    if t.shape() == shape {
        return Cow::Borrowed(t.data());
    }
    let d = pad4(shape);
    let st = broadcast_strides(t.shape(), shape);
    let src = t.data();
    let mut out = Vec::with_capacity(d.iter().product());
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..d[3] {
                    out.push(src[base + i3 * st[3]]);
                }
            }
        }
    }
    Cow::Owned(out)
}

/// Sums `grad` (laid out as `from`) down onto the broadcast source shape `to`.
fn sum_to(grad: Vec<f64>, from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad;
    }
    let d = pad4(from);
    let st = broadcast_strides(to, from);
    let mut out = vec![0.0; to.iter().product()];
    let mut k = 0;
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..d[3] {
                    out[base + i3 * st[3]] += grad[k];
                    k += 1;
                }
            }
        }
    }
    out
}

/// Output shape and per-input-axis output strides (zero on reduced axes).
fn reduce_layout(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, [usize; 4])> {
    let rank = shape.len();
    if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::InvalidAxis { axis, rank });
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
        .collect();
    let os = strides(&pad4(&out_shape));
    let mut st = [0; 4];
    for i in 0..4 {
        let real = i as isize - (4 - rank) as isize;
        let reduced = real >= 0 && axes.contains(&(real as usize));
        st[i] = if reduced { 0 } else { os[i] };
    }
    Ok((out_shape, st))
}

fn for_each_reduced(shape: &[usize], st: &[usize; 4], mut f: impl FnMut(usize, usize)) {
    let d = pad4(shape);
    let mut k = 0;
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..d[3] {
                    f(k, base + i3 * st[3]);
                    k += 1;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn adjoints(
    op: &Op,
    xs: &[&Tensor],
    out: &Tensor,
    up: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => vec![],
        Op::Add | Op::Sub => {
            let sign = if matches!(op, Op::Sub) { -1.0 } else { 1.0 };
            vec![
                want(0).then(|| sum_to(up.to_vec(), out.shape(), xs[0].shape())),
                want(1).then(|| {
                    let g = up.iter().map(|v| sign * v).collect();
                    sum_to(g, out.shape(), xs[1].shape())
                }),
            ]
        }
        Op::Mul => {
            let a = expand(xs[0], out.shape());
            let b = expand(xs[1], out.shape());
            vec![
                want(0).then(|| sum_to(zip_with(up, &b, |u, b| u * b), out.shape(), xs[0].shape())),
                want(1).then(|| sum_to(zip_with(up, &a, |u, a| u * a), out.shape(), xs[1].shape())),
            ]
        }
        Op::Div => {
            let b = expand(xs[1], out.shape());
            vec![
                want(0).then(|| sum_to(zip_with(up, &b, |u, b| u / b), out.shape(), xs[0].shape())),
                want(1).then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let g = up
                        .iter()
                        .zip(out.data())
                        .zip(b.iter())
                        .map(|((u, q), b)| -u * q / b)
                        .collect();
                    sum_to(g, out.shape(), xs[1].shape())
                }),
            ]
        }
        Op::Scale(c) => vec![want(0).then(|| up.iter().map(|u| u * c).collect())],
        Op::AddScalar | Op::Reshape => vec![want(0).then(|| up.to_vec())],
        Op::Relu => {
            vec![want(0).then(|| zip_with(up, xs[0].data(), |u, x| if x > 0.0 { u } else { 0.0 }))]
        }
        Op::Sigmoid => vec![want(0).then(|| zip_with(up, out.data(), |u, y| u * y * (1.0 - y)))],
        Op::Tanh => vec![want(0).then(|| zip_with(up, out.data(), |u, y| u * (1.0 - y * y)))],
        Op::Softplus => vec![want(0).then(|| zip_with(up, xs[0].data(), |u, x| u * sigmoid(x)))],
        Op::Sqrt => vec![want(0).then(|| zip_with(up, out.data(), |u, y| 0.5 * u / y))],
        Op::Sum | Op::Mean(_) => vec![want(0).then(|| {
            let scale = if let Op::Mean(m) = op { 1.0 / m } else { 1.0 };
            let g: Vec<f64> = up.iter().map(|u| u * scale).collect();
            expand(&Tensor::from_parts(out.shape().to_vec(), g), xs[0].shape()).into_owned()
        })],
        Op::Max(argmax) => vec![want(0).then(|| {
            let mut g = vec![0.0; xs[0].numel()];
            for (u, &src) in up.iter().zip(argmax) {
                g[src] += u;
            }
            g
        })],
        Op::MatMul => {
            let (m, k) = (xs[0].shape()[0], xs[0].shape()[1]);
            let n = xs[1].shape()[1];
            vec![
                want(0).then(|| {
                    let mut g = vec![0.0; m * k];
                    kernels::gemm(m, n, k, up, false, xs[1].data(), true, &mut g, false);
                    g
                }),
                want(1).then(|| {
                    let mut g = vec![0.0; k * n];
                    kernels::gemm(k, m, n, xs[0].data(), true, up, false, &mut g, false);
                    g
                }),
            ]
        }
        Op::Transpose => vec![want(0).then(|| {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    g[j * r + i] = up[i * c + j];
                }
            }
            g
        })],
        Op::Conv2d(geom) => {
            let (dx, dw, db) = kernels::conv2d_backward(
                geom,
                xs[0].data(),
                xs[1].data(),
                up,
                want(0),
                want(1),
                want(2),
            );
            vec![dx, dw, db]
        }
        Op::Concat(axis) => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            xs.iter()
                .enumerate()
                .map(|(i, x)| {
                    let width = x.shape()[*axis] * inner;
                    let g = want(i).then(|| {
                        let mut g = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            g.extend_from_slice(
                                &up[o * total + offset..o * total + offset + width],
                            );
                        }
                        g
                    });
                    offset += width;
                    g
                })
                .collect()
        }
        Op::IndexSelect(indices) => vec![want(0).then(|| {
            let row = xs[0].numel() / xs[0].shape()[0];
            let mut g = vec![0.0; xs[0].numel()];
            for (k, &i) in indices.iter().enumerate() {
                g[i * row..(i + 1) * row]
                    .iter_mut()
                    .zip(&up[k * row..(k + 1) * row])
                    .for_each(|(a, b)| *a += b);
            }
            g
        })],
        Op::SoftmaxXent { labels, probs } => vec![want(0).then(|| {
            let n = labels.len();
            let classes = probs.len() / n;
            let scale = up[0] / n as f64;
            let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                g[i * classes + l] -= scale;
            }
            g
        })],
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let data = zip_with(&expand(&a, &shape), &expand(&b, &shape), f);
        self.tape
            .record(Tensor::from_parts(shape, data), op, &[self, other])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = map_unary(&self.value(), |x| x * c);
        self.tape.record(v, Op::Scale(c), &[self])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let v = map_unary(&self.value(), |x| x + c);
        self.tape.record(v, Op::AddScalar, &[self])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let v = map_unary(&self.value(), |x| x.max(0.0));
        self.tape.record(v, Op::Relu, &[self])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let v = map_unary(&self.value(), sigmoid);
        self.tape.record(v, Op::Sigmoid, &[self])
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let v = map_unary(&self.value(), f64::tanh);
        self.tape.record(v, Op::Tanh, &[self])
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        let v = map_unary(&self.value(), softplus);
        self.tape.record(v, Op::Softplus, &[self])
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        self.tape
            .record(map_unary(&x, f64::sqrt), Op::Sqrt, &[self])
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Sum over `axes`, keeping reduced axes with extent 1.
    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (shape, st) = reduce_layout(x.shape(), axes)?;
        let mut out = vec![0.0; shape.iter().product()];
        let src = x.data();
        for_each_reduced(x.shape(), &st, |k, o| out[o] += src[k]);
        self.tape
            .record(Tensor::from_parts(shape, out), Op::Sum, &[self])
    }

    /// Mean over `axes` (sum divided by the product of reduced extents).
    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (shape, st) = reduce_layout(x.shape(), axes)?;
        let m = (x.numel() / shape.iter().product::<usize>()) as f64;
        let mut out = vec![0.0; shape.iter().product()];
        let src = x.data();
        for_each_reduced(x.shape(), &st, |k, o| out[o] += src[k]);
        out.iter_mut().for_each(|v| *v /= m);
        self.tape
            .record(Tensor::from_parts(shape, out), Op::Mean(m), &[self])
    }

    /// Max over `axes`; the adjoint flows to the first maximal element.
    pub fn max(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (shape, st) = reduce_layout(x.shape(), axes)?;
        let n: usize = shape.iter().product();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut arg = vec![0usize; n];
        let src = x.data();
        for_each_reduced(x.shape(), &st, |k, o| {
            if src[k] > out[o] {
                out[o] = src[k];
                arg[o] = k;
            }
        });
        self.tape
            .record(Tensor::from_parts(shape, out), Op::Max(arg), &[self])
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        self.sum(&(0..rank).collect::<Vec<_>>())
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        self.mean(&(0..rank).collect::<Vec<_>>())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        self.tape.record(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul,
            &[self, other],
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: a.shape().to_vec(),
                reason: "transpose expects a matrix".into(),
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let src = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.tape
            .record(Tensor::from_parts(vec![c, r], out), Op::Transpose, &[self])
    }

    /// 2-D cross-correlation, stride 1, symmetric zero padding.
    ///
    /// `self: [N, Cin, H, W]`, `weight: [Cout, Cin, kh, kw]`, `bias: [Cout]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, padding: usize) -> Result<Var<'t>> {
        self.check_tape(&weight);
        self.check_tape(&bias);
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(mismatch("conv2d", x.shape(), w.shape()));
        }
        if b.shape() != [w.shape()[0]] {
            return Err(mismatch("conv2d bias", w.shape(), b.shape()));
        }
        let geom = ConvGeom {
            n: x.shape()[0],
            cin: x.shape()[1],
            h: x.shape()[2],
            w: x.shape()[3],
            cout: w.shape()[0],
            kh: w.shape()[2],
            kw: w.shape()[3],
            pad: padding,
        };
        if geom.kh > geom.h + 2 * padding || geom.kw > geom.w + 2 * padding {
            return Err(Error::InvalidShape {
                shape: w.shape().to_vec(),
                reason: format!("kernel larger than padded input {:?}", x.shape()),
            });
        }
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let shape = vec![geom.n, geom.cout, geom.out_h(), geom.out_w()];
        self.tape.record(
            Tensor::from_parts(shape, out),
            Op::Conv2d(geom),
            &[self, weight, bias],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        check_shape(shape)?;
        if shape.iter().product::<usize>() != x.numel() {
            return Err(mismatch("reshape", x.shape(), shape));
        }
        let v = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        self.tape.record(v, Op::Reshape, &[self])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let values: Vec<Rc<Tensor>> = parts
            .iter()
            .map(|p| {
                first.check_tape(p);
                p.value()
            })
            .collect();
        let s0 = values[0].shape().to_vec();
        if axis >= s0.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: s0.len(),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &s0, s));
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut shape = s0.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let width = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
            }
        }
        first
            .tape
            .record(Tensor::from_parts(shape, data), Op::Concat(axis), parts)
    }

    /// Gathers rows along axis 0 (embedding lookup, sample selection).
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.shape()[0];
        if indices.is_empty() {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "empty index list".into(),
            });
        }
        let row = x.numel() / n;
        let mut data = Vec::with_capacity(row * indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    extent: n,
                });
            }
            data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        self.tape.record(
            Tensor::from_parts(shape, data),
            Op::IndexSelect(indices.to_vec()),
            &[self],
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// max subtraction. `self: [N, A]`; the result has shape `[1]`.
    pub fn softmax_xent(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(mismatch("softmax_xent", x.shape(), &[labels.len()]));
        }
        let classes = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: classes,
            });
        }
        let mut probs = Vec::with_capacity(x.numel());
        let mut loss = 0.0;
        for (row, &label) in x.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        loss /= labels.len() as f64;
        let op = Op::SoftmaxXent {
            labels: labels.to_vec(),
            probs,
        };
        self.tape.record(Tensor::scalar(loss), op, &[self])
    }
}
