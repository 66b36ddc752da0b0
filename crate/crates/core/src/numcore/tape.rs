//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] owns every node created during one forward pass. Nodes are
//! appended in creation order, so the node list is already a topological
//! order and the backward sweep is a single reverse scan.

use std::cell::{Ref, RefCell};

use super::special::{digamma, lgamma, sigmoid, softplus, trigamma};
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::{NumError, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { input: usize, rows: usize, cols: usize },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Gather { input: usize, index: Vec<Option<usize>> },
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    Gelu(usize),
    Softmax { input: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaxReduce { input: usize, axis: usize, argmax: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    SumAxis { input: usize, axis: usize },
    Lgamma(usize),
    Digamma(usize),
    /// Elementwise op with a precomputed local derivative `d out / d in`.
    Pathwise { input: usize, dout: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    needs_grad: Vec<bool>,
}

impl Gradients {
    /// Gradient of `var`: `None` when the node does not track gradients,
    /// zeros when it does but is unreachable from the root.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        if !self.needs_grad[var.id] {
            return None;
        }
        let shape = self.shapes[var.id].clone();
        Some(match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Like [`Gradients::get`] but moves the buffer out.
    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        if !self.needs_grad[var.id] {
            return None;
        }
        let shape = self.shapes[var.id].clone();
        Some(match self.grads[var.id].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        })
    }
}

/// Outer/axis/inner decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    let rn: usize = rhs.iter().product();
    lhs == rhs || rn == 1 || (rhs.len() <= lhs.len() && lhs.ends_with(rhs))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(NumError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if root_node.needs_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            needs_grad: nodes.iter().map(|n| n.needs_grad).collect(),
        })
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

/// Accumulate a full-size gradient into a possibly broadcast operand.
fn acc_broadcast(target: &mut [f64], contrib: impl Iterator<Item = f64>) {
    let r = target.len();
    for (i, c) in contrib.enumerate() {
        target[i % r] += c;
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                acc_broadcast(gb, g.iter().copied());
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                acc_broadcast(gb, g.iter().map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let r = bv.len();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * bv[i % r];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                acc_broadcast(gb, g.iter().zip(av).map(|(gi, ai)| gi * ai));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let r = bv.len();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] / bv[i % r];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                acc_broadcast(
                    gb,
                    g.iter().enumerate().map(|(i, gi)| {
                        let bi = bv[i % r];
                        -gi * av[i] / (bi * bi)
                    }),
                );
            }
        }
        Op::Neg(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = G B^T
                gemm_nt_acc(g, bv, ga, *m, *n, *k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = A^T G
                gemm_tn_acc(av, g, gb, *m, *k, *n);
            }
        }
        Op::Transpose { input, rows, cols } => {
            if let Some(gi) = acc(grads, nodes, *input) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        gi[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                if let Some(gi) = acc(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gi[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let (outer, total, inner) = split_axis(nodes[*input].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            if let Some(gi) = acc(grads, nodes, *input) {
                for o in 0..outer {
                    let dst = &mut gi[(o * total + start) * inner..(o * total + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Gather { input, index } => {
            if let Some(gi) = acc(grads, nodes, *input) {
                for (out, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        gi[*s] += g[out];
                    }
                }
            }
        }
        Op::Exp(a) => {
            let y = node.value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            }
        }
        Op::Log(a) => {
            let x = val(*a);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] / x[i];
                }
            }
        }
        Op::Sqrt(a) => {
            let y = node.value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * 0.5 / y[i];
                }
            }
        }
        Op::Square(a) => {
            let x = val(*a);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * 2.0 * x[i];
                }
            }
        }
        Op::Softplus(a) => {
            let x = val(*a);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * sigmoid(x[i]);
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * gelu_grad(x[i]);
                }
            }
        }
        Op::Softmax { input, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            if let Some(gi) = acc(grads, nodes, *input) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + j;
                        let dot: f64 = (0..n).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..n {
                            gi[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gam = val(*gamma);
            let n = gam.len();
            let rows = xhat.len() / n;
            if let Some(gb) = acc(grads, nodes, *beta) {
                for r in 0..rows {
                    for j in 0..n {
                        gb[j] += g[r * n + j];
                    }
                }
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for r in 0..rows {
                    for j in 0..n {
                        gg[j] += g[r * n + j] * xhat[r * n + j];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let nf = n as f64;
                for r in 0..rows {
                    let row = r * n..(r + 1) * n;
                    let dxhat: Vec<f64> = g[row.clone()].iter().zip(gam).map(|(a, b)| a * b).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] +=
                            inv_std[r] / nf * (nf * dxhat[j] - sum_d - xhat[r * n + j] * sum_dx);
                    }
                }
            }
        }
        Op::MaxReduce { input, axis, argmax } => {
            let (_, n, inner) = split_axis(nodes[*input].value.shape(), *axis);
            if let Some(gi) = acc(grads, nodes, *input) {
                for (out, &t) in argmax.iter().enumerate() {
                    let (o, j) = (out / inner, out % inner);
                    gi[(o * n + t) * inner + j] += g[out];
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::MeanAll(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::SumAxis { input, axis } => {
            let (outer, n, inner) = split_axis(nodes[*input].value.shape(), *axis);
            if let Some(gi) = acc(grads, nodes, *input) {
                for o in 0..outer {
                    for t in 0..n {
                        for j in 0..inner {
                            gi[(o * n + t) * inner + j] += g[o * inner + j];
                        }
                    }
                }
            }
        }
        Op::Lgamma(a) => {
            let x = val(*a);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * digamma(x[i]);
                }
            }
        }
        Op::Digamma(a) => {
            let x = val(*a);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * trigamma(x[i]);
                }
            }
        }
        Op::Pathwise { input, dout } => {
            if let Some(gi) = acc(grads, nodes, *input) {
                for i in 0..gi.len() {
                    gi[i] += g[i] * dout[i];
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn node_value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.node_value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node_value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node_value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.node_value().data()[0]
    }

    /// Copy of the forward data.
    pub fn data(&self) -> Vec<f64> {
        self.node_value().data().to_vec()
    }

    fn unary(&self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = {
            let v = self.node_value();
            Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        let ng = self.tape.needs(&[self.id]);
        self.tape.push(out, op(self.id), ng)
    }

    fn binary(
        &self,
        rhs: Var<'t>,
        name: &'static str,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = {
            let a = self.node_value();
            let b = rhs.node_value();
            if !broadcast_ok(a.shape(), b.shape()) {
                return Err(NumError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (ad, bd) = (a.data(), b.data());
            let r = bd.len();
            let data = ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % r])).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let ng = self.tape.needs(&[self.id, rhs.id]);
        Ok(self.tape.push(out, op(self.id, rhs.id), ng))
    }

    /// Elementwise sum. `rhs` may be a scalar or a trailing-shape suffix of
    /// `self`, in which case it is broadcast over the leading axes.
    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|i| Op::Scale(i, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus, softplus)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu, gelu)
    }

    pub fn lgamma(&self) -> Var<'t> {
        self.unary(Op::Lgamma, lgamma)
    }

    pub fn digamma(&self) -> Var<'t> {
        self.unary(Op::Digamma, digamma)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (out, m, k, n) = {
            let a = self.node_value();
            let b = rhs.node_value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(NumError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), &mut out, m, k, n);
            (Tensor::from_parts(vec![m, n], out), m, k, n)
        };
        let ng = self.tape.needs(&[self.id, rhs.id]);
        Ok(self.tape.push(out, Op::MatMul { a: self.id, b: rhs.id, m, k, n }, ng))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let (out, rows, cols) = {
            let a = self.node_value();
            if a.rank() != 2 {
                return Err(NumError::Invalid {
                    op: "transpose",
                    msg: format!("expected rank 2, got shape {:?}", a.shape()),
                });
            }
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let d = a.data();
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = d[r * cols + c];
                }
            }
            (Tensor::from_parts(vec![cols, rows], out), rows, cols)
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(out, Op::Transpose { input: self.id, rows, cols }, ng))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.node_value();
            let n: usize = shape.iter().product();
            if n != a.len() {
                return Err(NumError::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor::from_parts(shape.to_vec(), a.data().to_vec())
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(out, Op::Reshape(self.id), ng))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(NumError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(NumError::Invalid {
                    op: "concat",
                    msg: format!("axis {axis} out of range for shape {base:?}"),
                });
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let ok = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(NumError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let len = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = tape.needs(&ids);
        Ok(tape.push(out, Op::Concat { inputs: ids, axis }, ng))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.node_value();
            let shape = a.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return Err(NumError::Invalid {
                    op: "slice",
                    msg: format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
                });
            }
            let (outer, total, inner) = split_axis(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data()[(o * total + start) * inner..(o * total + start + len) * inner]);
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            Tensor::from_parts(s, data)
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(out, Op::Slice { input: self.id, axis, start }, ng))
    }

    /// `out[i] = self.flat[index[i]]`, or 0 where the index is `None`.
    pub fn gather(&self, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.node_value();
            let n: usize = shape.iter().product();
            if n != index.len() {
                return Err(NumError::Invalid {
                    op: "gather",
                    msg: format!("{} indices for output shape {shape:?}", index.len()),
                });
            }
            if let Some(bad) = index.iter().flatten().find(|&&i| i >= a.len()) {
                return Err(NumError::Invalid {
                    op: "gather",
                    msg: format!("index {bad} out of range for {} values", a.len()),
                });
            }
            let data = index.iter().map(|i| i.map_or(0.0, |i| a.data()[i])).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(out, Op::Gather { input: self.id, index }, ng))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.node_value();
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(NumError::Invalid {
                    op: "softmax",
                    msg: format!("axis {axis} out of range for shape {shape:?}"),
                });
            }
            let (outer, n, inner) = split_axis(shape, axis);
            let x = a.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |t: usize| (o * n + t) * inner + j;
                    let mx = (0..n).map(|t| x[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for t in 0..n {
                        let e = (x[idx(t)] - mx).exp();
                        y[idx(t)] = e;
                        s += e;
                    }
                    for t in 0..n {
                        y[idx(t)] /= s;
                    }
                }
            }
            Tensor::from_parts(shape.to_vec(), y)
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(out, Op::Softmax { input: self.id, axis }, ng))
    }

    /// Layer normalisation over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, xhat, inv_std) = {
            let a = self.node_value();
            let g = gamma.node_value();
            let b = beta.node_value();
            let shape = a.shape();
            let n = *shape.last().unwrap_or(&0);
            if n == 0 || g.shape() != [n] || b.shape() != [n] {
                return Err(NumError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rows = a.len() / n;
            let x = a.data();
            let mut xhat = vec![0.0; x.len()];
            let mut inv_std = vec![0.0; rows];
            let mut y = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat[r * n + j] = h;
                    y[r * n + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::from_parts(shape.to_vec(), y), xhat, inv_std)
        };
        let ng = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
            ng,
        ))
    }

    /// Element-wise maximum across `axis` (that axis is removed).
    /// Ties resolve to the lowest index.
    pub fn max_reduce(&self, axis: usize) -> Result<Var<'t>> {
        let (out, argmax) = {
            let a = self.node_value();
            let shape = a.shape();
            if axis >= shape.len() || shape[axis] == 0 {
                return Err(NumError::Invalid {
                    op: "max_reduce",
                    msg: format!("axis {axis} empty or out of range for shape {shape:?}"),
                });
            }
            let (outer, n, inner) = split_axis(shape, axis);
            let x = a.data();
            let mut vals = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for t in 0..n {
                    for j in 0..inner {
                        let v = x[(o * n + t) * inner + j];
                        if v > vals[o * inner + j] {
                            vals[o * inner + j] = v;
                            arg[o * inner + j] = t;
                        }
                    }
                }
            }
            let mut s = shape.to_vec();
            s.remove(axis);
            (Tensor::from_parts(s, vals), arg)
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(out, Op::MaxReduce { input: self.id, axis, argmax }, ng))
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.node_value().data().iter().sum());
        let ng = self.tape.needs(&[self.id]);
        self.tape.push(out, Op::SumAll(self.id), ng)
    }

    pub fn mean(&self) -> Var<'t> {
        let out = {
            let v = self.node_value();
            Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
        };
        let ng = self.tape.needs(&[self.id]);
        self.tape.push(out, Op::MeanAll(self.id), ng)
    }

    /// Sum across `axis` (that axis is removed).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.node_value();
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(NumError::Invalid {
                    op: "sum_axis",
                    msg: format!("axis {axis} out of range for shape {shape:?}"),
                });
            }
            let (outer, n, inner) = split_axis(shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for t in 0..n {
                    for j in 0..inner {
                        out[o * inner + j] += a.data()[(o * n + t) * inner + j];
                    }
                }
            }
            let mut s = shape.to_vec();
            s.remove(axis);
            Tensor::from_parts(s, out)
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(out, Op::SumAxis { input: self.id, axis }, ng))
    }

    /// Elementwise map whose derivative is supplied by the caller.
    pub(crate) fn pathwise(&self, value: Vec<f64>, dout: Vec<f64>) -> Var<'t> {
        let shape = self.shape();
        debug_assert_eq!(value.len(), dout.len());
        let ng = self.tape.needs(&[self.id]);
        self.tape
            .push(Tensor::from_parts(shape, value), Op::Pathwise { input: self.id, dout }, ng)
    }
}
