use std::cell::RefCell;

use crate::error::{HtvError, Result};
use crate::tensor::{axis_split, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Softplus,
    Square,
    Sqrt,
}

#[derive(Debug, Clone)]
pub(super) enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Interpolate(usize, usize),
}

impl Op {
    pub(super) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Softmax(a, _)
            | Op::Slice(a, _, _)
            | Op::Interpolate(a, _) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) op: Op,
    /// Some ancestor (or the node itself) is a trainable leaf.
    pub(super) needs_grad: bool,
    pub(super) requires_grad: bool,
    pub(super) grad: Option<Vec<f64>>,
}

/// Records executed operations in creation order; node ids are therefore a
/// topological order of the graph.
#[derive(Default)]
pub struct Tape {
    pub(super) nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(super) tape: &'t Tape,
    pub(super) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Ids of each node's inputs, in node order.
    pub fn edges(&self) -> Vec<(usize, Vec<usize>)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.op.inputs()))
            .collect()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    pub(super) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from `loss`, accumulating into the `grad` of every
    /// trainable leaf. Each node is visited once.
    pub(super) fn backward_from(&self, loss: usize) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss].value.len() != 1 {
            return Err(HtvError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                if nodes[id].requires_grad {
                    match &mut nodes[id].grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            let nodes_ref: &Vec<Node> = &nodes;
            backward_node(nodes_ref, id, &g, &mut grads);
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let kind = *kind;
            accumulate(nodes, grads, *a, |ga| {
                super::ops::for_each_broadcast(out.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    ga[ia] += g[o]
                        * match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => vb.data()[ib],
                            BinaryKind::Div => 1.0 / vb.data()[ib],
                        };
                })
            });
            accumulate(nodes, grads, *b, |gb| {
                super::ops::for_each_broadcast(out.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    gb[ib] += g[o]
                        * match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => va.data()[ia],
                            BinaryKind::Div => {
                                let d = vb.data()[ib];
                                -va.data()[ia] / (d * d)
                            }
                        };
                })
            });
        }
        Op::Unary(kind, a) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            let kind = *kind;
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    let d = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => 1.0 / x[i],
                        UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        UnaryKind::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Softplus => sigmoid(x[i]),
                        UnaryKind::Square => 2.0 * x[i],
                        UnaryKind::Sqrt => 0.5 / y[i],
                    };
                    ga[i] += g[i] * d;
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)
            });
        }
        Op::Shift(a) | Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, |ga| {
                    super::ops::matmul_backward_lhs(va.shape(), vb, out.shape(), g, ga)
                });
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, |gb| {
                    super::ops::matmul_backward_rhs(va, vb.shape(), out.shape(), g, gb)
                });
            }
        }
        Op::Transpose(a) => {
            let shape = out.shape();
            let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            accumulate(nodes, grads, *a, |ga| {
                for (batch, gout) in g.chunks(r * c).enumerate() {
                    let base = batch * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            ga[base + j * r + i] += gout[i * c + j];
                        }
                    }
                }
            });
        }
        Op::SumAll(a) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::SumAxis(a, axis) => {
            let (outer, n, inner) = axis_split(nodes[*a].value.shape(), *axis);
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            ga[(o * n + k) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::Concat(inputs, axis) => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let n = nodes[inp].value.shape()[*axis];
                accumulate(nodes, grads, inp, |gi| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * n * inner;
                        for k in 0..n * inner {
                            gi[dst + k] += g[src + k];
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Slice(a, axis, start) => {
            let (outer, total, inner) = axis_split(nodes[*a].value.shape(), *axis);
            let n = out.shape()[*axis];
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * n * inner;
                    for k in 0..n * inner {
                        ga[dst + k] += g[src + k];
                    }
                }
            });
        }
        Op::Interpolate(a, axis) => {
            let (outer, src_len, inner) = axis_split(nodes[*a].value.shape(), *axis);
            let dst_len = out.shape()[*axis];
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for j in 0..dst_len {
                        let s = nearest_source(j, src_len, dst_len);
                        for i in 0..inner {
                            ga[(o * src_len + s) * inner + i] += g[(o * dst_len + j) * inner + i];
                        }
                    }
                }
            });
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source index for output position `j` when stretching `src_len` cells to
/// `dst_len`: floor(j * src_len / dst_len).
pub fn nearest_source(j: usize, src_len: usize, dst_len: usize) -> usize {
    j * src_len / dst_len
}
