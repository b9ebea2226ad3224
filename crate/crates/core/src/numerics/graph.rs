//! Reverse-mode differentiation over a tape of dense 2-D operations.
//!
//! A [`Graph`] is built eagerly: every primitive computes its value when it is
//! appended, so node indices are already a topological order. [`Graph::backward`]
//! walks that order in reverse and accumulates adjoints only for nodes that
//! depend on a trainable leaf.

use std::collections::BTreeMap;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    RowSoftmax(NodeId),
    Tanh(NodeId),
    MeanPoolRows(NodeId),
    L2NormalizeRows(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
        len: usize,
    },
    Transpose(NodeId),
    /// Sum of all entries, `1 × 1`.
    Sum(NodeId),
    /// Mean negative log of `probs[i, labels[i]]`, `1 × 1`.
    NllRows {
        probs: NodeId,
        labels: Vec<usize>,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::RowSoftmax(a)
            | Op::Tanh(a)
            | Op::MeanPoolRows(a)
            | Op::L2NormalizeRows(a)
            | Op::Transpose(a)
            | Op::Sum(a) => vec![*a],
            Op::SliceRows { input, .. } => vec![*input],
            Op::NllRows { probs, .. } => vec![*probs],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Tensor2,
    pub op: Op,
    pub trainable: bool,
    /// Some trainable leaf is an ancestor of (or is) this node.
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves it reaches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<NodeId, Tensor2>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor2> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor2)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor2) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient (frozen weights, inputs, constants).
    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor2, trainable: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        id
    }

    fn push(&mut self, op: Op, value: Tensor2) -> NodeId {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    /// Softmax over each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Tensor2::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (c, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.set(r, c, e);
                total += e;
            }
            for c in 0..x.cols() {
                out.set(r, c, out.get(r, c) / total);
            }
        }
        self.push(Op::RowSoftmax(a), out)
    }

    /// Column-wise mean over rows: `n × d → 1 × d`.
    pub fn mean_pool_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Dimension {
                op: "mean_pool_rows",
                lhs: x.shape(),
                rhs: (1, x.cols()),
            });
        }
        let mut out = Tensor2::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (c, v) in x.row_slice(r).iter().enumerate() {
                out.data_mut()[c] += v;
            }
        }
        let inv = 1.0 / x.rows() as f64;
        let out = out.scale(inv);
        Ok(self.push(Op::MeanPoolRows(a), out))
    }

    /// Divides each row by its L2 norm. A zero row maps to a zero row.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let norm = row_norm(x.row_slice(r));
            if norm > 0.0 {
                for c in 0..x.cols() {
                    out.set(r, c, x.get(r, c) / norm);
                }
            }
        }
        self.push(Op::L2NormalizeRows(a), out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".to_string()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(*first).shape(),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: x.shape(),
                rhs: (start + len, x.cols()),
            });
        }
        let cols = x.cols();
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor2::from_vec(len, cols, data)?;
        Ok(self.push(Op::SliceRows { input: a, start, len }, value))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor2::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean cross-entropy of row distributions against integer labels.
    pub fn nll_rows(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let p = self.value(probs);
        if labels.len() != p.rows() || labels.is_empty() {
            return Err(Error::Dimension {
                op: "nll_rows",
                lhs: p.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= p.cols()) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {} classes",
                p.cols()
            )));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total -= p.get(r, y).ln();
        }
        let value = Tensor2::scalar(total / labels.len() as f64);
        Ok(self.push(
            Op::NllRows {
                probs,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    /// Exact gradients of a `1 × 1` node with respect to every trainable leaf
    /// it depends on. Frozen leaves and unrelated nodes are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                loss_value.shape()
            )));
        }

        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reachable[i] && self.nodes[i].needs_grad {
                for p in self.nodes[i].op.parents() {
                    reachable[p.0] = true;
                }
            }
        }

        let mut adjoints: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Tensor2::scalar(1.0));
        let mut grads = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !reachable[i] || !node.needs_grad {
                continue;
            }
            let upstream = match adjoints[i].take() {
                Some(g) => g,
                None => Tensor2::zeros(node.value.rows(), node.value.cols()),
            };
            if let Op::Leaf = node.op {
                if node.trainable {
                    grads.insert(NodeId(i), upstream);
                }
                continue;
            }
            self.propagate(node, &upstream, &mut adjoints)?;
        }
        Ok(GradMap { grads })
    }

    fn propagate(&self, node: &Node, upstream: &Tensor2, adjoints: &mut [Option<Tensor2>]) -> Result<()> {
        let mut send = |id: NodeId, g: Tensor2| -> Result<()> {
            if !self.nodes[id.0].needs_grad {
                return Ok(());
            }
            match &mut adjoints[id.0] {
                Some(acc) => acc.add_scaled(&g, 1.0),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    send(*a, upstream.matmul(&vb.transpose())?)?;
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, va.transpose().matmul(upstream)?)?;
                }
            }
            Op::Add(a, b) => {
                send(*a, upstream.clone())?;
                send(*b, upstream.clone())?;
            }
            Op::Scale(a, factor) => send(*a, upstream.scale(*factor))?,
            Op::Tanh(a) => {
                let g = upstream.zip_map(&node.value, |dy, y| dy * (1.0 - y * y));
                send(*a, g)?;
            }
            Op::Transpose(a) => send(*a, upstream.transpose())?,
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut g = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut dot = 0.0;
                    for c in 0..y.cols() {
                        dot += upstream.get(r, c) * y.get(r, c);
                    }
                    for c in 0..y.cols() {
                        g.set(r, c, y.get(r, c) * (upstream.get(r, c) - dot));
                    }
                }
                send(*a, g)?;
            }
            Op::MeanPoolRows(a) => {
                let x = self.value(*a);
                let inv = 1.0 / x.rows() as f64;
                let mut g = Tensor2::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        g.set(r, c, upstream.get(0, c) * inv);
                    }
                }
                send(*a, g)?;
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut g = Tensor2::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = row_norm(x.row_slice(r));
                    if norm == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for c in 0..x.cols() {
                        dot += y.get(r, c) * upstream.get(r, c);
                    }
                    for c in 0..x.cols() {
                        g.set(r, c, (upstream.get(r, c) - y.get(r, c) * dot) / norm);
                    }
                }
                send(*a, g)?;
            }
            Op::ConcatRows(parts) => {
                let cols = upstream.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.nodes[p.0].needs_grad {
                        let data = upstream.data()[offset * cols..(offset + rows) * cols].to_vec();
                        send(*p, Tensor2::from_vec(rows, cols, data)?)?;
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { input, start, len } => {
                let x = self.value(*input);
                let mut g = Tensor2::zeros(x.rows(), x.cols());
                let cols = x.cols();
                g.data_mut()[start * cols..(start + len) * cols].copy_from_slice(upstream.data());
                send(*input, g)?;
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                send(*a, Tensor2::filled(x.rows(), x.cols(), upstream.get(0, 0)))?;
            }
            Op::NllRows { probs, labels } => {
                let p = self.value(*probs);
                let mut g = Tensor2::zeros(p.rows(), p.cols());
                let scale = upstream.get(0, 0) / labels.len() as f64;
                for (r, &y) in labels.iter().enumerate() {
                    g.set(r, y, -scale / p.get(r, y));
                }
                send(*probs, g)?;
            }
        }
        Ok(())
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}
