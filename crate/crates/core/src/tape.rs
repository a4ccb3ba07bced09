//! Reverse-mode differentiation on an append-only tape.
//!
//! Every primitive records its inputs and its (eagerly computed) output
//! value. `backward` accumulates numeric adjoints; `backward_graph` instead
//! *emits the adjoint computation as new tape nodes*, which is what makes
//! exact second-order meta-gradients possible: an inner SGD step whose
//! gradient was emitted as nodes is itself differentiable.
//!
//! The primitive set is closed under differentiation (the VJP of every op is
//! expressed in ops from the same set), so backward-of-backward needs no
//! special cases.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op {
    /// Differentiable input (parameters).
    Leaf,
    /// Non-differentiable input (data, masks, stop-gradient values).
    Const,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Sin(NodeId),
    Cos(NodeId),
    Relu(NodeId),
    /// (m,n) + (n,) broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// (m,n) → (n,).
    ColSum(NodeId),
    /// (m,n) → (m,).
    RowSum(NodeId),
    /// any → scalar.
    SumAll(NodeId),
    /// (n,) → (m,n).
    BroadcastRow(NodeId, usize),
    /// (m,) → (m,n).
    BroadcastCol(NodeId, usize),
    /// scalar → given shape.
    BroadcastScalar(NodeId, Vec<usize>),
    /// Flat window [offset, offset+len) of a vector, viewed with a shape.
    Segment(NodeId, usize, Vec<usize>),
    /// Embed a (flattened) tensor into zeros(total) at offset.
    Pad(NodeId, usize, usize),
    /// (n,) → scalar at position i.
    Index(NodeId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Relu(..) => "relu",
            Op::AddRowVec(..) => "add_row_vec",
            Op::ColSum(..) => "col_sum",
            Op::RowSum(..) => "row_sum",
            Op::SumAll(..) => "sum_all",
            Op::BroadcastRow(..) => "broadcast_row",
            Op::BroadcastCol(..) => "broadcast_col",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::Segment(..) => "segment",
            Op::Pad(..) => "pad",
            Op::Index(..) => "index",
        }
    }

    fn inputs(&self) -> (Option<NodeId>, Option<NodeId>) {
        match *self {
            Op::Leaf | Op::Const => (None, None),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b)
            | Op::AddRowVec(a, b) => (Some(a), Some(b)),
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Relu(a)
            | Op::ColSum(a)
            | Op::RowSum(a)
            | Op::SumAll(a)
            | Op::BroadcastRow(a, _)
            | Op::BroadcastCol(a, _)
            | Op::BroadcastScalar(a, _)
            | Op::Segment(a, _, _)
            | Op::Pad(a, _, _)
            | Op::Index(a, _) => (Some(a), None),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// First node whose value went non-finite, if any.
    nonfinite: Option<(usize, &'static str)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Returns an error if any recorded value is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((node, op)) => Err(Error::Numeric { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node { op, value });
        id
    }

    // ── builders ────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.add(&self.nodes[b].value);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.sub(&self.nodes[b].value);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.mul(&self.nodes[b].value);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.neg();
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::sin);
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::cos);
        self.push(Op::Cos(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let out = self.nodes[a].value.add_row_vec(&self.nodes[v].value);
        self.push(Op::AddRowVec(a, v), out)
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.col_sum();
        self.push(Op::ColSum(a), v)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.row_sum();
        self.push(Op::RowSum(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a].value.sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn broadcast_row(&mut self, a: NodeId, m: usize) -> NodeId {
        let v = self.nodes[a].value.broadcast_row(m);
        self.push(Op::BroadcastRow(a, m), v)
    }

    pub fn broadcast_col(&mut self, a: NodeId, n: usize) -> NodeId {
        let v = self.nodes[a].value.broadcast_col(n);
        self.push(Op::BroadcastCol(a, n), v)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = Tensor::full(shape, self.nodes[a].value.item());
        self.push(Op::BroadcastScalar(a, shape.to_vec()), v)
    }

    pub fn segment(&mut self, a: NodeId, offset: usize, shape: &[usize]) -> NodeId {
        let len: usize = shape.iter().product();
        let src = self.nodes[a].value.data();
        assert!(
            offset + len <= src.len(),
            "segment [{offset}, {}) out of bounds for vector of {}",
            offset + len,
            src.len()
        );
        let v = Tensor::new(shape.to_vec(), src[offset..offset + len].to_vec()).unwrap();
        self.push(Op::Segment(a, offset, shape.to_vec()), v)
    }

    pub fn pad(&mut self, a: NodeId, offset: usize, total: usize) -> NodeId {
        let src = self.nodes[a].value.data();
        let mut data = vec![0.0; total];
        data[offset..offset + src.len()].copy_from_slice(src);
        self.push(Op::Pad(a, offset, total), Tensor::vector(data))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = Tensor::scalar(self.nodes[a].value.data()[i]);
        self.push(Op::Index(a, i), v)
    }

    /// mean over all elements: scale(sum_all, 1/len).
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ── differentiation ─────────────────────────────────────────────────

    /// Marks every node from which some target is reachable through inputs.
    fn needs_grad(&self, targets: &[NodeId], upto: NodeId) -> Vec<bool> {
        let mut needs = vec![false; upto + 1];
        for &t in targets {
            if t <= upto {
                needs[t] = true;
            }
        }
        for id in 0..=upto {
            if needs[id] {
                continue;
            }
            let (a, b) = self.nodes[id].op.inputs();
            let hit = a.map(|i| needs[i]).unwrap_or(false)
                || b.map(|i| needs[i]).unwrap_or(false);
            needs[id] = hit;
        }
        needs
    }

    /// Numeric gradient of a scalar `loss` node with respect to `wrt`.
    ///
    /// `wrt` may be any node (not only a leaf): the returned tensor is the
    /// adjoint accumulated at that node, i.e. dloss/d(node output) holding
    /// everything upstream of the node fixed.
    pub fn backward(&self, loss: NodeId, wrt: NodeId) -> Result<Tensor> {
        self.check_finite()?;
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let needs = self.needs_grad(&[wrt], loss);
        let mut adj: Vec<Option<Tensor>> = vec![None; loss + 1];
        adj[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if !needs[id] {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if id == wrt {
                // Accumulation at the target is complete once we reach it in
                // reverse topological order.
                return Ok(g);
            }
            self.apply_vjp_numeric(id, &g, &needs, &mut adj);
        }
        // Loss does not depend on wrt.
        Ok(Tensor::zeros(self.nodes[wrt].value.shape()))
    }

    fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
        match slot {
            Some(t) => t.axpy(1.0, &contrib),
            None => *slot = Some(contrib),
        }
    }

    fn apply_vjp_numeric(
        &self,
        id: NodeId,
        g: &Tensor,
        needs: &[bool],
        adj: &mut [Option<Tensor>],
    ) {
        let node = &self.nodes[id];
        let val = |i: NodeId| &self.nodes[i].value;
        match node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.matmul(&val(b).transpose()));
                }
                if needs[b] {
                    Self::accumulate(&mut adj[b], val(a).transpose().matmul(g));
                }
            }
            Op::Transpose(a) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.transpose());
                }
            }
            Op::Add(a, b) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.clone());
                }
                if needs[b] {
                    Self::accumulate(&mut adj[b], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.clone());
                }
                if needs[b] {
                    Self::accumulate(&mut adj[b], g.neg());
                }
            }
            Op::Mul(a, b) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.mul(val(b)));
                }
                if needs[b] {
                    Self::accumulate(&mut adj[b], g.mul(val(a)));
                }
            }
            Op::Neg(a) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.neg());
                }
            }
            Op::Scale(a, c) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.scale(c));
                }
            }
            Op::Sin(a) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.mul(&val(a).map(f64::cos)));
                }
            }
            Op::Cos(a) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.mul(&val(a).map(f64::sin)).neg());
                }
            }
            Op::Relu(a) => {
                if needs[a] {
                    let mask = val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    Self::accumulate(&mut adj[a], g.mul(&mask));
                }
            }
            Op::AddRowVec(a, v) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.clone());
                }
                if needs[v] {
                    Self::accumulate(&mut adj[v], g.col_sum());
                }
            }
            Op::ColSum(a) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.broadcast_row(val(a).rows()));
                }
            }
            Op::RowSum(a) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.broadcast_col(val(a).cols()));
                }
            }
            Op::SumAll(a) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], Tensor::full(val(a).shape(), g.item()));
                }
            }
            Op::BroadcastRow(a, _) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.col_sum());
                }
            }
            Op::BroadcastCol(a, _) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], g.row_sum());
                }
            }
            Op::BroadcastScalar(a, _) => {
                if needs[a] {
                    Self::accumulate(&mut adj[a], Tensor::scalar(g.sum()));
                }
            }
            Op::Segment(a, offset, _) => {
                if needs[a] {
                    let total = val(a).len();
                    let mut data = vec![0.0; total];
                    data[offset..offset + g.len()].copy_from_slice(g.data());
                    Self::accumulate(&mut adj[a], Tensor::vector(data));
                }
            }
            Op::Pad(a, offset, _) => {
                if needs[a] {
                    let len = val(a).len();
                    let window = g.data()[offset..offset + len].to_vec();
                    Self::accumulate(
                        &mut adj[a],
                        Tensor::new(val(a).shape().to_vec(), window).unwrap(),
                    );
                }
            }
            Op::Index(a, i) => {
                if needs[a] {
                    let mut data = vec![0.0; val(a).len()];
                    data[i] = g.item();
                    Self::accumulate(&mut adj[a], Tensor::vector(data));
                }
            }
        }
    }

    /// Gradients of `losses[b]` (each scalar) with respect to `wrt`, one row
    /// per loss, obtained by independent backward passes.
    pub fn per_sample_grads(&self, losses: &[NodeId], wrt: NodeId) -> Result<Tensor> {
        let n = self.nodes[wrt].value.len();
        let mut data = Vec::with_capacity(losses.len() * n);
        for &l in losses {
            let g = self.backward(l, wrt)?;
            data.extend_from_slice(g.data());
        }
        Tensor::new(vec![losses.len(), n], data)
    }

    /// Emits the gradient of `loss` w.r.t. `wrt` as new tape nodes and
    /// returns the node holding it. The emitted subgraph depends on the same
    /// upstream nodes the forward pass did, so it can be differentiated again.
    pub fn backward_graph(&mut self, loss: NodeId, wrt: NodeId) -> Result<NodeId> {
        self.check_finite()?;
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::contract(
                "backward_graph requires a scalar loss node".to_string(),
            ));
        }
        let needs = self.needs_grad(&[wrt], loss);
        let mut adj: Vec<Option<NodeId>> = vec![None; loss + 1];
        let one = self.constant(Tensor::scalar(1.0));
        adj[loss] = Some(one);
        for id in (0..=loss).rev() {
            if !needs[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            if id == wrt {
                return Ok(g);
            }
            self.apply_vjp_graph(id, g, &needs, &mut adj);
        }
        let zero = Tensor::zeros(self.nodes[wrt].value.shape());
        Ok(self.constant(zero))
    }

    fn add_into(&mut self, slot: &mut Option<NodeId>, contrib: NodeId) {
        *slot = Some(match *slot {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    fn apply_vjp_graph(
        &mut self,
        id: NodeId,
        g: NodeId,
        needs: &[bool],
        adj: &mut [Option<NodeId>],
    ) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if needs[a] {
                    let bt = self.transpose(b);
                    let c = self.matmul(g, bt);
                    self.add_into(&mut adj[a], c);
                }
                if needs[b] {
                    let at = self.transpose(a);
                    let c = self.matmul(at, g);
                    self.add_into(&mut adj[b], c);
                }
            }
            Op::Transpose(a) => {
                if needs[a] {
                    let c = self.transpose(g);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::Add(a, b) => {
                if needs[a] {
                    self.add_into(&mut adj[a], g);
                }
                if needs[b] {
                    self.add_into(&mut adj[b], g);
                }
            }
            Op::Sub(a, b) => {
                if needs[a] {
                    self.add_into(&mut adj[a], g);
                }
                if needs[b] {
                    let c = self.neg(g);
                    self.add_into(&mut adj[b], c);
                }
            }
            Op::Mul(a, b) => {
                if needs[a] {
                    let c = self.mul(g, b);
                    self.add_into(&mut adj[a], c);
                }
                if needs[b] {
                    let c = self.mul(g, a);
                    self.add_into(&mut adj[b], c);
                }
            }
            Op::Neg(a) => {
                if needs[a] {
                    let c = self.neg(g);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::Scale(a, k) => {
                if needs[a] {
                    let c = self.scale(g, k);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::Sin(a) => {
                if needs[a] {
                    let ca = self.cos(a);
                    let c = self.mul(g, ca);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::Cos(a) => {
                if needs[a] {
                    let sa = self.sin(a);
                    let m = self.mul(g, sa);
                    let c = self.neg(m);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::Relu(a) => {
                if needs[a] {
                    // The 0/1 mask is locally constant, captured as data.
                    let mask = self.nodes[a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    let c = self.mul(g, mask);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::AddRowVec(a, v) => {
                if needs[a] {
                    self.add_into(&mut adj[a], g);
                }
                if needs[v] {
                    let c = self.col_sum(g);
                    self.add_into(&mut adj[v], c);
                }
            }
            Op::ColSum(a) => {
                if needs[a] {
                    let m = self.nodes[a].value.rows();
                    let c = self.broadcast_row(g, m);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::RowSum(a) => {
                if needs[a] {
                    let n = self.nodes[a].value.cols();
                    let c = self.broadcast_col(g, n);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::SumAll(a) => {
                if needs[a] {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let c = self.broadcast_scalar(g, &shape);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::BroadcastRow(a, _) => {
                if needs[a] {
                    let c = self.col_sum(g);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::BroadcastCol(a, _) => {
                if needs[a] {
                    let c = self.row_sum(g);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::BroadcastScalar(a, _) => {
                if needs[a] {
                    let c = self.sum_all(g);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::Segment(a, offset, _) => {
                if needs[a] {
                    let total = self.nodes[a].value.len();
                    let c = self.pad(g, offset, total);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::Pad(a, offset, _) => {
                if needs[a] {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let c = self.segment(g, offset, &shape);
                    self.add_into(&mut adj[a], c);
                }
            }
            Op::Index(a, i) => {
                if needs[a] {
                    let total = self.nodes[a].value.len();
                    let c = self.pad(g, i, total);
                    self.add_into(&mut adj[a], c);
                }
            }
        }
    }

    /// Recomputes every node value from the recorded leaves and constants.
    /// Used by tests to confirm the tape replays bit-for-bit.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |i: NodeId| &vals[i];
            let out = match &node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                Op::MatMul(a, b) => v(*a).matmul(v(*b)),
                Op::Transpose(a) => v(*a).transpose(),
                Op::Add(a, b) => v(*a).add(v(*b)),
                Op::Sub(a, b) => v(*a).sub(v(*b)),
                Op::Mul(a, b) => v(*a).mul(v(*b)),
                Op::Neg(a) => v(*a).neg(),
                Op::Scale(a, c) => v(*a).scale(*c),
                Op::Sin(a) => v(*a).map(f64::sin),
                Op::Cos(a) => v(*a).map(f64::cos),
                Op::Relu(a) => v(*a).map(|x| x.max(0.0)),
                Op::AddRowVec(a, b) => v(*a).add_row_vec(v(*b)),
                Op::ColSum(a) => v(*a).col_sum(),
                Op::RowSum(a) => v(*a).row_sum(),
                Op::SumAll(a) => Tensor::scalar(v(*a).sum()),
                Op::BroadcastRow(a, m) => v(*a).broadcast_row(*m),
                Op::BroadcastCol(a, n) => v(*a).broadcast_col(*n),
                Op::BroadcastScalar(a, shape) => Tensor::full(shape, v(*a).item()),
                Op::Segment(a, offset, shape) => {
                    let len: usize = shape.iter().product();
                    Tensor::new(
                        shape.clone(),
                        v(*a).data()[*offset..offset + len].to_vec(),
                    )
                    .unwrap()
                }
                Op::Pad(a, offset, total) => {
                    let src = v(*a).data();
                    let mut data = vec![0.0; *total];
                    data[*offset..*offset + src.len()].copy_from_slice(src);
                    Tensor::vector(data)
                }
                Op::Index(a, i) => Tensor::scalar(v(*a).data()[*i]),
            };
            vals.push(out);
        }
        vals
    }
}
