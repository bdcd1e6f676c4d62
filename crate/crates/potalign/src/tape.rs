//! Reverse-mode automatic differentiation over an explicit computation tape.
//!
//! The tape is per-forward-pass: every pass builds its own [`Tape`], records
//! values and operations in topological order, and [`Tape::backward`] replays
//! the tape in reverse to accumulate exact gradients for every parameter
//! node. There is no global state; independent tapes may run concurrently.
//!
//! Numeric contract:
//! - all operands and results are rank-1 or rank-2 tensors (scalars are 1x1);
//! - `log` clamps its input at a floor of 1e-300 before taking the logarithm;
//! - `softmax` and `logsumexp` subtract the per-line maximum before
//!   exponentiating;
//! - `sqrt` propagates zero gradient where the forward value is zero (the
//!   subgradient choice at the root's kink);
//! - every public operation checks its result for NaN/Inf and fails with a
//!   domain error instead of storing non-finite values.
//!
//! After `backward` the tape remains usable: values are intact, further ops
//! may be appended, and `backward` may be called again (gradient accumulators
//! are reset at the start of each call).

use std::collections::BTreeMap;

use crate::tensor::DenseTensor;
use crate::{Error, Result};

/// Index of a node on a tape.
pub type NodeId = usize;

/// Floor applied to `log` inputs, part of the stability contract.
pub const LOG_FLOOR: f64 = 1e-300;

/// Operation kinds recordable on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    /// Elementwise sum of two equally-shaped tensors.
    Add,
    /// Elementwise difference.
    Sub,
    /// Elementwise (Hadamard) product.
    Mul,
    /// Elementwise quotient; the divisor must be nonzero everywhere.
    Div,
    /// Matrix product of rank-2 tensors, [m,k] x [k,n] -> [m,n].
    Matmul,
    /// Rank-2 transpose.
    Transpose,
    Exp,
    Log,
    Sqrt,
    Tanh,
    /// Sum of all entries, producing a 1x1 scalar.
    Sum,
    /// Mean of all entries, producing a 1x1 scalar.
    Mean,
    /// Softmax along an axis of a rank-2 tensor (0 = down columns, 1 = along rows).
    Softmax { axis: usize },
    /// Max-subtracted log-sum-exp along an axis, keeping the reduced axis at size 1.
    LogSumExp { axis: usize },
    /// Concatenation of the inputs along an axis.
    Concat { axis: usize },
    /// Contiguous sub-range along an axis.
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Multiplication by a compile-time scalar.
    Scale { factor: f64 },
    /// Elementwise max(x, bound).
    ClampMin { bound: f64 },
    /// Elementwise min(x, bound).
    ClampMax { bound: f64 },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Tanh => "tanh",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LogSumExp { .. } => "logsumexp",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Scale { .. } => "scale",
            OpKind::ClampMin { .. } => "clamp_min",
            OpKind::ClampMax { .. } => "clamp_max",
        }
    }
}

struct Node {
    value: DenseTensor,
    /// Recorded operation; `None` for leaves (constants and parameters).
    op: Option<(OpKind, Vec<NodeId>)>,
    is_param: bool,
}

/// Gradients of a scalar with respect to tracked parameters, keyed by node id.
///
/// Each gradient has the same shape as its parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, DenseTensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseTensor> {
        self.map.get(&id)
    }

    /// Gradient for a parameter id; panics if the id was not a parameter.
    pub fn expect(&self, id: NodeId) -> &DenseTensor {
        self.map.get(&id).expect("node id is not a tracked parameter")
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &DenseTensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A Wengert tape: values plus recorded operations in topological order.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Record a constant leaf. Constants never receive gradient entries.
    pub fn constant(&mut self, value: DenseTensor) -> NodeId {
        self.push(value, None, false)
    }

    /// Record a parameter leaf; `backward` reports its gradient.
    pub fn param(&mut self, value: DenseTensor) -> NodeId {
        self.push(value, None, true)
    }

    fn push(&mut self, value: DenseTensor, op: Option<(OpKind, Vec<NodeId>)>, is_param: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, is_param });
        id
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.nodes[id].value
    }

    /// Forward value of a 1-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.numel(), 1, "scalar_value on a non-scalar node");
        v.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Forward dispatch ─────────────────────────────────────────────

    /// Evaluate `kind` on the given operands and record the result.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let value = self.eval(kind, inputs)?;
        if !value.is_all_finite() {
            return Err(Error::Domain {
                op: kind.name(),
                detail: "result contains NaN or Inf".into(),
            });
        }
        Ok(self.push(value, Some((kind, inputs.to_vec())), false))
    }

    fn arity(&self, kind: OpKind, inputs: &[NodeId], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::ShapeMismatch {
                op: kind.name(),
                detail: format!("expected {n} operands, got {}", inputs.len()),
            });
        }
        Ok(())
    }

    fn eval(&self, kind: OpKind, inputs: &[NodeId]) -> Result<DenseTensor> {
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                self.arity(kind, inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        op: kind.name(),
                        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                    });
                }
                let data = match kind {
                    OpKind::Add => a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                    OpKind::Sub => a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
                    OpKind::Mul => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                    OpKind::Div => {
                        if b.data().iter().any(|&y| y == 0.0) {
                            return Err(Error::Domain {
                                op: "div",
                                detail: "division by zero".into(),
                            });
                        }
                        a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect()
                    }
                    _ => unreachable!(),
                };
                DenseTensor::from_vec(a.shape().to_vec(), data)
            }
            OpKind::Matmul => {
                self.arity(kind, inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                matmul(a, b)
            }
            OpKind::Transpose => {
                self.arity(kind, inputs, 1)?;
                Ok(transpose(self.value(inputs[0])))
            }
            OpKind::Exp => self.unary(kind, inputs, |x| x.exp()),
            OpKind::Log => {
                self.arity(kind, inputs, 1)?;
                let a = self.value(inputs[0]);
                if a.data().iter().any(|&x| x < 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: "negative input".into(),
                    });
                }
                let data = a.data().iter().map(|&x| x.max(LOG_FLOOR).ln()).collect();
                DenseTensor::from_vec(a.shape().to_vec(), data)
            }
            OpKind::Sqrt => {
                self.arity(kind, inputs, 1)?;
                let a = self.value(inputs[0]);
                if a.data().iter().any(|&x| x < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: "negative input".into(),
                    });
                }
                let data = a.data().iter().map(|&x| x.sqrt()).collect();
                DenseTensor::from_vec(a.shape().to_vec(), data)
            }
            OpKind::Tanh => self.unary(kind, inputs, |x| x.tanh()),
            OpKind::Sum => {
                self.arity(kind, inputs, 1)?;
                Ok(DenseTensor::scalar(self.value(inputs[0]).total()))
            }
            OpKind::Mean => {
                self.arity(kind, inputs, 1)?;
                let a = self.value(inputs[0]);
                Ok(DenseTensor::scalar(a.total() / a.numel() as f64))
            }
            OpKind::Softmax { axis } => {
                self.arity(kind, inputs, 1)?;
                softmax(self.value(inputs[0]), axis)
            }
            OpKind::LogSumExp { axis } => {
                self.arity(kind, inputs, 1)?;
                logsumexp(self.value(inputs[0]), axis)
            }
            OpKind::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        detail: "no operands".into(),
                    });
                }
                let parts: Vec<&DenseTensor> = inputs.iter().map(|&i| self.value(i)).collect();
                concat(&parts, axis)
            }
            OpKind::Slice { axis, start, len } => {
                self.arity(kind, inputs, 1)?;
                slice(self.value(inputs[0]), axis, start, len)
            }
            OpKind::Scale { factor } => self.unary(kind, inputs, |x| factor * x),
            OpKind::ClampMin { bound } => self.unary(kind, inputs, |x| x.max(bound)),
            OpKind::ClampMax { bound } => self.unary(kind, inputs, |x| x.min(bound)),
        }
    }

    fn unary(&self, kind: OpKind, inputs: &[NodeId], f: impl Fn(f64) -> f64) -> Result<DenseTensor> {
        self.arity(kind, inputs, 1)?;
        let a = self.value(inputs[0]);
        let data = a.data().iter().map(|&x| f(x)).collect();
        DenseTensor::from_vec(a.shape().to_vec(), data)
    }

    // ── Convenience wrappers ─────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Matmul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Transpose, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Log, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sqrt, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Tanh, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mean, &[a])
    }
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Softmax { axis }, &[a])
    }
    pub fn logsumexp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.forward_op(OpKind::LogSumExp { axis }, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Slice { axis, start, len }, &[a])
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.forward_op(OpKind::Scale { factor }, &[a])
    }
    pub fn clamp_min(&mut self, a: NodeId, bound: f64) -> Result<NodeId> {
        self.forward_op(OpKind::ClampMin { bound }, &[a])
    }
    pub fn clamp_max(&mut self, a: NodeId, bound: f64) -> Result<NodeId> {
        self.forward_op(OpKind::ClampMax { bound }, &[a])
    }

    /// Row i of a rank-2 node as a 1-by-cols node.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.slice(a, 0, i, 1)
    }

    /// Diagonal entry (i, i) of a rank-2 node as a 1x1 node.
    pub fn diag_entry(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let r = self.slice(a, 0, i, 1)?;
        self.slice(r, 1, i, 1)
    }

    /// Broadcast a column vector [n,1] across m columns via matmul with ones.
    pub fn broadcast_cols(&mut self, col: NodeId, m: usize) -> Result<NodeId> {
        let ones = self.constant(DenseTensor::filled(&[1, m], 1.0));
        self.matmul(col, ones)
    }

    /// Broadcast a row vector [1,m] across n rows via matmul with ones.
    pub fn broadcast_rows(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let ones = self.constant(DenseTensor::filled(&[n, 1], 1.0));
        self.matmul(ones, row)
    }

    /// Broadcast a 1x1 scalar node to an n-by-m node.
    pub fn broadcast_scalar(&mut self, s: NodeId, n: usize, m: usize) -> Result<NodeId> {
        let as_row = self.broadcast_cols(s, m)?;
        self.broadcast_rows(as_row, n)
    }

    // ── Backward pass ────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss w.r.t. every parameter node.
    ///
    /// Gradient accumulation is additive over fan-out. The tape itself is
    /// left intact and reusable.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.value(loss).numel(),
            });
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(grad) = adjoint[id].take() else {
                continue;
            };
            let keep = self.nodes[id].is_param || self.nodes[id].op.is_some();
            if let Some((kind, ref inputs)) = self.nodes[id].op {
                let inputs = inputs.clone();
                self.backward_op(kind, &inputs, id, &grad, &mut adjoint);
            }
            if keep && self.nodes[id].is_param {
                adjoint[id] = Some(grad);
            }
        }

        let mut map = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let g = adjoint[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                map.insert(
                    id,
                    DenseTensor::from_vec(node.value.shape().to_vec(), g)
                        .expect("gradient shape follows parameter shape"),
                );
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(adjoint: &mut [Option<Vec<f64>>], id: NodeId, numel: usize, add: impl Fn(&mut [f64])) {
        let slot = adjoint[id].get_or_insert_with(|| vec![0.0; numel]);
        add(slot);
    }

    fn backward_op(
        &self,
        kind: OpKind,
        inputs: &[NodeId],
        out: NodeId,
        grad: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        match kind {
            OpKind::Add => {
                for &i in inputs {
                    Self::accumulate(adjoint, i, grad.len(), |s| {
                        for (si, gi) in s.iter_mut().zip(grad) {
                            *si += gi;
                        }
                    });
                }
            }
            OpKind::Sub => {
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(grad) {
                        *si += gi;
                    }
                });
                Self::accumulate(adjoint, inputs[1], grad.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(grad) {
                        *si -= gi;
                    }
                });
            }
            OpKind::Mul => {
                let a = self.value(inputs[0]).data();
                let b = self.value(inputs[1]).data();
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += grad[i] * b[i];
                    }
                });
                Self::accumulate(adjoint, inputs[1], grad.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += grad[i] * a[i];
                    }
                });
            }
            OpKind::Div => {
                let a = self.value(inputs[0]).data();
                let b = self.value(inputs[1]).data();
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += grad[i] / b[i];
                    }
                });
                Self::accumulate(adjoint, inputs[1], grad.len(), |s| {
                    for i in 0..s.len() {
                        s[i] -= grad[i] * a[i] / (b[i] * b[i]);
                    }
                });
            }
            OpKind::Matmul => {
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                // dA = g @ B^T
                Self::accumulate(adjoint, inputs[0], m * k, |s| {
                    for i in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for l in 0..n {
                                acc += grad[i * n + l] * b.data()[j * n + l];
                            }
                            s[i * k + j] += acc;
                        }
                    }
                });
                // dB = A^T @ g
                Self::accumulate(adjoint, inputs[1], k * n, |s| {
                    for i in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for l in 0..m {
                                acc += a.data()[l * k + i] * grad[l * n + j];
                            }
                            s[i * n + j] += acc;
                        }
                    }
                });
            }
            OpKind::Transpose => {
                let a = self.value(inputs[0]);
                let (r, c) = (a.rows(), a.cols());
                Self::accumulate(adjoint, inputs[0], r * c, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += grad[j * r + i];
                        }
                    }
                });
            }
            OpKind::Exp => {
                let y = self.value(out).data();
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += grad[i] * y[i];
                    }
                });
            }
            OpKind::Log => {
                let a = self.value(inputs[0]).data();
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += grad[i] / a[i].max(LOG_FLOOR);
                    }
                });
            }
            OpKind::Sqrt => {
                let y = self.value(out).data();
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        // Zero-distance pairs contribute no gradient.
                        if y[i] > 1e-150 {
                            s[i] += grad[i] / (2.0 * y[i]);
                        }
                    }
                });
            }
            OpKind::Tanh => {
                let y = self.value(out).data();
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += grad[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            OpKind::Sum => {
                let n = self.value(inputs[0]).numel();
                Self::accumulate(adjoint, inputs[0], n, |s| {
                    for si in s.iter_mut() {
                        *si += grad[0];
                    }
                });
            }
            OpKind::Mean => {
                let n = self.value(inputs[0]).numel();
                let g = grad[0] / n as f64;
                Self::accumulate(adjoint, inputs[0], n, |s| {
                    for si in s.iter_mut() {
                        *si += g;
                    }
                });
            }
            OpKind::Softmax { axis } => {
                let y = self.value(out);
                let (r, c) = (y.rows(), y.cols());
                Self::accumulate(adjoint, inputs[0], r * c, |s| {
                    // d x_j = y_j * (g_j - sum_k g_k y_k) along each line.
                    let lines = if axis == 1 { r } else { c };
                    let len = if axis == 1 { c } else { r };
                    for line in 0..lines {
                        let idx = |t: usize| {
                            if axis == 1 {
                                line * c + t
                            } else {
                                t * c + line
                            }
                        };
                        let mut dot = 0.0;
                        for t in 0..len {
                            dot += grad[idx(t)] * y.data()[idx(t)];
                        }
                        for t in 0..len {
                            s[idx(t)] += y.data()[idx(t)] * (grad[idx(t)] - dot);
                        }
                    }
                });
            }
            OpKind::LogSumExp { axis } => {
                let a = self.value(inputs[0]);
                let y = self.value(out);
                let (r, c) = (a.rows(), a.cols());
                Self::accumulate(adjoint, inputs[0], r * c, |s| {
                    // d x_ij = g_line * exp(x_ij - lse_line) = g_line * softmax(x)_ij
                    for i in 0..r {
                        for j in 0..c {
                            let (line_val, g) = if axis == 1 {
                                (y.data()[i], grad[i])
                            } else {
                                (y.data()[j], grad[j])
                            };
                            let w = (a.data()[i * c + j] - line_val).exp();
                            s[i * c + j] += g * w;
                        }
                    }
                });
            }
            OpKind::Concat { axis } => {
                let mut offset = 0;
                let out_t = self.value(out);
                let out_cols = out_t.cols();
                for &inp in inputs {
                    let part = self.value(inp);
                    let (pr, pc) = (part.rows(), part.cols());
                    let off = offset;
                    Self::accumulate(adjoint, inp, pr * pc, |s| {
                        for i in 0..pr {
                            for j in 0..pc {
                                let src = if axis == 0 {
                                    (off + i) * out_cols + j
                                } else {
                                    i * out_cols + (off + j)
                                };
                                s[i * pc + j] += grad[src];
                            }
                        }
                    });
                    offset += if axis == 0 { pr } else { pc };
                }
            }
            OpKind::Slice { axis, start, .. } => {
                let a = self.value(inputs[0]);
                let (r, c) = (a.rows(), a.cols());
                let o = self.value(out);
                let (gr, gc) = (o.rows(), o.cols());
                Self::accumulate(adjoint, inputs[0], r * c, |s| {
                    for i in 0..gr {
                        for j in 0..gc {
                            let dst = if axis == 0 {
                                (start + i) * c + j
                            } else {
                                i * c + (start + j)
                            };
                            s[dst] += grad[i * gc + j];
                        }
                    }
                });
            }
            OpKind::Scale { factor } => {
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += factor * grad[i];
                    }
                });
            }
            OpKind::ClampMin { bound } => {
                let a = self.value(inputs[0]).data();
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        if a[i] > bound {
                            s[i] += grad[i];
                        }
                    }
                });
            }
            OpKind::ClampMax { bound } => {
                let a = self.value(inputs[0]).data();
                Self::accumulate(adjoint, inputs[0], grad.len(), |s| {
                    for i in 0..s.len() {
                        if a[i] < bound {
                            s[i] += grad[i];
                        }
                    }
                });
            }
        }
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

fn require_rank2(t: &DenseTensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("rank-2 tensor required, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (m, k) = require_rank2(a, "matmul")?;
    let (k2, n) = require_rank2(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a.data()[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data()[l * n + j];
            }
        }
    }
    DenseTensor::from_vec(vec![m, n], out)
}

fn transpose(a: &DenseTensor) -> DenseTensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    DenseTensor::from_vec(vec![c, r], out).expect("transpose preserves size")
}

fn check_axis(axis: usize, op: &'static str) -> Result<()> {
    if axis > 1 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("axis {axis} out of range for rank-2 tensors"),
        });
    }
    Ok(())
}

fn softmax(a: &DenseTensor, axis: usize) -> Result<DenseTensor> {
    check_axis(axis, "softmax")?;
    let (r, c) = require_rank2(a, "softmax")?;
    let mut out = vec![0.0; r * c];
    let lines = if axis == 1 { r } else { c };
    let len = if axis == 1 { c } else { r };
    for line in 0..lines {
        let idx = |t: usize| if axis == 1 { line * c + t } else { t * c + line };
        let mut mx = f64::NEG_INFINITY;
        for t in 0..len {
            mx = mx.max(a.data()[idx(t)]);
        }
        let mut total = 0.0;
        for t in 0..len {
            let e = (a.data()[idx(t)] - mx).exp();
            out[idx(t)] = e;
            total += e;
        }
        for t in 0..len {
            out[idx(t)] /= total;
        }
    }
    DenseTensor::from_vec(vec![r, c], out)
}

fn logsumexp(a: &DenseTensor, axis: usize) -> Result<DenseTensor> {
    check_axis(axis, "logsumexp")?;
    let (r, c) = require_rank2(a, "logsumexp")?;
    let (out_shape, lines, len): (Vec<usize>, usize, usize) = if axis == 1 {
        (vec![r, 1], r, c)
    } else {
        (vec![1, c], c, r)
    };
    let mut out = vec![0.0; lines];
    for line in 0..lines {
        let idx = |t: usize| if axis == 1 { line * c + t } else { t * c + line };
        let mut mx = f64::NEG_INFINITY;
        for t in 0..len {
            mx = mx.max(a.data()[idx(t)]);
        }
        if !mx.is_finite() {
            // All entries -inf: the log-sum is -inf; surfaced as the floor log.
            out[line] = mx;
            continue;
        }
        let mut total = 0.0;
        for t in 0..len {
            total += (a.data()[idx(t)] - mx).exp();
        }
        out[line] = mx + total.ln();
    }
    DenseTensor::from_vec(out_shape, out)
}

fn concat(parts: &[&DenseTensor], axis: usize) -> Result<DenseTensor> {
    check_axis(axis, "concat")?;
    let (r0, c0) = require_rank2(parts[0], "concat")?;
    let mut rows = r0;
    let mut cols = c0;
    for p in &parts[1..] {
        let (r, c) = require_rank2(p, "concat")?;
        if axis == 0 {
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("column count {c} differs from {c0}"),
                });
            }
            rows += r;
        } else {
            if r != r0 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("row count {r} differs from {r0}"),
                });
            }
            cols += c;
        }
    }
    let mut out = vec![0.0; rows * cols];
    let mut offset = 0;
    for p in parts {
        let (pr, pc) = (p.rows(), p.cols());
        for i in 0..pr {
            for j in 0..pc {
                let dst = if axis == 0 {
                    (offset + i) * cols + j
                } else {
                    i * cols + (offset + j)
                };
                out[dst] = p.data()[i * pc + j];
            }
        }
        offset += if axis == 0 { pr } else { pc };
    }
    DenseTensor::from_vec(vec![rows, cols], out)
}

fn slice(a: &DenseTensor, axis: usize, start: usize, len: usize) -> Result<DenseTensor> {
    check_axis(axis, "slice")?;
    let (r, c) = require_rank2(a, "slice")?;
    let bound = if axis == 0 { r } else { c };
    if len == 0 || start + len > bound {
        return Err(Error::IndexOutOfRange {
            op: "slice",
            detail: format!("range {start}..{} on axis {axis} of size {bound}", start + len),
        });
    }
    let (or, oc) = if axis == 0 { (len, c) } else { (r, len) };
    let mut out = vec![0.0; or * oc];
    for i in 0..or {
        for j in 0..oc {
            let src = if axis == 0 {
                (start + i) * c + j
            } else {
                i * c + (start + j)
            };
            out[i * oc + j] = a.data()[src];
        }
    }
    DenseTensor::from_vec(vec![or, oc], out)
}
