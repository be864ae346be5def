//! Operation tape: forward recording and reverse-mode gradient replay.

use std::rc::Rc;

use super::{
    broadcast_data, broadcast_shape, matmul_nn, matmul_nt, matmul_tn, numel, reduce_to_shape,
    strides, Parameter, Tensor,
};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    /// Constant or input; gradients stop here (but remain queryable).
    Leaf,
    /// Mounted parameter; its adjoint is accumulated into the parameter.
    Param(Parameter),
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScalarMul { a: NodeId, k: f64 },
    ScalarAdd { a: NodeId },
    Sigmoid { a: NodeId },
    Relu { a: NodeId },
    Abs { a: NodeId },
    Log { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    MeanAxes { a: NodeId, axes: Vec<usize> },
    SumAll { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Reshape { a: NodeId },
    Broadcast { a: NodeId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
}

/// Append-only record of the forward pass. Inputs of every node precede it;
/// backward may run at most once per tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Tensor {
        let rc = Rc::new(value);
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape: shape.clone(), value: Rc::clone(&rc) });
        Tensor::from_parts(rc, shape, Some(id))
    }

    /// Mount an existing tensor as a tracked leaf (its gradient becomes
    /// queryable via [`Tape::grad_of`] after backward).
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let rc = t.data_rc();
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, shape: t.shape().to_vec(), value: Rc::clone(&rc) });
        Tensor::from_parts(rc, t.shape().to_vec(), Some(id))
    }

    /// Mount a parameter; backward accumulates dLoss/dParam into it.
    pub fn param(&mut self, p: &Parameter) -> Tensor {
        let value = p.data_clone();
        let shape = p.shape();
        let rc = Rc::new(value);
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Param(p.clone()), shape: shape.clone(), value: Rc::clone(&rc) });
        Tensor::from_parts(rc, shape, Some(id))
    }

    /// Node id of `t` on this tape, registering untracked operands as leaves.
    fn operand(&mut self, t: &Tensor) -> NodeId {
        match t.node() {
            Some(id) => {
                assert!(id < self.nodes.len(), "tensor from a different tape");
                id
            }
            None => self.leaf(t).node().unwrap(),
        }
    }

    fn any_tracked(inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.requires_grad())
    }

    // ── Forward primitives ──────────────────────────────────────────

    /// 2-D matrix product `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(a.data(), b.data(), m, k, n, &mut out);
        if Self::any_tracked(&[a, b]) {
            let (ia, ib) = (self.operand(a), self.operand(b));
            Ok(self.push(Op::MatMul { a: ia, b: ib, m, k, n }, vec![m, n], out))
        } else {
            Tensor::from_vec(out, &[m, n])
        }
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        let shape = broadcast_shape(op_name, a.shape(), b.shape())?;
        let out = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>()
        } else {
            let ax = broadcast_data(a.data(), a.shape(), &shape);
            let bx = broadcast_data(b.data(), b.shape(), &shape);
            ax.iter().zip(&bx).map(|(&x, &y)| f(x, y)).collect()
        };
        if Self::any_tracked(&[a, b]) {
            let (ia, ib) = (self.operand(a), self.operand(b));
            Ok(self.push(make(ia, ib), shape, out))
        } else {
            Tensor::from_vec(out, &shape)
        }
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        if a.requires_grad() {
            let ia = self.operand(a);
            self.push(make(ia), a.shape().to_vec(), out)
        } else {
            Tensor::from_parts(Rc::new(out), a.shape().to_vec(), None)
        }
    }

    pub fn scalar_mul(&mut self, a: &Tensor, k: f64) -> Tensor {
        self.unary(a, |x| x * k, |a| Op::ScalarMul { a, k })
    }

    pub fn scalar_add(&mut self, a: &Tensor, k: f64) -> Tensor {
        self.unary(a, |x| x + k, |a| Op::ScalarAdd { a })
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |a| Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, |a| Op::Relu { a })
    }

    pub fn abs(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::abs, |a| Op::Abs { a })
    }

    /// Natural log. The caller is responsible for keeping inputs positive
    /// (the BCE path clamps first).
    pub fn log(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::ln, |a| Op::Log { a })
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the band, zero outside.
    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Tensor {
        self.unary(a, |x| x.clamp(lo, hi), |a| Op::Clamp { a, lo, hi })
    }

    /// Mean over the given axes; those axes are removed from the shape.
    pub fn mean_axes(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let in_shape = a.shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&ax| ax >= in_shape.len()) {
            return Err(Error::InvalidShape {
                op: "mean_axes",
                shape: in_shape,
                reason: format!("axis out of range: {:?}", axes),
            });
        }
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        let in_strides = strides(&in_shape);
        let out_strides = strides(&out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        for (flat, &v) in a.data().iter().enumerate() {
            let mut dst = 0usize;
            let mut oi = 0usize;
            for d in 0..in_shape.len() {
                if !axes.contains(&d) {
                    let coord = (flat / in_strides[d]) % in_shape[d];
                    dst += coord * out_strides[oi];
                    oi += 1;
                }
            }
            out[dst] += v;
        }
        let inv = 1.0 / count as f64;
        for v in &mut out {
            *v *= inv;
        }
        if a.requires_grad() {
            let ia = self.operand(a);
            Ok(self.push(Op::MeanAxes { a: ia, axes }, out_shape, out))
        } else {
            Tensor::from_vec(out, &out_shape)
        }
    }

    /// Full reduction to a scalar (shape `[]`).
    pub fn sum_all(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        if a.requires_grad() {
            let ia = self.operand(a);
            self.push(Op::SumAll { a: ia }, vec![], vec![s])
        } else {
            Tensor::scalar(s)
        }
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: parts[0].shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        for p in parts {
            if p.shape().len() != rank
                || (0..rank).any(|d| d != axis && p.shape()[d] != parts[0].shape()[d])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        let mut offset = 0usize;
        let total_axis = out_shape[axis];
        for p in parts {
            let alen = p.shape()[axis];
            for o in 0..outer {
                let src = &p.data()[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = (o * total_axis + offset) * inner;
                out[dst_start..dst_start + alen * inner].copy_from_slice(src);
            }
            offset += alen;
        }
        if parts.iter().any(|p| p.requires_grad()) {
            let ids: Vec<NodeId> = parts.iter().map(|p| self.operand(p)).collect();
            Ok(self.push(Op::Concat { parts: ids, axis }, out_shape, out))
        } else {
            Tensor::from_vec(out, &out_shape)
        }
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = a.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: shape.to_vec(),
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        for o in 0..outer {
            let src_start = (o * shape[axis] + start) * inner;
            let dst_start = o * len * inner;
            out[dst_start..dst_start + len * inner]
                .copy_from_slice(&a.data()[src_start..src_start + len * inner]);
        }
        if a.requires_grad() {
            let ia = self.operand(a);
            Ok(self.push(Op::Slice { a: ia, axis, start }, out_shape, out))
        } else {
            Tensor::from_vec(out, &out_shape)
        }
    }

    pub fn reshape(&mut self, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != a.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        if a.requires_grad() {
            let ia = self.operand(a);
            let value = a.data().to_vec();
            Ok(self.push(Op::Reshape { a: ia }, new_shape.to_vec(), value))
        } else {
            Ok(Tensor::from_parts(a.data_rc(), new_shape.to_vec(), None))
        }
    }

    /// Explicit broadcast to a target shape.
    pub fn broadcast_to(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let merged = broadcast_shape("broadcast_to", a.shape(), shape)?;
        if merged != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = broadcast_data(a.data(), a.shape(), shape);
        if a.requires_grad() {
            let ia = self.operand(a);
            Ok(self.push(Op::Broadcast { a: ia }, shape.to_vec(), out))
        } else {
            Tensor::from_vec(out, shape)
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Parameter gradients accumulate;
    /// adjoints of every node stay queryable via [`Tape::grad_of`].
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let root = loss.node().ok_or(Error::NonScalarLoss { shape: loss.shape().to_vec() })?;
        self.consumed = true;
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[root] = Some(vec![1.0; self.nodes[root].value.len()]);

        for id in (0..n).rev() {
            let Some(out_grad) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    adj[id] = Some(out_grad);
                    continue;
                }
                Op::Param(p) => {
                    p.accumulate_grad(&out_grad);
                    adj[id] = Some(out_grad);
                    continue;
                }
                Op::MatMul { a, b, m, k, n: nn } => {
                    let (a, b, m, k, nn) = (*a, *b, *m, *k, *nn);
                    let mut ga = vec![0.0; m * k];
                    matmul_nt(&out_grad, &self.nodes[b].value, m, nn, k, &mut ga);
                    let mut gb = vec![0.0; k * nn];
                    matmul_tn(&self.nodes[a].value, &out_grad, m, k, nn, &mut gb);
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    let out_shape = self.nodes[id].shape.clone();
                    let ga = reduce_to_shape(&out_grad, &out_shape, &self.nodes[a].shape.clone());
                    let gb = reduce_to_shape(&out_grad, &out_shape, &self.nodes[b].shape.clone());
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    let out_shape = self.nodes[id].shape.clone();
                    let ga = reduce_to_shape(&out_grad, &out_shape, &self.nodes[a].shape.clone());
                    let mut neg = out_grad.clone();
                    for v in &mut neg {
                        *v = -*v;
                    }
                    let gb = reduce_to_shape(&neg, &out_shape, &self.nodes[b].shape.clone());
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let out_shape = self.nodes[id].shape.clone();
                    let av = broadcast_data(&self.nodes[a].value, &self.nodes[a].shape, &out_shape);
                    let bv = broadcast_data(&self.nodes[b].value, &self.nodes[b].shape, &out_shape);
                    let ga_full: Vec<f64> = out_grad.iter().zip(&bv).map(|(&g, &y)| g * y).collect();
                    let gb_full: Vec<f64> = out_grad.iter().zip(&av).map(|(&g, &x)| g * x).collect();
                    let ga = reduce_to_shape(&ga_full, &out_shape, &self.nodes[a].shape.clone());
                    let gb = reduce_to_shape(&gb_full, &out_shape, &self.nodes[b].shape.clone());
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::ScalarMul { a, k } => {
                    let (a, k) = (*a, *k);
                    let g: Vec<f64> = out_grad.iter().map(|&v| v * k).collect();
                    self.accumulate(&mut adj, a, g);
                }
                Op::ScalarAdd { a } => {
                    let a = *a;
                    self.accumulate(&mut adj, a, out_grad.clone());
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let y = &self.nodes[id].value;
                    let g: Vec<f64> =
                        out_grad.iter().zip(y.iter()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                    self.accumulate(&mut adj, a, g);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let x = Rc::clone(&self.nodes[a].value);
                    let g: Vec<f64> = out_grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut adj, a, g);
                }
                Op::Abs { a } => {
                    let a = *a;
                    let x = Rc::clone(&self.nodes[a].value);
                    let g: Vec<f64> = out_grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    self.accumulate(&mut adj, a, g);
                }
                Op::Log { a } => {
                    let a = *a;
                    let x = Rc::clone(&self.nodes[a].value);
                    let g: Vec<f64> = out_grad.iter().zip(x.iter()).map(|(&g, &x)| g / x).collect();
                    self.accumulate(&mut adj, a, g);
                }
                Op::Clamp { a, lo, hi } => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let x = Rc::clone(&self.nodes[a].value);
                    let g: Vec<f64> = out_grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x >= lo && x <= hi { g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut adj, a, g);
                }
                Op::MeanAxes { a, axes } => {
                    let a = *a;
                    let axes = axes.clone();
                    let in_shape = self.nodes[a].shape.clone();
                    let out_shape = self.nodes[id].shape.clone();
                    let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
                    let inv = 1.0 / count as f64;
                    let in_strides = strides(&in_shape);
                    let out_strides = strides(&out_shape);
                    let mut g = vec![0.0; numel(&in_shape)];
                    for (flat, slot) in g.iter_mut().enumerate() {
                        let mut dst = 0usize;
                        let mut oi = 0usize;
                        for d in 0..in_shape.len() {
                            if !axes.contains(&d) {
                                let coord = (flat / in_strides[d]) % in_shape[d];
                                dst += coord * out_strides[oi];
                                oi += 1;
                            }
                        }
                        *slot = out_grad[dst] * inv;
                    }
                    self.accumulate(&mut adj, a, g);
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let g = vec![out_grad[0]; self.nodes[a].value.len()];
                    self.accumulate(&mut adj, a, g);
                }
                Op::Concat { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let out_shape = self.nodes[id].shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total_axis = out_shape[axis];
                    let mut offset = 0usize;
                    for part in parts {
                        let alen = self.nodes[part].shape[axis];
                        let mut g = vec![0.0; alen * outer * inner];
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            let dst_start = o * alen * inner;
                            g[dst_start..dst_start + alen * inner]
                                .copy_from_slice(&out_grad[src_start..src_start + alen * inner]);
                        }
                        self.accumulate(&mut adj, part, g);
                        offset += alen;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let (a, axis, start) = (*a, *axis, *start);
                    let in_shape = self.nodes[a].shape.clone();
                    let out_shape = self.nodes[id].shape.clone();
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let len = out_shape[axis];
                    let mut g = vec![0.0; numel(&in_shape)];
                    for o in 0..outer {
                        let dst_start = (o * in_shape[axis] + start) * inner;
                        let src_start = o * len * inner;
                        g[dst_start..dst_start + len * inner]
                            .copy_from_slice(&out_grad[src_start..src_start + len * inner]);
                    }
                    self.accumulate(&mut adj, a, g);
                }
                Op::Reshape { a } => {
                    let a = *a;
                    self.accumulate(&mut adj, a, out_grad.clone());
                }
                Op::Broadcast { a } => {
                    let a = *a;
                    let g = reduce_to_shape(
                        &out_grad,
                        &self.nodes[id].shape.clone(),
                        &self.nodes[a].shape.clone(),
                    );
                    self.accumulate(&mut adj, a, g);
                }
            }
            adj[id] = Some(out_grad);
        }
        self.adjoints = adj;
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
        match &mut adj[id] {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Adjoint of a tracked tensor after backward, as an untracked tensor.
    pub fn grad_of(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node()?;
        let g = self.adjoints.get(id)?.clone()?;
        Some(Tensor::from_parts(Rc::new(g), self.nodes[id].shape.clone(), None))
    }

    fn input_ids(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::ScalarMul { a, .. }
            | Op::ScalarAdd { a }
            | Op::Sigmoid { a }
            | Op::Relu { a }
            | Op::Abs { a }
            | Op::Log { a }
            | Op::Clamp { a, .. }
            | Op::MeanAxes { a, .. }
            | Op::SumAll { a }
            | Op::Slice { a, .. }
            | Op::Reshape { a }
            | Op::Broadcast { a } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    /// True if `source` is reachable from `target` walking input edges,
    /// without passing through any node in `cut`. Used by structural tests
    /// on graph wiring.
    pub fn reaches_without(&self, target: NodeId, source: NodeId, cut: &[NodeId]) -> bool {
        let mut stack = vec![target];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(id) = stack.pop() {
            if cut.contains(&id) {
                continue;
            }
            if id == source {
                return true;
            }
            if seen[id] {
                continue;
            }
            seen[id] = true;
            stack.extend(self.input_ids(id));
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![1.0, 1.0], &[2, 1]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
        assert_eq!(c.shape(), &[2, 1]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[3]);
        let y = tape.sigmoid(&x);
        assert_eq!(y.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn mean_axes_brute_force() {
        // mean over the first two axes of [4,4,8]: loop oracle.
        let shape = [4usize, 4, 8];
        let data: Vec<f64> = (0..4 * 4 * 8).map(|i| (i as f64) * 0.37 - 20.0).collect();
        let mut expect = vec![0.0; 8];
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..8 {
                    expect[c] += data[(i * 4 + j) * 8 + c];
                }
            }
        }
        for v in &mut expect {
            *v /= 16.0;
        }
        let mut tape = Tape::new();
        let t = Tensor::from_vec(data, &shape).unwrap();
        let m = tape.mean_axes(&t, &[0, 1]).unwrap();
        assert_eq!(m.shape(), &[8]);
        for (a, e) in m.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_of_square_sum() {
        // loss = sum(x∘x), x=[1,2,3] → grad x = [2,4,6]
        let mut tape = Tape::new();
        let x0 = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let x = tape.leaf(&x0);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_scaled_sigmoid() {
        // loss = sigmoid(w)·c with w=0, c=4 → grad w = σ'(0)·4 = 1.0
        let mut tape = Tape::new();
        let w = Parameter::new("w", &[], vec![0.0]);
        let wt = tape.param(&w);
        let s = tape.sigmoid(&wt);
        let loss = tape.scalar_mul(&s, 4.0);
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad_clone().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_and_double_call() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let xt = tape.leaf(&x);
        let y = tape.relu(&xt);
        assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss { .. })));
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        let err = tape.backward(&loss);
        assert!(matches!(err, Err(Error::TapeConsumed)));
    }

    #[test]
    fn detach_stops_gradient() {
        // loss = sum(detach(x)∘y) → grad x absent, grad y = x
        let mut tape = Tape::new();
        let x0 = Tensor::from_vec(vec![2.0, 3.0], &[2]).unwrap();
        let y0 = Tensor::from_vec(vec![5.0, 7.0], &[2]).unwrap();
        let x = tape.leaf(&x0);
        let y = tape.leaf(&y0);
        let xd = x.detach();
        assert_eq!(xd.data(), x.data());
        let prod = tape.mul(&xd, &y).unwrap();
        let loss = tape.sum_all(&prod);
        tape.backward(&loss).unwrap();
        assert!(tape.grad_of(&x).is_none());
        assert_eq!(tape.grad_of(&y).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn detach_of_untracked_is_identity() {
        let t = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let d = t.detach();
        assert_eq!(d.data(), t.data());
        assert!(!d.requires_grad());
    }

    #[test]
    fn grad_accumulates_across_tapes() {
        let p = Parameter::new("p", &[2], vec![1.0, 2.0]);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&p);
            let sq = tape.mul(&x, &x).unwrap();
            let loss = tape.sum_all(&sq);
            tape.backward(&loss).unwrap();
        }
        // each pass adds 2x = [2,4]
        assert_eq!(p.grad_clone().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn detached_subtree_matches_constant_replacement() {
        let x0 = Tensor::from_vec(vec![0.3, -0.8], &[2]).unwrap();
        let w = Parameter::new("w", &[2], vec![0.4, 0.9]);

        // graph A: loss = sum(w ∘ detach(sigmoid(w ∘ x)))
        let mut ta = Tape::new();
        let wa = ta.param(&w);
        let inner = ta.mul(&wa, &Tensor::from_vec(x0.data().to_vec(), &[2]).unwrap()).unwrap();
        let sig = ta.sigmoid(&inner);
        let det = sig.detach();
        let prod = ta.mul(&wa, &det).unwrap();
        let loss_a = ta.sum_all(&prod);
        ta.backward(&loss_a).unwrap();
        let ga = w.grad_clone().unwrap();
        w.zero_grad();

        // graph B: same, detached subtree replaced by a constant
        let mut tb = Tape::new();
        let wb = tb.param(&w);
        let constant = Tensor::from_vec(det.data().to_vec(), &[2]).unwrap();
        let prod_b = tb.mul(&wb, &constant).unwrap();
        let loss_b = tb.sum_all(&prod_b);
        tb.backward(&loss_b).unwrap();
        let gb = w.grad_clone().unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn concat_slice_roundtrip_grad() {
        let mut tape = Tape::new();
        let a0 = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b0 = Tensor::from_vec(vec![5.0, 6.0], &[2, 1]).unwrap();
        let a = tape.leaf(&a0);
        let b = tape.leaf(&b0);
        let cat = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let sl = tape.slice(&cat, 1, 2, 1).unwrap();
        assert_eq!(sl.data(), &[5.0, 6.0]);
        let loss = tape.sum_all(&sl);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&a).unwrap().data(), &[0.0; 4]);
        assert_eq!(tape.grad_of(&b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was: {msg}");
    }

    #[test]
    fn reachability_helper() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap());
        let mid = tape.relu(&x);
        let out = tape.sum_all(&mid);
        let (xs, ms, os) = (x.node().unwrap(), mid.node().unwrap(), out.node().unwrap());
        assert!(tape.reaches_without(os, xs, &[]));
        assert!(!tape.reaches_without(os, xs, &[ms]));
    }
}
