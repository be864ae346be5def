//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Everything trainable in this crate runs on this substrate: a plain
//! row-major value type ([`Tensor`]), persistent trainable buffers
//! ([`Parameter`]) whose gradients accumulate across backward passes, and a
//! Wengert-style [`Tape`] that records forward operations and replays them
//! in reverse. 64-bit floats throughout; desk scale makes speed a non-issue
//! and tightens finite-difference checks.

mod tape;

pub use tape::{NodeId, Tape};

use std::rc::Rc;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

/// Product of dims; the empty shape is a scalar with one element.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
    }
    Ok(out)
}

/// Expand `data` of `shape` to `out_shape` (must be broadcast-compatible).
pub(crate) fn broadcast_data(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let rank = out_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let in_strides = strides(&padded);
    let n = numel(out_shape);
    let mut out = vec![0.0; n];
    let out_strides = strides(out_shape);
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..rank {
            let coord = (flat / out_strides[d]) % out_shape[d];
            let c = if padded[d] == 1 { 0 } else { coord };
            src += c * in_strides[d];
        }
        *slot = data[src];
    }
    out
}

/// Sum `grad` of `grad_shape` down to `target_shape` (reverse of broadcast).
pub(crate) fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - target_shape.len()..].copy_from_slice(target_shape);
    let t_strides = strides(&padded);
    let g_strides = strides(grad_shape);
    let mut out = vec![0.0; numel(target_shape)];
    for (flat, g) in grad.iter().enumerate() {
        let mut dst = 0usize;
        for d in 0..rank {
            let coord = (flat / g_strides[d]) % grad_shape[d];
            let c = if padded[d] == 1 { 0 } else { coord };
            dst += c * t_strides[d];
        }
        out[dst] += g;
    }
    out
}

// ── Raw matmul kernels (row-major) ──────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ  (dot products of contiguous rows)
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            crow[kk] += acc;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let crow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

// ── Tensor ──────────────────────────────────────────────────────────

/// Dense row-major f64 tensor, optionally attached to the active tape.
///
/// Cloning is cheap (the buffer is shared). A tensor with no tape node is a
/// constant as far as differentiation is concerned; [`Tensor::detach`]
/// produces exactly such a value-identical constant.
#[derive(Clone, Debug)]
pub struct Tensor {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape holds {} elements but data has {}", numel(shape), data.len()),
            });
        }
        Ok(Tensor { data: Rc::new(data), shape: shape.to_vec(), node: None })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { data: Rc::new(vec![v]), shape: vec![], node: None }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { data: Rc::new(vec![0.0; numel(shape)]), shape: shape.to_vec(), node: None }
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor { data: Rc::new(vec![v; numel(shape)]), shape: shape.to_vec(), node: None }
    }

    pub(crate) fn from_parts(data: Rc<Vec<f64>>, shape: Vec<usize>, node: Option<NodeId>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { data, shape, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Value-identical tensor with no tape ancestry (bit-exact: the buffer
    /// is shared, not copied).
    pub fn detach(&self) -> Tensor {
        Tensor { data: Rc::clone(&self.data), shape: self.shape.clone(), node: None }
    }
}

// ── Parameter ───────────────────────────────────────────────────────

#[derive(Debug)]
struct ParamInner {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Persistent trainable buffer. Gradients accumulate across backward calls
/// on separate tapes until [`Parameter::zero_grad`] (or an optimizer step)
/// clears them. Shared across threads for frozen-parameter inference.
#[derive(Clone, Debug)]
pub struct Parameter {
    inner: Arc<RwLock<ParamInner>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Parameter {
        assert_eq!(numel(shape), data.len(), "parameter data/shape mismatch");
        Parameter {
            inner: Arc::new(RwLock::new(ParamInner {
                name: name.into(),
                shape: shape.to_vec(),
                data,
                grad: None,
            })),
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Parameter {
        Parameter::new(name, shape, vec![0.0; numel(shape)])
    }

    pub fn name(&self) -> String {
        self.inner.read().unwrap().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.read().unwrap().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.read().unwrap().data.len()
    }

    /// Snapshot of the current value as an untracked tensor.
    pub fn value(&self) -> Tensor {
        let g = self.inner.read().unwrap();
        Tensor { data: Rc::new(g.data.clone()), shape: g.shape.clone(), node: None }
    }

    pub fn data_clone(&self) -> Vec<f64> {
        self.inner.read().unwrap().data.clone()
    }

    pub fn set_data(&self, data: Vec<f64>) {
        let mut g = self.inner.write().unwrap();
        assert_eq!(g.data.len(), data.len(), "set_data length mismatch for {}", g.name);
        g.data = data;
    }

    pub fn grad_clone(&self) -> Option<Vec<f64>> {
        self.inner.read().unwrap().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.write().unwrap().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut guard = self.inner.write().unwrap();
        match &mut guard.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => guard.grad = Some(g.to_vec()),
        }
    }

    /// Apply `f` to (data, grad); used by the optimizer under one lock.
    pub(crate) fn with_data_grad<R>(&self, f: impl FnOnce(&mut Vec<f64>, &mut Option<Vec<f64>>) -> R) -> R {
        let mut g = self.inner.write().unwrap();
        let ParamInner { data, grad, .. } = &mut *g;
        f(data, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[4, 1], &[4, 3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let data = vec![1.0, 2.0, 3.0];
        let spread = broadcast_data(&data, &[3], &[4, 3]);
        let back = reduce_to_shape(&spread, &[4, 3], &[3]);
        assert_eq!(back, vec![4.0, 8.0, 12.0]);
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.len(), 4);
        assert!(!t.requires_grad());
    }

    #[test]
    fn detach_shares_bits() {
        let t = Tensor::from_vec(vec![0.1, 0.2], &[2]).unwrap();
        let d = t.detach();
        assert!(std::ptr::eq(t.data().as_ptr(), d.data().as_ptr()));
        assert!(!d.requires_grad());
    }

    #[test]
    fn param_grad_accumulates() {
        let p = Parameter::new("w", &[2], vec![1.0, 1.0]);
        assert!(p.grad_clone().is_none());
        p.accumulate_grad(&[1.0, 2.0]);
        p.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(p.grad_clone().unwrap(), vec![1.5, 2.5]);
        p.zero_grad();
        assert!(p.grad_clone().is_none());
    }
}
