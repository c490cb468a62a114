//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are cheap handles onto reference-counted buffers. Any op whose
//! input has `requires_grad` set records itself into the implicit graph;
//! [`Tensor::backward`] traces a [`Tape`] from a scalar loss and replays it
//! in reverse topological order, accumulating gradients into every
//! `requires_grad` node. Everything is single-threaded by design: one graph
//! belongs to one training or attack run.

mod ops;

pub mod gradcheck;

pub use ops::{dot, norm, Padding};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },
    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,
}

pub type TensorResult<T = Tensor> = Result<T, TensorError>;

/// Backward rule: given d(loss)/d(out) and the forward output, push
/// gradient contributions into the parents.
type BackwardFn = Box<dyn Fn(&[f32], &[f32], &[Tensor])>;

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// N-dimensional f32 array, row-major, optionally tracked for gradients.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Plain constant tensor. Errors when the buffer does not fill the shape.
    pub fn new(shape: &[usize], data: Vec<f32>) -> TensorResult {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "new",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self::construct(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Leaf tensor that participates in gradient tracking.
    pub fn leaf(shape: &[usize], data: Vec<f32>, requires_grad: bool) -> TensorResult {
        let t = Self::new(shape, data)?;
        if requires_grad {
            Ok(Self::construct(
                t.shape().to_vec(),
                t.to_vec(),
                true,
                Vec::new(),
                None,
            ))
        } else {
            Ok(t)
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::construct(shape.to_vec(), vec![0.0; numel], false, Vec::new(), None)
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::construct(shape.to_vec(), vec![value; numel], false, Vec::new(), None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Self::construct(Vec::new(), vec![value], false, Vec::new(), None)
    }

    fn construct(
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Interior graph node. `requires_grad` is inherited from the parents;
    /// when no parent is tracked the result is a plain constant and the
    /// graph edge is dropped.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: &[&Tensor],
        backward: BackwardFn,
    ) -> Tensor {
        let tracked = parents.iter().any(|p| p.requires_grad());
        if tracked {
            let parents: Vec<Tensor> = parents.iter().map(|p| (*p).clone()).collect();
            Self::construct(shape, data, true, parents, Some(backward))
        } else {
            Self::construct(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True for graph leaves (no recorded parents).
    pub fn is_leaf(&self) -> bool {
        self.inner.parents.is_empty()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor is not single-element.
    pub fn item(&self) -> f32 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.inner.shape);
        d[0]
    }

    /// Replace the buffer in place (same length required). Only sensible on
    /// leaves between graph builds: optimizers and attack loops use it.
    pub fn set_data(&self, data: Vec<f32>) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        *d = data;
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detach from the graph: same data, no history, optionally a fresh
    /// gradient-tracked leaf.
    pub fn detach(&self, requires_grad: bool) -> Tensor {
        Self::construct(
            self.inner.shape.clone(),
            self.to_vec(),
            requires_grad,
            Vec::new(),
            None,
        )
    }

    fn ensure_grad_zeroed(&self) {
        let mut g = self.inner.grad.borrow_mut();
        *g = Some(vec![0.0; self.numel()]);
    }

    /// Add a gradient contribution in place (used by backward rules and by
    /// optimizers fed externally computed estimates).
    pub fn accumulate_grad(&self, delta: &[f32]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        let g = g.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Reverse-mode differentiation from a scalar loss. Populates `grad` on
    /// every `requires_grad` node reachable from the loss; values from any
    /// previous call are overwritten, not accumulated.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        let tape = Tape::trace(self);
        tape.replay();
        Ok(())
    }
}

/// Ordered record of the graph nodes reachable from a loss, children before
/// parents. Replaying runs each node's backward rule exactly once.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// DFS postorder from `root`, reversed, restricted to tracked nodes.
    pub fn trace(root: &Tensor) -> Tape {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative postorder: (node, child_cursor).
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        if root.requires_grad() {
            visited.insert(root.id());
            stack.push((root.clone(), 0));
        }
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.inner.parents.len() {
                stack.push((node.clone(), cursor + 1));
                let parent = node.inner.parents[cursor].clone();
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order.reverse();
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids in replay order (loss first), for order diagnostics.
    pub fn node_ids(&self) -> Vec<u64> {
        self.nodes.iter().map(Tensor::id).collect()
    }

    /// For each node, the ids of its tracked parents. A correct tape visits
    /// every node strictly before all of its parents.
    pub fn parent_ids(&self) -> Vec<(u64, Vec<u64>)> {
        self.nodes
            .iter()
            .map(|n| {
                let ps = n
                    .inner
                    .parents
                    .iter()
                    .filter(|p| p.requires_grad())
                    .map(Tensor::id)
                    .collect();
                (n.id(), ps)
            })
            .collect()
    }

    fn replay(&self) {
        for node in &self.nodes {
            node.ensure_grad_zeroed();
        }
        if let Some(first) = self.nodes.first() {
            first.inner.grad.borrow_mut().as_mut().unwrap()[0] = 1.0;
        }
        for node in &self.nodes {
            if let Some(backward) = &node.backward_fn() {
                let grad = node.grad().expect("tape node grad initialized");
                let data = node.to_vec();
                backward(&grad, &data, &node.inner.parents);
            }
        }
    }
}

impl Tensor {
    fn backward_fn(&self) -> Option<&BackwardFn> {
        self.inner.backward.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(err.to_string().contains("needs 6"));
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.numel(), 1);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let y = x.mul(&x).unwrap();
        match y.backward() {
            Err(TensorError::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x^2), x = [1, 2] -> grad [2, 4]
        let x = Tensor::leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_yields_zero_grad() {
        let x = Tensor::leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let c = Tensor::new(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        // loss touches x only via a zero multiplier
        let loss = x.scale(0.0).add(&c).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn grads_overwritten_not_accumulated_across_calls() {
        let x = Tensor::leaf(&[2], vec![3.0, -1.0], true).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let g1 = x.grad().unwrap();
        loss.backward().unwrap();
        let g2 = x.grad().unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn diamond_graph_accumulates_within_one_call() {
        // loss = sum(x*x + x*x) -> grad 4x
        let x = Tensor::leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let a = x.mul(&x).unwrap();
        let b = x.mul(&x).unwrap();
        let loss = a.add(&b).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn tape_is_reverse_topological() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let a = x.mul(&x).unwrap();
        let b = a.add(&x).unwrap();
        let loss = b.sum_all();
        let tape = Tape::trace(&loss);
        let ids = tape.node_ids();
        let pos = |id: u64| ids.iter().position(|&i| i == id).unwrap();
        for (node, parents) in tape.parent_ids() {
            for p in parents {
                assert!(
                    pos(node) < pos(p),
                    "node {node} must be replayed before parent {p}"
                );
            }
        }
    }

    #[test]
    fn untracked_ops_build_no_graph() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }
}
