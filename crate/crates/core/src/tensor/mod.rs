//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The graph is held by the tensors themselves: every non-leaf tensor stores
//! its originating [`Op`] together with handles to its inputs, so dropping the
//! loss drops the whole tape. `backward` walks the DAG once in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requires them.

mod ops;
pub mod gradcheck;

pub use ops::Op;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class index {index} out of range for {classes} classes")]
    BadClassIndex { index: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with gradient recording disabled on this thread. Tensors created
/// inside are plain leaves regardless of their inputs.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    op: Op<S>,
}

/// Handle to one node of the computation graph. Cloning is cheap and aliases
/// the same node.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn make(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Constant leaf from pre-validated parts.
    pub(crate) fn make_leaf(shape: Vec<usize>, data: Vec<S>) -> Self {
        Self::make(shape, data, false, Op::Leaf)
    }

    /// Constant leaf.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf (gradients accumulate here).
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::make(t.inner.shape.clone(), t.to_vec(), true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), vec![S::zero(); shape.iter().product()], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::make(shape.to_vec(), vec![v; shape.iter().product()], false, Op::Leaf)
    }

    pub fn scalar(v: S) -> Self {
        Self::make(vec![], vec![v], false, Op::Leaf)
    }

    /// Uniform draw in [lo, hi). Samples in f64 so f32 and f64 tensors built
    /// from the same seed hold the same values.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64_lossy(lo + (hi - lo) * rng.gen::<f64>()))
            .collect();
        Self::make(shape.to_vec(), data, false, Op::Leaf)
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

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> S {
        assert!(self.numel() == 1, "item() on non-scalar tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// In-place mutation of the raw values (optimizer steps, checkpoint load).
    pub fn apply<F: FnOnce(&mut [S])>(&self, f: F) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Cut the tape: same values, no history, no gradient.
    pub fn detach(&self) -> Tensor<S> {
        Self::make(self.inner.shape.clone(), self.to_vec(), false, Op::Leaf)
    }

    pub(crate) fn op(&self) -> &Op<S> {
        &self.inner.op
    }

    /// Interpret as H x W x D.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [h, w, d] => Ok((*h, *w, *d)),
            s => Err(TensorError::ShapeMismatch(format!("expected 3-d tensor, got {s:?}"))),
        }
    }

    fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Repeated calls accumulate into
    /// `grad`; call `zero_grad` on the parameters between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }

        // Iterative DFS postorder; reverse postorder is a topological order
        // with consumers ahead of producers.
        let mut postorder: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id, ());
        while let Some((node, child)) = stack.pop() {
            let parents = node.op().parents();
            if child < parents.len() {
                stack.push((node.clone(), child + 1));
                let p = parents[child].clone();
                if p.requires_grad() && !visited.contains_key(&p.id()) {
                    visited.insert(p.id(), ());
                    stack.push((p, 0));
                }
            } else {
                postorder.push(node);
            }
        }

        let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
        grads.insert(self.inner.id, vec![S::one()]);

        for node in postorder.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else { continue };
            node.op().backward(node, &g, &mut grads);
            node.accumulate_grad(&g);
        }
        Ok(())
    }
}

/// Nearest-neighbor source index for each destination index. The same map
/// drives tensor, label, and mask resizing so they always stay aligned.
pub fn nearest_index_map(src_len: usize, dst_len: usize) -> Vec<usize> {
    assert!(src_len > 0 && dst_len > 0);
    (0..dst_len).map(|i| (i * src_len) / dst_len).collect()
}
