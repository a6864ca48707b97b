//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tensor`] wraps a dynamic-rank array plus an optional backward node
//! recording how it was computed. Ops build an acyclic graph while the
//! thread-local grad flag is on; [`Tensor::backward`] walks it once in
//! reverse creation order and accumulates gradients additively into every
//! tensor that requires them. Graphs are rebuilt every iteration, so a tensor
//! id doubles as a topological key: an op's output is always created after
//! its inputs.
//!
//! A model instance is single-writer; tensors are `Rc`-shared within one
//! thread. Parallelism happens across training runs, never inside a graph.

pub mod ops;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, Dimension, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// Whether ops currently record backward nodes on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// RAII guard disabling graph recording; restores the previous state on drop.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn no_grad_guard() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| {
        let p = c.get();
        c.set(false);
        p
    });
    NoGradGuard { prev }
}

/// Run `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = no_grad_guard();
    f()
}

/// How an op propagates an output gradient to its parents.
pub(crate) trait Node<T: Scalar> {
    fn parents(&self) -> Vec<Tensor<T>>;
    fn backward(&self, grad: &ArrayD<T>);
}

struct Inner<T: Scalar> {
    id: u64,
    data: RefCell<ArrayD<T>>,
    grad: RefCell<Option<ArrayD<T>>>,
    requires_grad: bool,
    node: Option<Rc<dyn Node<T>>>,
    backward_done: Cell<bool>,
}

/// Dense array with gradient bookkeeping. Cheap to clone (shared).
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// New leaf tensor.
    pub fn new(data: ArrayD<T>, requires_grad: bool) -> Self {
        Self {
            inner: Rc::new(Inner {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node: None,
                backward_done: Cell::new(false),
            }),
        }
    }

    /// New leaf from any fixed-dimension array.
    pub fn from_array<D: Dimension>(data: ndarray::Array<T, D>, requires_grad: bool) -> Self {
        Self::new(data.into_dyn(), requires_grad)
    }

    /// Zero-dimensional tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(&[]), value), false)
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)), requires_grad)
    }

    /// Output of an op; always requires grad.
    pub(crate) fn from_op(data: ArrayD<T>, node: Rc<dyn Node<T>>) -> Self {
        Self {
            inner: Rc::new(Inner {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                node: Some(node),
                backward_done: Cell::new(false),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, ArrayD<T>> {
        self.inner.data.borrow()
    }

    /// Replace the stored values in place (optimizer updates, EMA, stats).
    ///
    /// Must not be called while a graph referencing this tensor is still
    /// pending a backward pass.
    pub fn set_data(&self, data: ArrayD<T>) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.shape(), data.shape(), "set_data must preserve shape");
        *d = data;
    }

    /// Apply an in-place update to the stored values.
    pub fn update_data(&self, f: impl FnOnce(&mut ArrayD<T>)) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Extract the single value of a 0-d/1-element tensor.
    pub fn item(&self) -> T {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() needs a scalar tensor");
        *d.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn has_node(&self) -> bool {
        self.inner.node.is_some()
    }

    /// Current gradient, if any.
    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the values as a fresh constant leaf.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.inner.data.borrow().clone(), false)
    }

    pub(crate) fn accumulate_grad(&self, g: &ArrayD<T>) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Gradients accumulate additively into every reachable tensor that
    /// requires them; leaf gradients survive for the optimizer, intermediate
    /// ones are dropped as soon as they have been consumed. Calling this a
    /// second time on the same tensor without rebuilding the graph is an
    /// error.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::Autodiff(
                "loss does not require gradients".to_string(),
            ));
        }
        if self.inner.backward_done.get() {
            return Err(Error::Autodiff(
                "backward called twice on the same graph without rebuilding it".to_string(),
            ));
        }
        self.inner.backward_done.set(true);

        // Collect every op output reachable from the loss.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut op_outputs: Vec<Tensor<T>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.inner.node {
                op_outputs.push(t.clone());
                for p in node.parents() {
                    if !seen.contains(&p.id()) {
                        stack.push(p);
                    }
                }
            }
        }
        // Creation order is a topological order: children have larger ids.
        op_outputs.sort_by(|a, b| b.id().cmp(&a.id()));

        let ones = ArrayD::from_elem(self.inner.data.borrow().raw_dim(), T::one());
        self.accumulate_grad(&ones);

        for t in op_outputs {
            let g = t.inner.grad.borrow_mut().take();
            if let Some(g) = g {
                t.inner
                    .node
                    .as_ref()
                    .expect("op output has a node")
                    .backward(&g);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.inner.requires_grad)
            .field("has_node", &self.inner.node.is_some())
            .finish()
    }
}
