use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::GradError;
use crate::real::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the gradient of an operation's output to one gradient per parent.
///
/// Entries may be `None` for parents that do not require gradients.
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Real> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    name: RefCell<Option<String>>,
    grad_fn: Option<GradFn<T>>,
}

/// Dense row-major array that records the operations producing it.
///
/// Cloning is cheap and shares storage. Ids grow monotonically, so a result
/// always has a larger id than any of its parents.
pub struct Tensor<T: Real>(Rc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            name: RefCell::new(None),
            grad_fn,
        }))
    }

    /// A constant (no gradient is tracked).
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        Self::build(shape.to_vec(), data, false, None)
    }

    /// A leaf that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<T>) -> Self {
        Self::build(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); numel(shape)])
    }

    pub fn scalar(x: T) -> Self {
        Self::new(&[], vec![x])
    }

    /// Records the result of an operation. The backward closure is dropped
    /// when no parent requires gradients.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            parents,
            backward,
        });
        Self::build(shape, data, requires_grad, grad_fn)
    }

    pub fn named(self, name: impl Into<String>) -> Self {
        *self.0.name.borrow_mut() = Some(name.into());
        self
    }

    pub fn name(&self) -> String {
        self.0
            .name
            .borrow()
            .clone()
            .unwrap_or_else(|| format!("tensor#{}", self.0.id))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Sets the gradient to zeros (populated, so accumulation starts from 0).
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = Some(vec![T::zero(); self.numel()]);
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replaces the values of a leaf tensor. Parameter mutation happens only
    /// between recorded computations.
    pub fn set_data(&self, data: Vec<T>) {
        assert!(self.is_leaf(), "set_data on a non-leaf tensor");
        assert_eq!(data.len(), self.numel());
        *self.0.data.borrow_mut() = data;
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        f(&mut self.0.data.borrow_mut());
    }

    /// Same values, cut from the recorded graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.shape(), self.to_vec())
    }

    /// A fresh leaf parameter holding a copy of this tensor's values.
    pub fn to_param(&self) -> Tensor<T> {
        Tensor::param(self.shape(), self.to_vec())
    }

    /// Propagates d(self)/d(x) into every reachable tensor that requires
    /// gradients. Repeated calls accumulate.
    pub fn backward(&self) -> Result<(), GradError> {
        if self.numel() != 1 {
            return Err(GradError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Err(GradError::NoGradient);
        }

        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in &nodes {
            let g = pending
                .remove(&node.id())
                .unwrap_or_else(|| vec![T::zero(); node.numel()]);
            if let Some(gf) = &node.0.grad_fn {
                let parent_grads = (gf.backward)(&g);
                debug_assert_eq!(parent_grads.len(), gf.parents.len(), "op {}", gf.op);
                for (p, pg) in gf.parents.iter().zip(parent_grads) {
                    if !p.requires_grad() {
                        continue;
                    }
                    let Some(pg) = pg else { continue };
                    debug_assert_eq!(pg.len(), p.numel(), "op {} gradient size", gf.op);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
