//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every operation that consumes a tensor with `requires_grad` records a
//! backward closure on the output. Calling [`Tensor::backward`] on a scalar
//! walks the recorded graph in reverse creation order and accumulates
//! gradients into every reachable tensor that requires one.
//!
//! Creation order doubles as a topological order: an operation's output is
//! always created after its inputs, so sorting reachable nodes by descending
//! id visits every consumer before the tensors it consumed.
//!
//! Spatial tensors use the `[N, C, D, H, W]` layout with `W` fastest.
//! Convolutions are cross-correlations (the kernel is not flipped).

mod conv;
mod denormal;
mod direct;
mod element;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use denormal::flush_denormals;
pub use element::Element;
pub(crate) use ops::sigmoid_scalar;
pub use ops::{
    concat_channels, conv3d, conv3d_transposed, crop_spatial, maxpool3d, pad_spatial,
};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until the guard is dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Turns off tape recording for inference.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule of one recorded operation.
pub(crate) trait GradFn<T: Element> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Tensor<T>>;

    /// Accumulates the contribution of `grad` (the gradient w.r.t. `out`)
    /// into the inputs that require gradients.
    fn backward(&self, out: &Tensor<T>, grad: &[T]);
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: RefCell<Option<Box<dyn GradFn<T>>>>,
}

/// Reference-counted handle to a node in the autodiff graph.
///
/// Cloning is cheap and shares the underlying buffer.
pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.borrow().as_ref().map(|g| g.name());
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &op)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: RefCell::new(None),
        }))
    }

    /// Creates a leaf tensor that does not track gradients.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, false))
    }

    /// Creates a trainable leaf tensor.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![T::zero(); n], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value], false)
    }

    /// Output of an operation. The backward rule is recorded only when
    /// recording is enabled and some input requires a gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, grad_fn: impl GradFn<T> + 'static) -> Self {
        let track = grad_enabled() && grad_fn.inputs().iter().any(|t| t.requires_grad());
        let t = Self::from_parts(shape, data, track);
        if track {
            *t.0.grad_fn.borrow_mut() = Some(Box::new(grad_fn));
        }
        t
    }

    /// Creation-order identifier.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Whether this tensor was produced by a recorded operation whose
    /// backward rule has not yet been consumed.
    pub fn has_grad_fn(&self) -> bool {
        self.0.grad_fn.borrow().is_some()
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.0.data.borrow(), |v| v.as_slice())
    }

    /// Mutable access to the values. Intended for optimizers updating leaf
    /// parameters between steps; mutating a tensor that is saved on a live
    /// tape invalidates that tape's gradients.
    pub fn data_mut(&self) -> RefMut<'_, [T]> {
        RefMut::map(self.0.data.borrow_mut(), |v| v.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("expected one element, got shape {:?}", self.shape())));
        }
        Ok(self.0.data.borrow()[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Option<Ref<'_, [T]>> {
        Ref::filter_map(self.0.grad.borrow(), |g| g.as_deref()).ok()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the gradient buffer (used when restoring state).
    pub fn set_grad(&self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            check_shape(self.shape(), g.len())?;
        }
        *self.0.grad.borrow_mut() = grad;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Runs `f` on the gradient buffer, allocating zeros first if needed.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Back-propagates from this scalar through the recorded graph.
    ///
    /// The recorded backward rules are consumed: running `backward` a second
    /// time on the same graph only re-seeds the loss gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut order = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(f) = t.0.grad_fn.borrow().as_ref() {
                stack.extend(f.inputs().into_iter().filter(|i| i.requires_grad()));
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        self.accumulate_grad(&[T::one()]);
        for t in &order {
            let Some(f) = t.0.grad_fn.borrow_mut().take() else {
                continue;
            };
            let grad = t.0.grad.borrow();
            if let Some(g) = grad.as_deref() {
                f.backward(t, g);
            }
        }
        Ok(())
    }

    /// Same data viewed with a different shape (gradient passes through).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.numel())?;
        Ok(Self::from_op(shape.to_vec(), self.to_vec(), ops::Reshape { input: self.clone() }))
    }

    pub fn relu(&self) -> Self {
        ops::relu(self)
    }

    pub fn sigmoid(&self) -> Self {
        ops::sigmoid(self)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        ops::add(self, other)
    }

    pub fn mul_scalar(&self, s: T) -> Self {
        ops::mul_scalar(self, s)
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&self) -> Self {
        ops::mean(self)
    }

    /// Converts to another precision, dropping the graph.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect();
        Tensor::from_parts(self.shape().to_vec(), data, self.requires_grad())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("extents must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} holds {n} elements but buffer has {len}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
