//! Dense row-major tensors and reverse-mode autodiff.
//!
//! The differentiable primitive set is fixed and small: matmul (plain and
//! transposed-right), add (same shape or bias row-broadcast), scale by a
//! constant, elementwise product, GELU, layer normalization, softmax,
//! embedding lookup, concatenation and cross-entropy. Everything else in
//! the model is composed from these, which keeps every gradient rule in one
//! auditable place ([`graph`]) and lets the finite-difference checker in
//! [`gradcheck`] cover the whole surface.
//!
//! Usage shape: build tensors, record operations through a [`Graph`], call
//! [`Graph::backward`] once on a scalar loss. Gradients accumulate into the
//! `grad` buffers of tensors with `requires_grad` set; everything else is
//! left untouched. A graph is single-use and single-threaded; parallelism
//! happens above this layer, one model clone per worker.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::{Error, Result};

pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::Graph;

// ── Storage ─────────────────────────────────────────────────────────────

struct Shared<F> {
    shape: Box<[usize]>,
    requires_grad: Cell<bool>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
}

/// A shared handle to one dense row-major tensor.
///
/// Cloning a `Tensor` clones the handle, not the storage; this is how the
/// graph keeps its operands alive. Values are frozen by convention once an
/// operation involving the tensor has been recorded. The optimizer swaps in
/// fresh buffers via [`Tensor::set_data`] strictly between graphs.
pub struct Tensor<F: Scalar>(Rc<Shared<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> Tensor<F> {
    /// Constant (non-trainable) tensor from explicit contents.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(
                "tensor",
                format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Shared {
            shape: shape.into(),
            requires_grad: Cell::new(false),
            data: RefCell::new(data),
            grad: RefCell::new(None),
        })))
    }

    /// Trainable tensor (`requires_grad` on) from explicit contents.
    pub fn param(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor(Rc::new(Shared {
            shape: shape.into(),
            requires_grad: Cell::new(false),
            data: RefCell::new(vec![F::zero(); numel]),
            grad: RefCell::new(None),
        }))
    }

    pub fn scalar(v: F) -> Self {
        Self::from_vec(&[1], vec![v]).expect("scalar shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Borrow the values. Hold the guard only briefly; recording an
    /// operation on this tensor while borrowed will panic.
    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "item",
                format!("expected a scalar, shape is {:?}", self.shape()),
            ));
        }
        Ok(self.0.data.borrow()[0])
    }

    /// Replace the contents wholesale. Only legal between graphs (the
    /// optimizer's step); length must match the existing shape.
    pub fn set_data(&self, data: Vec<F>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::contract(
                "set_data",
                format!("shape {:?} wants {} values, got {}", self.shape(), self.numel(), data.len()),
            ));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    /// Current gradient, if any backward pass has deposited one.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    /// Drop the gradient buffer (between optimizer steps).
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Accumulate into the gradient buffer, allocating it on first use.
    /// No-op unless `requires_grad` is set: constants never grow gradients.
    pub(crate) fn accumulate_grad(&self, delta: &[F]) {
        if !self.requires_grad() {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Fresh storage with the same shape, values and `requires_grad` flag.
    /// Gradients do not carry over.
    pub fn deep_copy(&self) -> Self {
        let t = Self::from_vec(self.shape(), self.to_vec()).expect("shape matches data");
        t.set_requires_grad(self.requires_grad());
        t
    }

    /// Do two handles point at the same storage?
    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish_non_exhaustive()
    }
}
