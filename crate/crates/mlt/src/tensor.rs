//! Dense tensors over shared storage.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto flat row-major storage plus an
//! optional gradient accumulator of the same shape. Cloning a handle aliases
//! the storage; this is deliberate and is what lets a coarse model expose a
//! fine model's parameter blocks without copying them. Data and gradient live
//! in separate cells so a backward rule can read a tensor's values while
//! accumulating into its own gradient. One tensor is owned by one thread at a
//! time; kernels may fan out internally but handles never cross threads.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct Inner<S> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: Cell<bool>,
}

pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    /// Aliases the same storage; does not copy data.
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::raw(shape, data, false))
    }

    /// A trainable leaf: `requires_grad = true`.
    pub fn param(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::raw(shape, vec![S::zero(); numel], false)
    }

    pub fn scalar(value: S) -> Self {
        Self::raw(vec![1], vec![value], false)
    }

    fn raw(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
            }),
        }
    }

    /// Fresh node produced by an op; always participates in backward.
    pub(crate) fn node(shape: Vec<usize>, data: Vec<S>) -> Self {
        Self::raw(shape, data, true)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    /// (rows, cols) with the last axis as columns.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.inner.shape.last().expect("tensor has no axes");
        (self.numel() / cols, cols)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn data(&self) -> Ref<'_, [S]> {
        Ref::map(self.inner.data.borrow(), |d| d.as_slice())
    }

    pub fn data_mut(&self) -> RefMut<'_, [S]> {
        RefMut::map(self.inner.data.borrow_mut(), |d| d.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    pub fn set_data(&self, values: &[S]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> S {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    /// Drops the accumulator; the next backward pass starts from zero.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Gradient buffer for in-place accumulation, allocated at zero on first use.
    pub(crate) fn grad_mut(&self) -> RefMut<'_, [S]> {
        {
            let mut g = self.inner.grad.borrow_mut();
            if g.is_none() {
                *g = Some(vec![S::zero(); self.numel()]);
            }
        }
        RefMut::map(self.inner.grad.borrow_mut(), |g| {
            g.as_mut().unwrap().as_mut_slice()
        })
    }

    /// Upstream gradient of this tensor if any flowed to it.
    pub(crate) fn grad_ref(&self) -> Option<Ref<'_, [S]>> {
        let g = self.inner.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap().as_slice()))
        } else {
            None
        }
    }

    pub(crate) fn seed_grad_one(&self) {
        let mut g = vec![S::zero(); self.numel()];
        g[0] = S::one();
        *self.inner.grad.borrow_mut() = Some(g);
    }

    /// Removes and returns the stored gradient, if any.
    pub(crate) fn take_grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow_mut().take()
    }

    /// Re-adds a gradient parked before a backward pass: one add per element
    /// (parked value first), so accumulation over passes is exactly
    /// `g1 + g2 + ...` regardless of how many rules contributed per pass.
    pub(crate) fn fold_parked(&self, parked: Vec<S>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(fresh) => {
                for (f, p) in fresh.iter_mut().zip(parked) {
                    *f = p + *f;
                }
            }
            None => *slot = Some(parked),
        }
    }

    /// Multiplies the stored gradient, if any, by `c`.
    pub fn scale_grad(&self, c: S) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    /// `data -= lr * grad`, then clears the gradient. A missing gradient is
    /// treated as zero (no-op). The update is computed out of place and
    /// rejected wholesale if any entry comes out non-finite (the offending
    /// flat index is returned and the data stays untouched), so parameters
    /// never hold non-finite values.
    pub(crate) fn sgd_apply(&self, lr: S) -> std::result::Result<(), usize> {
        let Some(mut grad) = self.inner.grad.borrow_mut().take() else {
            return Ok(());
        };
        {
            let data = self.inner.data.borrow();
            for (g, x) in grad.iter_mut().zip(data.iter()) {
                *g = *x - lr * *g;
            }
        }
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(i);
        }
        self.inner.data.borrow_mut().copy_from_slice(&grad);
        Ok(())
    }

    /// Address of the backing storage; equal addresses mean aliased tensors.
    pub fn storage_ptr(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{{shape: {:?}, requires_grad: {}, grad: {}}}",
            self.inner.shape,
            self.inner.requires_grad.get(),
            if self.inner.grad.borrow().is_some() {
                "set"
            } else {
                "none"
            }
        )
    }
}
