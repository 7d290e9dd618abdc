//! Dense n-dimensional arrays with a minimal reverse-mode autodiff engine.
//!
//! A [`Tensor`] is a cheaply cloneable handle to a shape, a flat row-major
//! buffer, and (optionally) a gradient buffer of the same shape. Operations
//! that participate in differentiation record an [`autodiff::Op`] on their
//! output; [`ops::backward`] replays the recorded graph in reverse execution
//! order. The element type is generic: `f32` is the training dtype, `f64`
//! exists for gradient checking. One computation graph never mixes dtypes
//! (the type parameter enforces this).

pub mod autodiff;
pub mod ops;

use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

use crate::error::{Error, Result};
use autodiff::Op;

/// Element types usable in a computation graph.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// Runtime tag for the element type, used by serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

/// Converts an `f64` literal into the graph dtype.
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal converts to scalar type")
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: RwLock<Option<Vec<T>>>,
    /// Leaf flag: gradients are of interest to the caller (parameters, probed inputs).
    requires_grad: bool,
    /// True when this tensor is a leaf with `requires_grad` or was produced by a
    /// recorded op whose inputs need gradients.
    needs_grad: bool,
    op: Option<Op<T>>,
}

/// A dense row-major n-dimensional array, optionally tracking gradients.
///
/// Cloning a `Tensor` clones the handle, not the buffer.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = requires_grad || op.is_some();
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                needs_grad,
                op,
            }),
        }
    }

    /// Creates a leaf tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, expected, data.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("extents must be positive, got {:?}", shape),
            ));
        }
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![T::zero(); n], false, None)
    }

    /// Leaf tensor filled with one value.
    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![value; n], false, None)
    }

    /// 0-d-like scalar tensor (shape `[1]`).
    pub fn scalar(value: T) -> Self {
        Self::new_inner(vec![1], vec![value], false, None)
    }

    /// Marks this leaf as requiring gradients. Consumes and returns the handle.
    ///
    /// Only meaningful on leaves; op outputs track gradients automatically.
    pub fn requires_grad(self) -> Self {
        assert!(
            self.inner.op.is_none(),
            "requires_grad() applies to leaf tensors"
        );
        if self.inner.requires_grad {
            return self;
        }
        let data = self.inner.data.read().expect("lock").clone();
        Self::new_inner(self.inner.shape.clone(), data, true, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        Self::new_inner(shape, data, false, Some(op))
    }

    /// A leaf copy of this tensor's current values (drops graph history).
    pub fn detach(&self) -> Self {
        Self::new_inner(self.inner.shape.clone(), self.data().clone(), false, None)
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

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.inner.op.as_ref()
    }

    /// Read access to the flat buffer.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().expect("tensor data lock")
    }

    /// Write access to the flat buffer (parameter updates, running stats).
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.inner.data.write().expect("tensor data lock")
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() requires exactly one element");
        d[0]
    }

    /// A clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().expect("tensor grad lock").clone()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.write().expect("tensor grad lock") = None;
    }

    /// Adds `delta` into the gradient buffer (allocating zeros first if absent).
    ///
    /// No-op for tensors that do not track gradients.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        if !self.inner.needs_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.write().expect("tensor grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn seed_unit_grad(&self) {
        let mut slot = self.inner.grad.write().expect("tensor grad lock");
        let n = self.numel();
        match slot.as_mut() {
            Some(g) => {
                for gi in g.iter_mut() {
                    *gi += T::one();
                }
            }
            None => *slot = Some(vec![T::one(); n]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_product() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .requires_grad();
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 1.5, 1.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn ids_are_unique_and_increasing() {
        let a = Tensor::<f32>::zeros(&[1]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(b.id() > a.id());
    }
}
