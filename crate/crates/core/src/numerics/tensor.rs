use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Floating-point element type usable by tensors and the tape.
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub const MAX_RANK: usize = 3;

/// Dense row-major tensor of rank 1 to 3.
///
/// `grad` is present iff `requires_grad` is set; it is an accumulation
/// buffer owned by whoever trains the tensor, the tape never writes into it
/// directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<(), NumericsError> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.iter().any(|&d| d == 0) {
        return Err(NumericsError::InvalidShape { shape: shape.to_vec() });
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(NumericsError::DataLength { shape: shape.to_vec(), len });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, NumericsError> {
        check_shape(shape, data.len())?;
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, NumericsError> {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn vector(data: Vec<T>) -> Result<Self, NumericsError> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        Self::new(&[rows, cols], data)
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient buffer.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        self.grad = requires_grad.then(|| vec![T::zero(); self.data.len()]);
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer. No-op when the tensor is not trainable.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<(), NumericsError> {
        if delta.len() != self.data.len() {
            return Err(NumericsError::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        if let Some(g) = self.grad.as_mut() {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.shape[1..].iter().product::<usize>();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
