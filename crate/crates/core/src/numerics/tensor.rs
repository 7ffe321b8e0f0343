use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::NumericsError;

/// Scalar element type of the engine. The artifact computes in `f32`; the
/// gradient-check oracle re-evaluates the same graphs in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for lifting an `f64` constant into the scalar type.
pub(crate) fn c<S: Real>(x: f64) -> S {
    S::from_f64(x).expect("constant out of range for scalar type")
}

/// Dense multi-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> TensorData<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a `[rows x cols]` matrix from a flat row-major slice.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise cast, used to re-evaluate `f32` graphs in `f64`.
    pub fn cast<T: Real>(&self) -> TensorData<T> {
        TensorData {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}
