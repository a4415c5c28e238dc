//! Dense row-major tensors.
//!
//! Values are immutable once handed to the tape; every constructor and
//! kernel upholds `product(shape) == data.len()`. Non-finite values are an
//! error state and are rejected at the operation boundary, never silently
//! propagated.

use crate::error::{Error, Result};
use crate::real::Real;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![R::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<R>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform samples in `[lo, hi)`, drawn in index order.
    pub fn uniform(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| R::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn item(&self) -> Result<R> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Rows of a matrix (or length of a vector).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Columns of a matrix; vectors are treated as a single row.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols() + c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert between precisions.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::from_f64(v.to_f64())).collect(),
        }
    }

    /// Reject tensors carrying NaN or infinity, naming the producing op.
    /// Fast path: one accumulating pass (NaN/Inf poison the sum); the
    /// element index is located only when that fails.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        let mut acc = 0.0f64;
        for v in &self.data {
            acc += v.to_f64();
        }
        if acc.is_finite() {
            return Ok(());
        }
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op,
                    detail: format!("element {} of shape {:?} is {}", i, self.shape, v),
                });
            }
        }
        // The accumulator overflowed on finite data; the tensor is fine.
        Ok(())
    }
}
