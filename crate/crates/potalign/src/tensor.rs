//! Dense row-major tensors of 64-bit reals.
//!
//! `DenseTensor` is the carrier for embeddings, cost matrices, transport
//! plans, and learnable parameters. Values are plain `Vec<f64>` in row-major
//! order; the constructor enforces that the data length matches the shape.

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("zero dimension in shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// n-by-n matrix with `diag` on the diagonal, zero elsewhere.
    pub fn eye(n: usize, diag: f64) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = diag;
        }
        t
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        DenseTensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// 1-by-n row vector.
    pub fn row(values: Vec<f64>) -> Self {
        DenseTensor {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    /// n-by-1 column vector.
    pub fn col(values: Vec<f64>) -> Self {
        DenseTensor {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the flat data under a new shape of the same length.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        DenseTensor::from_vec(shape, self.data)
    }

    /// Number of rows; rank-2 tensors only.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    /// Number of columns; rank-2 tensors only.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    /// Element (i, j) of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        let c = self.cols();
        self.data[i * c + j]
    }

    pub fn set_at(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    /// Row i of a rank-2 tensor as a new 1-by-cols tensor.
    pub fn row_at(&self, i: usize) -> DenseTensor {
        let c = self.cols();
        DenseTensor::row(self.data[i * c..(i + 1) * c].to_vec())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all entries.
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute entrywise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dot product of two equally-shaped tensors, viewed flat.
pub fn frobenius_dot(a: &DenseTensor, b: &DenseTensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "frobenius_dot shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
