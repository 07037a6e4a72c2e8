//! Dense tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain row-major array. Differentiation happens on a
//! [`Graph`]: values are recorded as nodes, primitives append nodes, and
//! [`Graph::backward`] walks the tape once in reverse.

mod check;
mod graph;
mod kernels;

pub use check::{grad_check, numeric_gradient};
pub use graph::{Gradients, Graph, Padding, Var};

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero or missing extent")]
    EmptyShape(Vec<usize>),
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("objective is non-finite when probing coordinate {coord}")]
    ProbeNonFinite { coord: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense array with a fixed shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyShape(shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: S) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading index.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                shapes: vec![self.shape, shape],
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    /// Gathers leading-index rows in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let w = self.row_len();
        if idx.is_empty() {
            return Err(TensorError::EmptyShape(vec![0]));
        }
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.rows() {
                return Err(TensorError::Invalid {
                    op: "select_rows",
                    msg: format!("row {i} out of range for {} rows", self.rows()),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    /// Stacks tensors along the leading extent.
    pub fn concat_rows(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::EmptyShape(vec![0]))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    shapes: parts.iter().map(|p| p.shape.clone()).collect(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_empty_extents() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![0, 2], vec![]),
            Err(TensorError::EmptyShape(_))
        ));
    }

    #[test]
    fn select_and_concat_rows() {
        let t = Tensor::<f64>::from_f64(vec![3, 2], &[0., 1., 2., 3., 4., 5.]).unwrap();
        let s = t.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
        let c = Tensor::concat_rows(&[&s, &t]).unwrap();
        assert_eq!(c.shape(), &[5, 2]);
        assert!(t.select_rows(&[3]).is_err());
    }
}
