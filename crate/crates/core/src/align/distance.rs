//! Dense distance tables over row sets.

use rayon::prelude::*;

use super::{AlignError, Metric, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Row-major `rows x cols` table of `metric(a_i, b_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceTable {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Rows of a sample tensor widened to `f64` once, so the inner loop never
/// converts. Widening is exact, so distances match the generic path bit for
/// bit.
pub(crate) struct Rows {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Rows {
    pub fn new<S: Scalar>(x: &Tensor<S>) -> Self {
        Self {
            n: x.rows(),
            dim: x.row_len(),
            data: x.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub(crate) fn check_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(AlignError::DimMismatch { left: a, right: b })
    }
}

/// All distances between the rows of `a` and the rows of `b`. Rows of the
/// table are computed in parallel; each entry is a sequential left-to-right
/// reduction, so the result does not depend on the thread count.
pub fn pairwise_distances<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, metric: Metric) -> Result<DistanceTable> {
    metric.validate().map_err(AlignError::Config)?;
    check_dims(a.row_len(), b.row_len())?;
    let (ra, rb) = (Rows::new(a), Rows::new(b));
    let cols = rb.n;
    let mut data = vec![0.0; ra.n * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
            let x = ra.row(i);
            for (j, d) in out.iter_mut().enumerate() {
                *d = metric.distance(x, rb.row(j));
            }
        });
    }
    Ok(DistanceTable { rows: ra.n, cols, data })
}
