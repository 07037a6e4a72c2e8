//! Datasets: synthetic alignment-controlled generators, IDX and CIFAR
//! loaders, image augmentation and multiview batch construction.

mod augment;
mod io;
mod multiview;
mod synthetic;

pub use augment::{augment, ColorJitter, CropParams, Pipeline};
pub use io::{load_cifar_binary, load_dataset, load_idx, load_mnist_dir, save_dataset, DatasetManifest};
pub use multiview::{build_multiview, MultiviewBatch, ViewMode, ViewSpec};
pub use synthetic::{gen_gaussian_mixture, gen_synthetic, Certificate, GaussianMixtureSpec, SyntheticMode, SyntheticSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("{path}: label {label} at record {index} exceeds {max}")]
    LabelRange { path: String, index: usize, label: usize, max: usize },
    #[error("image and label files disagree: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples `[n, ...]` with integer labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    samples: Tensor<S>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(samples: Tensor<S>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if samples.shape().len() < 2 {
            return Err(DataError::Invalid(format!(
                "samples need a batch axis, got shape {:?}",
                samples.shape()
            )));
        }
        if samples.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(DataError::Invalid(format!("label {y} at {i} outside 0..{num_classes}")));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Tensor<S> {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-sample shape, e.g. `[c, h, w]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            samples: self.samples.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }

    /// The first `n` samples of every class, in dataset order.
    pub fn first_per_class(&self, n: usize) -> Result<Self> {
        let mut taken = vec![0; self.num_classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut taken[self.labels[i]];
                *c += 1;
                *c <= n
            })
            .collect();
        self.subset(&idx)
    }

    /// Rows of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        Ok((self.samples.select_rows(idx)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Checks that every value lies in `[0, 1]`.
    pub fn check_unit_range(&self) -> Result<()> {
        match self
            .samples
            .data()
            .iter()
            .position(|&v| !(v >= S::zero() && v <= S::one()))
        {
            None => Ok(()),
            Some(i) => Err(DataError::Invalid(format!(
                "value {} at flat index {i} outside [0, 1]",
                self.samples.data()[i]
            ))),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            samples: self.samples.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset<f32> {
        let samples = Tensor::from_f64(vec![6, 2], &[0., 1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11.]).unwrap();
        Dataset::new(samples, vec![0, 1, 0, 2, 0, 1], 3, Split::Train).unwrap()
    }

    #[test]
    fn first_per_class_keeps_order() {
        let d = toy().first_per_class(2).unwrap();
        assert_eq!(d.labels(), &[0, 1, 0, 2, 1]);
        assert_eq!(d.samples().row(4), &[10.0, 11.0]);
    }

    #[test]
    fn class_indices_partition_rows() {
        assert_eq!(toy().class_indices(), vec![vec![0, 2, 4], vec![1, 5], vec![3]]);
    }

    #[test]
    fn rejects_inconsistent_labels() {
        let s = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        assert!(Dataset::new(s.clone(), vec![0], 2, Split::Test).is_err());
        assert!(Dataset::new(s, vec![0, 2], 2, Split::Test).is_err());
    }

    #[test]
    fn unit_range_check() {
        assert!(toy().check_unit_range().is_err());
        let s = Tensor::<f32>::full(vec![2, 2], 0.5).unwrap();
        assert!(Dataset::new(s, vec![0, 1], 2, Split::Test).unwrap().check_unit_range().is_ok());
    }
}
