//! Separation, clustering and alignment measurements, nearest-neighbour
//! classifiers and local Lipschitz estimates.

mod distance;
mod factors;
mod knn;
mod lipschitz;
mod metric;

pub use distance::{pairwise_distances, DistanceTable};
pub use factors::{
    alignment_report, alignment_verdict, clustering_factor, min_max_normalize, separation_factor, Aggregate,
    AlignmentReport, AlignmentSummary, AlignmentVerdict, ClusteringReport, ComparisonMode, PairSeparation,
    SampleClustering, SeparationReport,
};
pub use knn::{
    accordance_rate, accuracy, knn_classify, knn_from_distances, knn_predict, layer_accuracy_curve, nn_accuracy,
    KnnPrediction, LayerAccuracy, Neighbor,
};
pub use lipschitz::{lipschitz_estimate, lipschitz_estimate_with, LipschitzConfig, LipschitzEstimate, OutputSpace};
pub use metric::{Metric, MetricKind};

use thiserror::Error;

use crate::attacks::AttackError;
use crate::data::Dataset;
use crate::nn::NnError;
use crate::tensor::{Tensor, TensorError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("separation needs at least two classes to compare")]
    SingleClass,
    #[error("class {0} has no reference samples")]
    EmptyClass(usize),
    #[error("empty reference set")]
    EmptyReference,
    #[error("reports are not comparable: {0}")]
    ReportMismatch(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T, E = AlignError> = std::result::Result<T, E>;

/// Sample rows `[n, ...]` paired with their labels.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a, S> {
    pub x: &'a Tensor<S>,
    pub labels: &'a [usize],
}

impl<'a, S: Scalar> Labeled<'a, S> {
    pub fn new(x: &'a Tensor<S>, labels: &'a [usize]) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(AlignError::Config(format!("{} rows but {} labels", x.rows(), labels.len())));
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn class_counts(&self, n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }
}

impl<'a, S: Scalar> From<&'a Dataset<S>> for Labeled<'a, S> {
    fn from(d: &'a Dataset<S>) -> Self {
        Self {
            x: d.samples(),
            labels: d.labels(),
        }
    }
}
