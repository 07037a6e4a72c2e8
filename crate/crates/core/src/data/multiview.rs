//! k-fold multiview batches, laid out source-major: rows `k*i .. k*(i+1)`
//! are the views of source `i`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::augment::{augment, Pipeline};
use super::{DataError, Result};
use crate::losses::{self, ContrastiveBatch};
use crate::tensor::Tensor;
use crate::Scalar;

/// One view slot: whether the view is a random transform of the source and
/// whether it receives an adversarial perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ViewSpec {
    pub transformed: bool,
    pub adversarial: bool,
}

impl ViewSpec {
    pub const ORIGINAL: Self = Self {
        transformed: false,
        adversarial: false,
    };
    pub const TRANSFORMED: Self = Self {
        transformed: true,
        adversarial: false,
    };
    pub const ORIGINAL_ADV: Self = Self {
        transformed: false,
        adversarial: true,
    };
    pub const TRANSFORMED_ADV: Self = Self {
        transformed: true,
        adversarial: true,
    };
}

impl fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.transformed { "T" } else { "x" })?;
        if self.adversarial {
            f.write_str("+d")?;
        }
        Ok(())
    }
}

impl TryFrom<String> for ViewSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ViewSpec> for String {
    fn from(v: ViewSpec) -> String {
        v.to_string()
    }
}

impl FromStr for ViewSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "x" => Ok(Self::ORIGINAL),
            "T" => Ok(Self::TRANSFORMED),
            "x+d" => Ok(Self::ORIGINAL_ADV),
            "T+d" => Ok(Self::TRANSFORMED_ADV),
            other => Err(format!("unknown view {other:?} (expected x, T, x+d or T+d)")),
        }
    }
}

/// Which views each source contributes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    /// `k` independent transforms, none perturbed.
    Plain(usize),
    /// `{x + d1, T1(x) + d2, T2(x)}`.
    Afa,
    /// An explicit view list, e.g. parsed from `"T+d,T"`.
    Custom(Vec<ViewSpec>),
}

impl ViewMode {
    pub fn slots(&self) -> Vec<ViewSpec> {
        match self {
            ViewMode::Plain(k) => vec![ViewSpec::TRANSFORMED; *k],
            ViewMode::Afa => vec![ViewSpec::ORIGINAL_ADV, ViewSpec::TRANSFORMED_ADV, ViewSpec::TRANSFORMED],
            ViewMode::Custom(v) => v.clone(),
        }
    }

    pub fn parse_list(s: &str) -> Result<Self, String> {
        s.split(',').map(str::parse).collect::<Result<Vec<_>, _>>().map(ViewMode::Custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiviewBatch<S> {
    pub views: Tensor<S>,
    pub labels: Vec<usize>,
    /// Position of each row's source within the input batch.
    pub sources: Vec<usize>,
    pub slots: Vec<ViewSpec>,
    pub k: usize,
}

impl<S: Scalar> MultiviewBatch<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows that receive a perturbation.
    pub fn adversarial_mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.adversarial).collect()
    }

    pub fn contrastive(&self) -> Result<ContrastiveBatch, losses::LossError> {
        let views = (0..self.len()).map(|i| i % self.k).collect();
        ContrastiveBatch::new(self.labels.clone(), self.sources.clone(), views)
    }
}

/// Seed of view slot `v` derived from the batch seed.
fn view_seed(seed: u64, v: usize) -> u64 {
    seed ^ (v as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Expands `x` (`[n, ...]`) into `k*n` rows. `ids` are stable sample ids that
/// pick each source's random stream. Non-image samples (anything other than
/// `[c, h, w]`) pass through transformed slots unchanged.
pub fn build_multiview<S: Scalar>(
    x: &Tensor<S>,
    labels: &[usize],
    ids: &[u64],
    mode: &ViewMode,
    pipeline: &Pipeline,
    seed: u64,
) -> Result<MultiviewBatch<S>> {
    let slots = mode.slots();
    let k = slots.len();
    if k < 2 {
        return Err(DataError::Invalid(format!("multiview needs k >= 2 views, got {k}")));
    }
    let n = x.rows();
    if labels.len() != n || ids.len() != n {
        return Err(DataError::Invalid(format!(
            "{n} samples, {} labels, {} ids",
            labels.len(),
            ids.len()
        )));
    }
    let sample_shape = &x.shape()[1..];
    let is_image = sample_shape.len() == 3;
    let row_len = x.row_len();
    let mut data = Vec::with_capacity(k * n * row_len);
    for (i, &id) in ids.iter().enumerate() {
        let src = x.row(i);
        for (v, slot) in slots.iter().enumerate() {
            if slot.transformed && is_image {
                data.extend(augment(src, sample_shape, pipeline, view_seed(seed, v), id)?);
            } else {
                data.extend_from_slice(src);
            }
        }
    }
    let mut shape = vec![k * n];
    shape.extend_from_slice(sample_shape);
    Ok(MultiviewBatch {
        views: Tensor::new(shape, data)?,
        labels: labels.iter().flat_map(|&y| std::iter::repeat(y).take(k)).collect(),
        sources: (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect(),
        slots: (0..n).flat_map(|_| slots.iter().copied()).collect(),
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize) -> Tensor<f32> {
        let data: Vec<f64> = (0..n * 3 * 4 * 4).map(|i| (i % 17) as f64 / 16.0).collect();
        Tensor::from_f64(vec![n, 3, 4, 4], &data).unwrap()
    }

    #[test]
    fn afa_mode_layout() {
        let x = images(2);
        let mv = build_multiview(&x, &[4, 7], &[0, 1], &ViewMode::Afa, &Pipeline::standard(), 3).unwrap();
        assert_eq!(mv.len(), 6);
        assert_eq!(mv.adversarial_mask(), vec![true, true, false, true, true, false]);
        assert_eq!(mv.labels, vec![4, 4, 4, 7, 7, 7]);
        // The first slot is the untransformed source.
        assert_eq!(mv.views.row(0), x.row(0));
        assert_eq!(mv.views.row(3), x.row(1));
    }

    #[test]
    fn plain_mode_duplicates_labels() {
        let x = images(4);
        let mv = build_multiview(&x, &[0, 1, 2, 3], &[0, 1, 2, 3], &ViewMode::Plain(2), &Pipeline::standard(), 0).unwrap();
        assert_eq!(mv.len(), 8);
        assert_eq!(mv.labels, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert!(mv.adversarial_mask().iter().all(|&a| !a));
        let cb = mv.contrastive().unwrap();
        assert_eq!(cb.sources(), &[0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn single_view_is_rejected() {
        let x = images(1);
        assert!(build_multiview(&x, &[0], &[0], &ViewMode::Plain(1), &Pipeline::standard(), 0).is_err());
    }

    #[test]
    fn view_lists_parse() {
        let m = ViewMode::parse_list("T+d,T").unwrap();
        assert_eq!(m.slots(), vec![ViewSpec::TRANSFORMED_ADV, ViewSpec::TRANSFORMED]);
        let all: Vec<String> = ViewMode::Afa.slots().iter().map(|s| s.to_string()).collect();
        assert_eq!(all.join(","), "x+d,T+d,T");
        assert!(ViewMode::parse_list("y").is_err());
    }

    #[test]
    fn views_serialize_as_strings() {
        let m = ViewMode::parse_list("x+d,T").unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"custom":["x+d","T"]}"#);
        assert_eq!(serde_json::from_str::<ViewMode>(&json).unwrap(), m);
        assert!(serde_json::from_str::<ViewMode>(r#"{"custom":["q"]}"#).is_err());
    }

    #[test]
    fn labels_follow_sources_in_every_mode() {
        let x = images(3);
        for mode in [ViewMode::Plain(3), ViewMode::Afa, ViewMode::parse_list("x+d,T,T").unwrap()] {
            let mv = build_multiview(&x, &[2, 0, 1], &[5, 6, 7], &mode, &Pipeline::standard(), 1).unwrap();
            for (row, &src) in mv.sources.iter().enumerate() {
                assert_eq!(mv.labels[row], [2, 0, 1][src]);
            }
        }
    }
}
