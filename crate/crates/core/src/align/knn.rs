//! Nearest-neighbour classification on raw inputs or captured features.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{check_dims, Rows};
use super::{AlignError, Labeled, Metric, Result};
use crate::attacks::{self, AttackConfig};
use crate::data::Dataset;
use crate::nn::{LayerRef, Model};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub label: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnPrediction {
    pub class: usize,
    /// Sorted by distance, then class, then index.
    pub neighbors: Vec<Neighbor>,
}

fn order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.label.cmp(&b.label))
        .then(a.index.cmp(&b.index))
}

/// k-NN decision from one row of distances to the reference samples.
///
/// The `k` nearest samples vote; ties go to the class with the smaller summed
/// distance, then to the lower class. With `k = 1` this is the class of the
/// nearest reference sample, lowest class first among equidistant ones.
pub fn knn_from_distances(distances: &[f64], labels: &[usize], k: usize) -> Result<KnnPrediction> {
    if distances.is_empty() {
        return Err(AlignError::EmptyReference);
    }
    if k == 0 || k > distances.len() {
        return Err(AlignError::Config(format!(
            "k = {k} must lie in 1..={} (reference size)",
            distances.len()
        )));
    }
    let mut all: Vec<Neighbor> = distances
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(index, (&distance, &label))| Neighbor { index, label, distance })
        .collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, order);
        all.truncate(k);
    }
    all.sort_unstable_by(order);
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for n in &all {
        match tally.iter_mut().find(|t| t.0 == n.label) {
            Some(t) => {
                t.1 += 1;
                t.2 += n.distance;
            }
            None => tally.push((n.label, 1, n.distance)),
        }
    }
    let best = tally
        .iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .expect("k >= 1");
    Ok(KnnPrediction {
        class: best.0,
        neighbors: all,
    })
}

/// k-NN prediction for a single query row.
pub fn knn_predict<S: Scalar>(query: &[S], train: &Labeled<S>, k: usize, metric: Metric) -> Result<KnnPrediction> {
    metric.validate().map_err(AlignError::Config)?;
    check_dims(query.len(), train.x.row_len())?;
    let d: Vec<f64> = (0..train.len()).map(|j| metric.distance(query, train.x.row(j))).collect();
    knn_from_distances(&d, train.labels, k)
}

/// k-NN class of every row of `queries`, computed in parallel.
pub fn knn_classify<S: Scalar>(queries: &Tensor<S>, train: &Labeled<S>, k: usize, metric: Metric) -> Result<Vec<usize>> {
    metric.validate().map_err(AlignError::Config)?;
    check_dims(queries.row_len(), train.x.row_len())?;
    if train.is_empty() {
        return Err(AlignError::EmptyReference);
    }
    let (q, r) = (Rows::new(queries), Rows::new(train.x));
    (0..q.n)
        .into_par_iter()
        .map(|i| {
            let x = q.row(i);
            let d: Vec<f64> = (0..r.n).map(|j| metric.distance(x, r.row(j))).collect();
            knn_from_distances(&d, train.labels, k).map(|p| p.class)
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    1.0 - attacks::error_rate(predictions, labels)
}

/// 1-NN accuracy of `test` against `train` in input space.
pub fn nn_accuracy<S: Scalar>(train: &Labeled<S>, test: &Labeled<S>, metric: Metric) -> Result<f64> {
    Ok(accuracy(&knn_classify(test.x, train, 1, metric)?, test.labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracy {
    pub layer: LayerRef,
    pub accuracy: f64,
}

/// 1-NN accuracy of every requested extractor layer (all layers when
/// `layers` is empty), using train features as the reference, followed by the
/// network's own accuracy as the `Logits` entry. When `attack` is given the
/// queries are PGD examples against the network's cross-entropy.
pub fn layer_accuracy_curve<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    train: &Dataset<S>,
    test: &Dataset<S>,
    layers: &[usize],
    metric: Metric,
    attack: Option<(&AttackConfig, &mut R)>,
) -> Result<Vec<LayerAccuracy>> {
    let queries = match attack {
        Some((cfg, rng)) => attacks::ce_attack(model, test.samples(), test.labels(), cfg, rng)?.adversarial(test.samples()),
        None => test.samples().clone(),
    };
    let layers: Vec<usize> = if layers.is_empty() {
        (1..=model.depth()).collect()
    } else {
        layers.to_vec()
    };
    let mut out = Vec::with_capacity(layers.len() + 1);
    for l in layers {
        let layer = LayerRef::Layer(l);
        let ftrain = flat(model.activations(train.samples(), layer)?)?;
        let fquery = flat(model.activations(&queries, layer)?)?;
        let reference = Labeled::new(&ftrain, train.labels())?;
        let pred = knn_classify(&fquery, &reference, 1, metric)?;
        out.push(LayerAccuracy {
            layer,
            accuracy: accuracy(&pred, test.labels()),
        });
    }
    out.push(LayerAccuracy {
        layer: LayerRef::Logits,
        accuracy: accuracy(&model.predict(&queries)?, test.labels()),
    });
    Ok(out)
}

fn flat<S: Scalar>(t: Tensor<S>) -> Result<Tensor<S>> {
    let (n, d) = (t.rows(), t.row_len());
    Ok(t.reshape(vec![n, d])?)
}

/// Fraction of queries whose k-NN majority class over penultimate features
/// (train set as reference) equals the network prediction.
pub fn accordance_rate<S: Scalar>(
    model: &Model<S>,
    train: &Dataset<S>,
    queries: &Tensor<S>,
    k: usize,
    metric: Metric,
) -> Result<f64> {
    let ftrain = model.activations(train.samples(), LayerRef::Penultimate)?;
    let fquery = model.activations(queries, LayerRef::Penultimate)?;
    let reference = Labeled::new(&ftrain, train.labels())?;
    let votes = knn_classify(&fquery, &reference, k, metric)?;
    let net = model.predict(queries)?;
    Ok(accuracy(&votes, &net))
}
