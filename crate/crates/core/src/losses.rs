//! Classification, divergence and contrastive losses.
//!
//! Every loss is recorded on a [`Graph`] so it can be differentiated with
//! respect to parameters (training) or inputs (attacks). Contrastive losses
//! are plain sums over anchors; dividing by the batch size is left to the
//! caller.
//!
//! The AFA loss contrasts each perturbed anchor against the whole clean
//! multiview batch. By default that bank contains the anchor's own clean
//! counterpart, which therefore counts as a positive;
//! [`LossConfig::afa_include_self`] turns this off.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Bound, Capture, Model, NnError};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("anchor {anchor} has no positive samples")]
    EmptyPositives { anchor: usize },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("batch layout: {0}")]
    Layout(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub joint_afa_weight: f64,
    /// Keep the anchor's own clean counterpart in the AFA contrastive view.
    pub afa_include_self: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            lambda1: 1.0,
            lambda2: 2.0,
            beta: 6.0,
            joint_afa_weight: 0.1,
            afa_include_self: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            errs.push(format!("lambda1/lambda2 must be non-negative, got {}/{}", self.lambda1, self.lambda2));
        } else if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            errs.push("lambda1 and lambda2 cannot both be zero".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            errs.push(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.joint_afa_weight >= 0.0 && self.joint_afa_weight.is_finite()) {
            errs.push(format!("joint_afa_weight must be non-negative, got {}", self.joint_afa_weight));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LossError::Config(errs.join("; ")))
        }
    }
}

/// Row bookkeeping of a multiview batch: label, source sample and view slot
/// of every row, plus which rows act as anchors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveBatch {
    labels: Vec<usize>,
    sources: Vec<usize>,
    views: Vec<usize>,
    anchors: Vec<bool>,
}

impl ContrastiveBatch {
    pub fn new(labels: Vec<usize>, sources: Vec<usize>, views: Vec<usize>) -> Result<Self> {
        if labels.len() != sources.len() || labels.len() != views.len() {
            return Err(LossError::Layout(format!(
                "{} labels, {} sources, {} views",
                labels.len(),
                sources.len(),
                views.len()
            )));
        }
        if labels.is_empty() {
            return Err(LossError::Layout("empty batch".into()));
        }
        let anchors = vec![true; labels.len()];
        Ok(Self {
            labels,
            sources,
            views,
            anchors,
        })
    }

    /// Source-major layout: rows `k*i .. k*(i+1)` are the views of source `i`.
    pub fn source_major(source_labels: &[usize], k: usize) -> Result<Self> {
        let labels = source_labels.iter().flat_map(|&y| std::iter::repeat(y).take(k)).collect();
        let sources = (0..source_labels.len()).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let views = (0..source_labels.len()).flat_map(|_| 0..k).collect();
        Self::new(labels, sources, views)
    }

    /// Restricts the anchor set; at least one row must remain an anchor.
    pub fn with_anchors(mut self, anchors: Vec<bool>) -> Result<Self> {
        if anchors.len() != self.labels.len() || !anchors.iter().any(|&a| a) {
            return Err(LossError::Layout("anchor mask must cover every row and select one".into()));
        }
        self.anchors = anchors;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn views(&self) -> &[usize] {
        &self.views
    }

    pub fn anchor_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.anchors[i]).collect()
    }
}

fn check_rows<S: Scalar>(g: &Graph<S>, z: Var, rows: usize, what: &str) -> Result<()> {
    let t = g.value(z);
    if t.shape().len() != 2 || t.rows() != rows {
        return Err(LossError::Layout(format!(
            "{what} has shape {:?}, batch has {rows} rows",
            t.shape()
        )));
    }
    Ok(())
}

/// `sum_i -1/|P_i| sum_{p in P_i} log softmax_{A_i}(a_i . b / tau)[p]`.
///
/// `view[i][j]` selects `A_i` and `pos[i][j]` selects `P_i`, both over the
/// rows of `bank`. `anchor_ids` names the anchors in error messages.
fn contrastive_core<S: Scalar>(
    g: &mut Graph<S>,
    anchors: Var,
    bank: Var,
    view: Vec<bool>,
    pos: &[bool],
    anchor_ids: &[usize],
    tau: f64,
) -> Result<Var> {
    let m = g.value(bank).rows();
    let mut weights = vec![S::zero(); pos.len()];
    for (r, (prow, wrow)) in pos.chunks(m).zip(weights.chunks_mut(m)).enumerate() {
        let count = prow.iter().filter(|&&p| p).count();
        if count == 0 {
            return Err(LossError::EmptyPositives { anchor: anchor_ids[r] });
        }
        let w = S::lit(1.0 / count as f64);
        for (wv, &p) in wrow.iter_mut().zip(prow) {
            if p {
                *wv = w;
            }
        }
    }
    let sim = g.matmul_nt(anchors, bank)?;
    let logits = g.scale(sim, S::lit(1.0 / tau))?;
    let logp = g.masked_log_softmax(logits, view)?;
    let shape = g.value(logp).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights)?);
    let weighted = g.mul(logp, w)?;
    let total = g.sum(weighted)?;
    Ok(g.neg(total)?)
}

fn peer_loss<S: Scalar>(
    g: &mut Graph<S>,
    z: Var,
    batch: &ContrastiveBatch,
    cfg: &LossConfig,
    positive: impl Fn(usize, usize) -> bool,
) -> Result<Var> {
    cfg.validate()?;
    let n = batch.len();
    check_rows(g, z, n, "embeddings")?;
    let rows = batch.anchor_rows();
    let mut view = Vec::with_capacity(rows.len() * n);
    let mut pos = Vec::with_capacity(rows.len() * n);
    for &i in &rows {
        for j in 0..n {
            view.push(j != i);
            pos.push(j != i && positive(i, j));
        }
    }
    let anchors = if rows.len() == n { z } else { g.select_rows(z, &rows)? };
    contrastive_core(g, anchors, z, view, &pos, &rows, cfg.temperature)
}

/// Self-supervised contrastive loss: positives are the other views of the
/// anchor's source sample.
pub fn contrastive_self<S: Scalar>(g: &mut Graph<S>, z: Var, batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<Var> {
    peer_loss(g, z, batch, cfg, |i, j| batch.sources[i] == batch.sources[j])
}

/// Supervised contrastive loss with the sum over positives outside the log.
pub fn contrastive_sup<S: Scalar>(g: &mut Graph<S>, z: Var, batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<Var> {
    peer_loss(g, z, batch, cfg, |i, j| batch.labels[i] == batch.labels[j])
}

/// AFA loss: anchor `i` is the perturbed embedding `adv_z[i]`; its view is the
/// full clean batch `clean_z` and its positives the clean rows sharing its
/// label.
pub fn afa_loss<S: Scalar>(
    g: &mut Graph<S>,
    adv_z: Var,
    clean_z: Var,
    batch: &ContrastiveBatch,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = batch.len();
    check_rows(g, adv_z, n, "adversarial embeddings")?;
    check_rows(g, clean_z, n, "clean embeddings")?;
    let rows = batch.anchor_rows();
    let mut view = Vec::with_capacity(rows.len() * n);
    let mut pos = Vec::with_capacity(rows.len() * n);
    for &i in &rows {
        for j in 0..n {
            let in_view = cfg.afa_include_self || j != i;
            view.push(in_view);
            pos.push(in_view && batch.labels[i] == batch.labels[j]);
        }
    }
    let anchors = if rows.len() == n { adv_z } else { g.select_rows(adv_z, &rows)? };
    contrastive_core(g, anchors, clean_z, view, &pos, &rows, cfg.temperature)
}

fn one_hot<S: Scalar>(labels: &[usize], classes: usize, scale: f64) -> Result<Tensor<S>> {
    let mut data = vec![S::zero(); labels.len() * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(LossError::LabelOutOfRange { row, label, classes });
        }
        data[row * classes + label] = S::lit(scale);
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    check_rows(g, logits, labels.len(), "logits")?;
    let classes = g.value(logits).row_len();
    let pick = one_hot(labels, classes, -1.0 / labels.len() as f64)?;
    let pick = g.constant(pick);
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, pick)?;
    Ok(g.sum(picked)?)
}

/// Mean over rows of `KL(softmax(p) || softmax(q))`.
pub fn kl_divergence<S: Scalar>(g: &mut Graph<S>, p_logits: Var, q_logits: Var) -> Result<Var> {
    let (tp, tq) = (g.value(p_logits), g.value(q_logits));
    if tp.shape() != tq.shape() || tp.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "kl_divergence",
            shapes: vec![tp.shape().to_vec(), tq.shape().to_vec()],
        }
        .into());
    }
    let rows = tp.rows();
    let lp = g.log_softmax(p_logits)?;
    let lq = g.log_softmax(q_logits)?;
    let p = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    Ok(g.scale(total, S::lit(1.0 / rows as f64))?)
}

/// `CE(f(x), y) + beta * KL(f(x) || f(x_adv))`.
pub fn trades_objective<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    params: &Bound,
    x: Var,
    x_adv: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let clean = model.forward(g, params, x, &Capture::logits())?.logits.expect("logits captured");
    let ce = cross_entropy(g, clean, labels)?;
    if cfg.beta == 0.0 {
        return Ok(ce);
    }
    let adv = model.forward(g, params, x_adv, &Capture::logits())?.logits.expect("logits captured");
    let kl = kl_divergence(g, clean, adv)?;
    let kl = g.scale(kl, S::lit(cfg.beta))?;
    Ok(g.add(ce, kl)?)
}

/// `lambda1 * L_sup(clean) + lambda2 * L_AFA(adv, clean)`; a zero-weight term
/// is not evaluated.
pub fn afa_objective<S: Scalar>(
    g: &mut Graph<S>,
    clean_z: Var,
    adv_z: Var,
    batch: &ContrastiveBatch,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut terms = Vec::with_capacity(2);
    if cfg.lambda1 != 0.0 {
        let sup = contrastive_sup(g, clean_z, batch, cfg)?;
        terms.push(g.scale(sup, S::lit(cfg.lambda1))?);
    }
    if cfg.lambda2 != 0.0 {
        let afa = afa_loss(g, adv_z, clean_z, batch, cfg)?;
        terms.push(g.scale(afa, S::lit(cfg.lambda2))?);
    }
    Ok(match terms[..] {
        [a, b] => g.add(a, b)?,
        [a] => a,
        _ => unreachable!("validated config keeps one term"),
    })
}

/// `trades + joint_afa_weight * afa` on plain values.
pub fn joint_loss(trades_value: f64, afa_value: f64, cfg: &LossConfig) -> Result<f64> {
    if !trades_value.is_finite() || !afa_value.is_finite() {
        return Err(LossError::NonFinite("joint loss input"));
    }
    Ok(trades_value + cfg.joint_afa_weight * afa_value)
}

/// Graph form of [`joint_loss`].
pub fn joint_loss_var<S: Scalar>(g: &mut Graph<S>, trades: Var, afa: Var, cfg: &LossConfig) -> Result<Var> {
    let scaled = g.scale(afa, S::lit(cfg.joint_afa_weight))?;
    Ok(g.add(trades, scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_f64(vec![rows.len(), rows[0].len()], &flat).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct triple loop over anchors, positives and view members.
    fn oracle(
        anchors: &[Vec<f64>],
        bank: &[Vec<f64>],
        in_view: impl Fn(usize, usize) -> bool,
        is_pos: impl Fn(usize, usize) -> bool,
        tau: f64,
    ) -> f64 {
        let mut total = 0.0;
        for (i, a) in anchors.iter().enumerate() {
            let ps: Vec<usize> = (0..bank.len()).filter(|&p| in_view(i, p) && is_pos(i, p)).collect();
            let mut inner = 0.0;
            for &p in &ps {
                let mut denom = 0.0;
                for (j, b) in bank.iter().enumerate() {
                    if in_view(i, j) {
                        denom += (dot(a, b) / tau).exp();
                    }
                }
                inner += ((dot(a, &bank[p]) / tau).exp() / denom).ln();
            }
            total += -inner / ps.len() as f64;
        }
        total
    }

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |logits: &[f64], shape: Vec<usize>, labels: &[usize]| {
            eval(|g| {
                let l = g.constant(Tensor::from_f64(shape, logits).unwrap());
                cross_entropy(g, l, labels)
            })
        };
        assert!((ce(&[0.3; 5], vec![1, 5], &[2]) - 5f64.ln()).abs() < 1e-12);
        assert!((ce(&[0.0, 0.0], vec![1, 2], &[1]) - 2f64.ln()).abs() < 1e-12);
        let confident = ce(&[20.0, 0.0], vec![1, 2], &[0]);
        assert!((confident - (-20f64).exp().ln_1p()).abs() < 1e-15);
        assert!((confident - 2.061e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let err = cross_entropy(&mut g, l, &[0, 3]).unwrap_err();
        assert!(matches!(err, LossError::LabelOutOfRange { row: 1, label: 3, classes: 3 }));
    }

    fn kl_value(p: &[f64], q: &[f64]) -> f64 {
        eval(|g| {
            let a = g.constant(Tensor::from_f64(vec![1, p.len()], p).unwrap());
            let b = g.constant(Tensor::from_f64(vec![1, q.len()], q).unwrap());
            kl_divergence(g, a, b)
        })
    }

    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        let soft = |v: &[f64]| {
            let s: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / s).collect::<Vec<_>>()
        };
        let (sp, sq) = (soft(p), soft(q));
        sp.iter().zip(&sq).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_value(&[0.4, -1.0, 2.0], &[0.4, -1.0, 2.0]), 0.0);
        let fwd = kl_value(&[0.0, 0.0], &[0.0, 20.0]);
        assert!((fwd - kl_oracle(&[0.0, 0.0], &[0.0, 20.0])).abs() < 1e-12);
        assert!((fwd - 9.306852).abs() < 1e-6, "{fwd}");
        let back = kl_value(&[0.0, 20.0], &[0.0, 0.0]);
        assert!((back - kl_oracle(&[0.0, 20.0], &[0.0, 0.0])).abs() < 1e-12);
        assert!((fwd - back).abs() > 1.0);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2, 4]).unwrap());
        assert!(kl_divergence(&mut g, a, b).is_err());
    }

    #[test]
    fn identical_embeddings_give_closed_form() {
        let z = vec![vec![0.6, 0.8]; 4];
        let batch = ContrastiveBatch::source_major(&[0, 0], 2).unwrap();
        let want = 4.0 * 3f64.ln();
        let s = eval(|g| {
            let v = g.constant(tensor(&z));
            contrastive_self(g, v, &batch, &cfg())
        });
        let p = eval(|g| {
            let v = g.constant(tensor(&z));
            contrastive_sup(g, v, &batch, &cfg())
        });
        assert!((s - want).abs() < 1e-12);
        assert!((p - want).abs() < 1e-12);
    }

    #[test]
    fn two_views_of_one_source_give_zero() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let batch = ContrastiveBatch::source_major(&[3], 2).unwrap();
        let s = eval(|g| {
            let v = g.constant(tensor(&z));
            contrastive_self(g, v, &batch, &cfg())
        });
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_anchor_example() {
        // Bank: two positives orthogonal to the anchor, one negative collinear,
        // one negative orthogonal.
        let bank = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, -1.0, 0.0]];
        let batch = ContrastiveBatch::new(vec![0, 0, 1, 1], vec![0, 1, 2, 3], vec![0; 4])
            .unwrap()
            .with_anchors(vec![true, false, false, false])
            .unwrap();
        let adv = vec![vec![1.0, 0.0, 0.0], bank[1].clone(), bank[2].clone(), bank[3].clone()];
        let v = eval(|g| {
            let a = g.constant(tensor(&adv));
            let c = g.constant(tensor(&bank));
            afa_loss(g, a, c, &batch, &cfg())
        });
        let want = (3.0 + 2f64.exp()).ln();
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        assert!((want - 2.340753).abs() < 1e-6);
    }

    #[test]
    fn self_counterpart_is_a_positive_by_default() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = unit_rows(&mut rng, 4, 3);
        let batch = ContrastiveBatch::source_major(&[0, 1], 2).unwrap();
        let labels = batch.labels().to_vec();
        let with_self = eval(|g| {
            let a = g.constant(tensor(&z));
            let c = g.constant(tensor(&z));
            afa_loss(g, a, c, &batch, &cfg())
        });
        let want = oracle(&z, &z, |_, _| true, |i, p| labels[i] == labels[p], 0.5);
        assert!((with_self - want).abs() < 1e-12);
        assert!((with_self - 5.4482490294).abs() < 1e-9);

        let excl = LossConfig {
            afa_include_self: false,
            ..cfg()
        };
        let without = eval(|g| {
            let a = g.constant(tensor(&z));
            let c = g.constant(tensor(&z));
            afa_loss(g, a, c, &batch, &excl)
        });
        // Without the self pair and with delta = 0, this is exactly L_sup.
        let sup = eval(|g| {
            let c = g.constant(tensor(&z));
            contrastive_sup(g, c, &batch, &cfg())
        });
        assert!((without - sup).abs() < 1e-12);
    }

    #[test]
    fn empty_positive_set_names_anchor() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let batch = ContrastiveBatch::new(vec![0, 0, 1], vec![0, 1, 2], vec![0; 3]).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.constant(tensor(&z));
        let err = contrastive_sup(&mut g, v, &batch, &cfg()).unwrap_err();
        assert!(matches!(err, LossError::EmptyPositives { anchor: 2 }));
    }

    fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
        let n = rng.gen_range(2..=4);
        let k = rng.gen_range(2..=3);
        let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
        (labels, k)
    }

    #[test]
    fn oracle_equivalence_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..50 {
            let (src_labels, k) = random_batch(&mut rng);
            let batch = ContrastiveBatch::source_major(&src_labels, k).unwrap();
            let kn = batch.len();
            let tau = rng.gen_range(0.1..1.0);
            let c = LossConfig {
                temperature: tau,
                ..cfg()
            };
            let z = unit_rows(&mut rng, kn, 5);
            let za = unit_rows(&mut rng, kn, 5);
            let (lab, src) = (batch.labels().to_vec(), batch.sources().to_vec());

            let got = eval(|g| {
                let v = g.constant(tensor(&z));
                contrastive_self(g, v, &batch, &c)
            });
            let want = oracle(&z, &z, |i, j| i != j, |i, p| src[i] == src[p], tau);
            assert!((got - want).abs() < 1e-6);

            let got = eval(|g| {
                let v = g.constant(tensor(&z));
                contrastive_sup(g, v, &batch, &c)
            });
            let want = oracle(&z, &z, |i, j| i != j, |i, p| lab[i] == lab[p], tau);
            assert!((got - want).abs() < 1e-6);

            let got = eval(|g| {
                let a = g.constant(tensor(&za));
                let v = g.constant(tensor(&z));
                afa_loss(g, a, v, &batch, &c)
            });
            let want = oracle(&za, &z, |_, _| true, |i, p| lab[i] == lab[p], tau);
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn self_equals_sup_when_labels_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..5 {
            let labels: Vec<usize> = (0..n).collect();
            let batch = ContrastiveBatch::source_major(&labels, 2).unwrap();
            let z = unit_rows(&mut rng, 2 * n, 4);
            let s = eval(|g| {
                let v = g.constant(tensor(&z));
                contrastive_self(g, v, &batch, &cfg())
            });
            let p = eval(|g| {
                let v = g.constant(tensor(&z));
                contrastive_sup(g, v, &batch, &cfg())
            });
            assert!((s - p).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_temperature_gives_uniform_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = ContrastiveBatch::source_major(&[0, 1, 0], 2).unwrap();
        let z = unit_rows(&mut rng, 6, 4);
        let c = LossConfig {
            temperature: 1e6,
            ..cfg()
        };
        let s = eval(|g| {
            let v = g.constant(tensor(&z));
            contrastive_sup(g, v, &batch, &c)
        });
        assert!((s - 6.0 * 5f64.ln()).abs() < 1e-3);
        let a = eval(|g| {
            let v = g.constant(tensor(&z));
            let w = g.constant(tensor(&z));
            afa_loss(g, v, w, &batch, &c)
        });
        assert!((a - 6.0 * 6f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = ContrastiveBatch::source_major(&[0, 1, 1], 2).unwrap();
            let z = tensor(&unit_rows(&mut rng, 6, 3));
            let bank = tensor(&unit_rows(&mut rng, 6, 3));
            let e = grad_check(|g, x| contrastive_self(g, x, &batch, &cfg()).map_err(unwrap_tensor), &z, 1e-6).unwrap();
            assert!(e < 1e-5, "self {e}");
            let e = grad_check(|g, x| contrastive_sup(g, x, &batch, &cfg()).map_err(unwrap_tensor), &z, 1e-6).unwrap();
            assert!(e < 1e-5, "sup {e}");
            let e = grad_check(
                |g, x| {
                    let c = g.constant(bank.clone());
                    afa_loss(g, x, c, &batch, &cfg()).map_err(unwrap_tensor)
                },
                &z,
                1e-6,
            )
            .unwrap();
            assert!(e < 1e-5, "afa {e}");
        }
    }

    fn unwrap_tensor(e: LossError) -> TensorError {
        match e {
            LossError::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn ce_and_kl_gradients_match_finite_differences() {
        let x = Tensor::<f64>::from_f64(vec![2, 3], &[0.2, -1.0, 0.5, 1.5, 0.1, -0.3]).unwrap();
        let q = Tensor::<f64>::from_f64(vec![2, 3], &[0.0, 0.4, -0.2, 0.9, -1.1, 0.3]).unwrap();
        let e = grad_check(|g, x| cross_entropy(g, x, &[2, 0]).map_err(unwrap_tensor), &x, 1e-6).unwrap();
        assert!(e < 1e-5);
        let e = grad_check(
            |g, x| {
                let c = g.constant(q.clone());
                kl_divergence(g, x, c).map_err(unwrap_tensor)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-5);
        let e = grad_check(
            |g, x| {
                let c = g.constant(q.clone());
                kl_divergence(g, c, x).map_err(unwrap_tensor)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-5);
    }

    #[test]
    fn afa_objective_weight_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = ContrastiveBatch::source_major(&[0, 1, 0], 3).unwrap();
        let z = unit_rows(&mut rng, 9, 4);
        let za = unit_rows(&mut rng, 9, 4);
        let run = |c: &LossConfig, which: u8| {
            eval(|g| {
                let v = g.constant(tensor(&z));
                let a = g.constant(tensor(&za));
                match which {
                    0 => afa_objective(g, v, a, &batch, c),
                    1 => contrastive_sup(g, v, &batch, c),
                    _ => afa_loss(g, a, v, &batch, c),
                }
            })
        };
        let base = cfg();
        let sup = run(&base, 1);
        let afa = run(&base, 2);
        assert!((run(&base, 0) - (sup + 2.0 * afa)).abs() < 1e-12);
        let only_sup = LossConfig { lambda2: 0.0, ..cfg() };
        assert_eq!(run(&only_sup, 0), sup);
        let only_afa = LossConfig { lambda1: 0.0, ..cfg() };
        assert_eq!(run(&only_afa, 0), 2.0 * afa);
    }

    #[test]
    fn joint_loss_examples() {
        assert!((joint_loss(1.0, 2.0, &cfg()).unwrap() - 1.2).abs() < 1e-15);
        let zero = LossConfig {
            joint_afa_weight: 0.0,
            ..cfg()
        };
        assert_eq!(joint_loss(0.7, 5.0, &zero).unwrap(), 0.7);
        assert!(joint_loss(f64::NAN, 1.0, &cfg()).is_err());
        assert_eq!(LossConfig::default().joint_afa_weight, 0.1);
    }

    #[test]
    fn config_validation_collects_errors() {
        let bad = LossConfig {
            temperature: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            beta: -1.0,
            ..cfg()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("temperature") && msg.contains("both be zero") && msg.contains("beta"));
    }

    #[test]
    fn trades_reduces_to_ce() {
        use crate::nn::{ModelSpec, Trainable};
        let model = Model::<f64>::new(ModelSpec::mlp(3, 2), 1).unwrap();
        let x = Tensor::from_f64(vec![2, 3], &[0.1, 0.5, 0.9, 0.3, 0.2, 0.7]).unwrap();
        let labels = [1, 0];
        let ce = eval(|g| {
            let p = model.bind(g, Trainable::NONE);
            let xv = g.constant(x.clone());
            let l = model.forward(g, &p, xv, &Capture::logits())?.logits.unwrap();
            cross_entropy(g, l, &labels)
        });
        let same = eval(|g| {
            let p = model.bind(g, Trainable::NONE);
            let xv = g.constant(x.clone());
            trades_objective(g, &model, &p, xv, xv, &labels, &cfg())
        });
        assert!((same - ce).abs() < 1e-12);
        let no_beta = LossConfig { beta: 0.0, ..cfg() };
        let shifted = x.map(|v| v + 0.05);
        let b0 = eval(|g| {
            let p = model.bind(g, Trainable::NONE);
            let xv = g.constant(x.clone());
            let xa = g.constant(shifted.clone());
            trades_objective(g, &model, &p, xv, xa, &labels, &no_beta)
        });
        assert_eq!(b0, ce);
    }
}
