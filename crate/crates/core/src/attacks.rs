//! L∞ projected gradient ascent on the input.
//!
//! [`pgd`] attacks any scalar graph function of the input. The model-based
//! helpers bind parameters as constants, so an attack never produces
//! parameter gradients and never changes the model.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{self, ContrastiveBatch, LossConfig, LossError};
use crate::nn::{Capture, Model, NnError, Trainable};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("non-finite input gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("attack loss at iteration {iteration}: {source}")]
    Loss {
        iteration: usize,
        #[source]
        source: Box<AttackError>,
    },
    #[error("attack loss is not a scalar (shape {0:?})")]
    NonScalar(Vec<usize>),
    #[error("row mask has {got} entries for {rows} rows")]
    RowMask { rows: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Losses(#[from] LossError),
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;

/// Rows per graph in the model-based attacks.
const ATTACK_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ budget in input units. Zero pins the perturbation to zero.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    #[serde(default = "yes")]
    pub random_start: bool,
    #[serde(default = "unit_range")]
    pub clamp: (f64, f64),
}

fn yes() -> bool {
    true
}

fn unit_range() -> (f64, f64) {
    (0.0, 1.0)
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        Self {
            epsilon,
            step_size,
            iterations,
            random_start: true,
            clamp: unit_range(),
        }
    }

    /// One full-budget signed step from the clean input.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon,
            iterations: 1,
            random_start: false,
            clamp: unit_range(),
        }
    }

    pub fn unclamped(mut self) -> Self {
        self.clamp = (f64::NEG_INFINITY, f64::INFINITY);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            errs.push(format!("epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            errs.push(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.iterations == 0 {
            errs.push("iterations must be at least 1".into());
        }
        if !(self.clamp.0 < self.clamp.1) {
            errs.push(format!("clamp range {:?} is empty", self.clamp));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(AttackError::Config(errs.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<S> {
    pub delta: Tensor<S>,
    /// Loss at the iterate each step started from.
    pub trace: Vec<f64>,
    /// Classifier predictions on `x + delta`; empty for model-free attacks.
    pub predictions: Vec<usize>,
}

impl<S: Scalar> AttackResult<S> {
    pub fn adversarial(&self, x: &Tensor<S>) -> Tensor<S> {
        let data = x.data().iter().zip(self.delta.data()).map(|(&a, &d)| a + d).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

/// Keeps `delta` in the ε-ball and `x + delta` in the clamp range.
fn project<S: Scalar>(x: &[S], delta: &mut [S], eps: S, lo: S, hi: S) {
    for (d, &xv) in delta.iter_mut().zip(x) {
        let v = d.max(-eps).min(eps);
        let mut nd = (xv + v).max(lo).min(hi) - xv;
        // `xv + nd` can round one ulp past a bound; step back inside.
        let ulp = S::epsilon() * xv.abs().max(nd.abs()).max(S::min_positive_value());
        while xv + nd > hi {
            nd -= ulp;
        }
        while xv + nd < lo {
            nd += ulp;
        }
        *d = nd;
    }
}

/// PGD with L∞ sign steps. `row_mask`, when given, selects the rows that may
/// be perturbed; other rows keep a zero perturbation.
pub fn pgd_masked<S, R, F, E>(
    mut loss_fn: F,
    x: &Tensor<S>,
    row_mask: Option<&[bool]>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult<S>>
where
    S: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&mut Graph<S>, Var) -> Result<Var, E>,
    E: Into<AttackError>,
{
    cfg.validate()?;
    let rows = x.rows();
    if let Some(m) = row_mask {
        if m.len() != rows {
            return Err(AttackError::RowMask { rows, got: m.len() });
        }
    }
    let row_len = x.row_len();
    let active = |i: usize| row_mask.map_or(true, |m| m[i / row_len]);
    let eps = S::lit(cfg.epsilon);
    let step = S::lit(cfg.step_size);
    let (lo, hi) = (S::lit(cfg.clamp.0), S::lit(cfg.clamp.1));

    let mut delta = vec![S::zero(); x.len()];
    if cfg.random_start && cfg.epsilon > 0.0 {
        for (i, d) in delta.iter_mut().enumerate() {
            if active(i) {
                *d = S::lit(rng.gen_range(-cfg.epsilon..=cfg.epsilon));
            }
        }
    }
    project(x.data(), &mut delta, eps, lo, hi);

    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let wrap = |e: AttackError| AttackError::Loss {
            iteration,
            source: Box::new(e),
        };
        let point: Vec<S> = x.data().iter().zip(&delta).map(|(&a, &d)| a + d).collect();
        let mut g = Graph::new();
        let xv = g.param(Tensor::new(x.shape().to_vec(), point)?);
        let loss = loss_fn(&mut g, xv).map_err(|e| wrap(e.into()))?;
        let lt = g.value(loss);
        if lt.len() != 1 {
            return Err(AttackError::NonScalar(lt.shape().to_vec()));
        }
        trace.push(lt.item().as_f64());
        let grads = g.backward(loss).map_err(|e| wrap(e.into()))?;
        let Some(grad) = grads.get(xv) else {
            // The loss does not depend on the input: nothing to ascend.
            continue;
        };
        if !grad.all_finite() {
            return Err(AttackError::NonFiniteGradient { iteration });
        }
        for (i, (d, &gv)) in delta.iter_mut().zip(grad.data()).enumerate() {
            if active(i) && gv != S::zero() {
                *d += step * gv.signum();
            }
        }
        project(x.data(), &mut delta, eps, lo, hi);
    }
    Ok(AttackResult {
        delta: Tensor::new(x.shape().to_vec(), delta)?,
        trace,
        predictions: Vec::new(),
    })
}

/// PGD on every row of `x`.
pub fn pgd<S, R, F, E>(loss_fn: F, x: &Tensor<S>, cfg: &AttackConfig, rng: &mut R) -> Result<AttackResult<S>>
where
    S: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&mut Graph<S>, Var) -> Result<Var, E>,
    E: Into<AttackError>,
{
    pgd_masked(loss_fn, x, None, cfg, rng)
}

/// Runs `attack` on consecutive row chunks and stitches the results.
fn chunked<S: Scalar>(
    x: &Tensor<S>,
    mut attack: impl FnMut(&Tensor<S>, std::ops::Range<usize>) -> Result<AttackResult<S>>,
) -> Result<AttackResult<S>> {
    let mut deltas = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    let mut start = 0;
    while start < x.rows() {
        let end = (start + ATTACK_CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let part = x.select_rows(&idx)?;
        let r = attack(&part, start..end)?;
        // Per-iteration trace of the whole batch is the row-weighted mean.
        let w = (end - start) as f64 / x.rows() as f64;
        if trace.is_empty() {
            trace = r.trace.iter().map(|v| v * w).collect();
        } else {
            trace.iter_mut().zip(&r.trace).for_each(|(a, b)| *a += b * w);
        }
        deltas.push(r.delta);
        start = end;
    }
    let refs: Vec<&Tensor<S>> = deltas.iter().collect();
    Ok(AttackResult {
        delta: Tensor::concat_rows(&refs)?,
        trace,
        predictions: Vec::new(),
    })
}

fn with_predictions<S: Scalar>(model: &Model<S>, x: &Tensor<S>, mut r: AttackResult<S>) -> Result<AttackResult<S>> {
    r.predictions = model.predict(&r.adversarial(x))?;
    Ok(r)
}

/// Maximises the classifier's cross-entropy on `labels`.
pub fn ce_attack<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult<S>> {
    let r = chunked(x, |part, range| {
        let y = &labels[range];
        pgd(
            |g, xv| -> Result<Var> {
                let p = model.bind(g, Trainable::NONE);
                let logits = model.forward(g, &p, xv, &Capture::logits())?.logits.expect("captured");
                Ok(losses::cross_entropy(g, logits, y)?)
            },
            part,
            cfg,
            rng,
        )
    })?;
    with_predictions(model, x, r)
}

/// Maximises `KL(f(x) || f(x + delta))`, the TRADES inner problem.
pub fn kl_attack<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    x: &Tensor<S>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult<S>> {
    let clean = model.logits(x)?;
    let r = chunked(x, |part, range| {
        let idx: Vec<usize> = range.collect();
        let target = clean.select_rows(&idx)?;
        pgd(
            |g, xv| -> Result<Var> {
                let p = model.bind(g, Trainable::NONE);
                let q = model.forward(g, &p, xv, &Capture::logits())?.logits.expect("captured");
                let c = g.constant(target.clone());
                Ok(losses::kl_divergence(g, c, q)?)
            },
            part,
            cfg,
            rng,
        )
    })?;
    with_predictions(model, x, r)
}

/// Maximises the AFA loss of the perturbed multiview batch `views` against
/// its own clean embeddings. Only rows selected by `adv_slots` are perturbed.
pub fn afa_attack<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    views: &Tensor<S>,
    batch: &ContrastiveBatch,
    adv_slots: &[bool],
    loss_cfg: &LossConfig,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult<S>> {
    let clean = model.embeddings(views)?;
    pgd_masked(
        |g, xv| -> Result<Var> {
            let p = model.bind(g, Trainable::NONE);
            let feats = model.forward(g, &p, xv, &Capture::features())?.penultimate;
            let z = model.project(g, &p, feats)?;
            let bank = g.constant(clean.clone());
            Ok(losses::afa_loss(g, z, bank, batch, loss_cfg)?)
        },
        views,
        Some(adv_slots),
        cfg,
        rng,
    )
}

/// Adaptive attack: PGD on the AFA loss with one view per sample and the
/// clean batch as the bank. Returns the fraction of samples whose prediction
/// on the perturbed input differs from the label.
pub fn adaptive_afa_attack<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    x: &Tensor<S>,
    labels: &[usize],
    loss_cfg: &LossConfig,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<f64> {
    let r = chunked(x, |part, range| {
        let batch = ContrastiveBatch::source_major(&labels[range], 1)?;
        let mask = vec![true; part.rows()];
        afa_attack(model, part, &batch, &mask, loss_cfg, cfg, rng)
    })?;
    let r = with_predictions(model, x, r)?;
    Ok(error_rate(&r.predictions, labels))
}

pub fn error_rate(predictions: &[usize], labels: &[usize]) -> f64 {
    let wrong = predictions.iter().zip(labels).filter(|(p, y)| p != y).count();
    wrong as f64 / labels.len().max(1) as f64
}
