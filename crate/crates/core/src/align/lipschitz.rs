//! Empirical local Lipschitz constants found by projected gradient ascent on
//! the output/input distance ratio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AlignError, Metric, MetricKind, Result};
use crate::attacks::{self, AttackConfig, AttackError};
use crate::nn::{argmax_rows, Capture, Model, Trainable};
use crate::tensor::{Graph, Tensor, Var};
use crate::Scalar;

/// What `f(x)` means in the ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputSpace {
    /// Softmax of the logits.
    Probabilities,
    /// Raw network outputs.
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzConfig {
    pub attack: AttackConfig,
    pub runs: usize,
    pub output: OutputSpace,
    pub output_metric: Metric,
    pub input_metric: Metric,
    pub seed: u64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 20),
            runs: 10,
            output: OutputSpace::Probabilities,
            output_metric: Metric::L1,
            input_metric: Metric::LINF,
            seed: 0,
        }
    }
}

impl LipschitzConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        let mut errs = Vec::new();
        if self.attack.epsilon <= 0.0 {
            errs.push("epsilon must be positive".to_string());
        }
        if !self.attack.random_start {
            errs.push("a random start is required: the ratio is undefined at x' = x".to_string());
        }
        if self.runs == 0 {
            errs.push("runs must be at least 1".to_string());
        }
        for m in [self.output_metric, self.input_metric] {
            if m.kind == MetricKind::L0 {
                errs.push("l0 has no useful gradient; use l1, l2 or linf".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(AlignError::Config(errs.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest ratio over all runs.
    pub k: f64,
    /// Largest ratio found by each run.
    pub ratios: Vec<f64>,
    /// Accuracy on the perturbed batch of the run that attained `k`.
    pub worst_accuracy: f64,
    /// Probes dropped because `x' = x`.
    pub skipped: usize,
}

/// Per-row norm of `[n, d]` as a graph node `[n]`.
fn row_norm<S: Scalar>(g: &mut Graph<S>, v: Var, metric: Metric) -> Result<Var, AttackError> {
    let out = match metric.kind {
        MetricKind::L1 => {
            let a = g.abs(v)?;
            g.sum_rows(a)?
        }
        MetricKind::Linf => {
            let a = g.abs(v)?;
            g.max_rows(a)?
        }
        MetricKind::L2 => {
            let u = g.l2_normalize(v)?;
            let p = g.mul(v, u)?;
            g.sum_rows(p)?
        }
        MetricKind::L0 => unreachable!("rejected by validate"),
    };
    Ok(out)
}

fn flat_shape<S: Scalar>(t: &Tensor<S>) -> [usize; 2] {
    [t.rows(), t.row_len()]
}

/// Estimates `K` for an arbitrary differentiable map `forward` from `[n, ...]`
/// inputs to `[n, m]` outputs.
pub fn lipschitz_estimate_with<S, F>(
    mut forward: F,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &LipschitzConfig,
) -> Result<LipschitzEstimate>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, Var) -> Result<Var, AttackError>,
{
    cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(AlignError::Config(format!("{} labels for {} inputs", labels.len(), x.rows())));
    }
    let mut output = |g: &mut Graph<S>, xv: Var| -> Result<Var, AttackError> {
        let y = forward(g, xv)?;
        Ok(match cfg.output {
            OutputSpace::Probabilities => g.softmax(y)?,
            OutputSpace::Logits => y,
        })
    };
    let clean = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = output(&mut g, xv)?;
        g.value(y).clone()
    };
    let shape = flat_shape(x);

    let mut ratios = Vec::with_capacity(cfg.runs);
    let mut best: Option<(f64, f64)> = None;
    let mut skipped = 0;
    for run in 0..cfg.runs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(run as u64);
        let result = attacks::pgd(
            |g: &mut Graph<S>, xv: Var| -> Result<Var, AttackError> {
                let y = output(g, xv)?;
                let c = g.constant(clean.clone());
                let dy = g.sub(y, c)?;
                let num = row_norm(g, dy, cfg.output_metric)?;
                let x0 = g.constant(x.clone());
                let dx = g.sub(xv, x0)?;
                let dx = g.reshape(dx, shape.to_vec())?;
                let den = row_norm(g, dx, cfg.input_metric)?;
                // Rows with x' = x get denominator 1 and numerator 0.
                let fix: Vec<S> = g.value(den).data().iter().map(|&v| if v == S::zero() { S::one() } else { S::zero() }).collect();
                let fix = g.constant(Tensor::new(vec![fix.len()], fix)?);
                let den = g.add(den, fix)?;
                let ratio = g.div(num, den)?;
                Ok(g.sum(ratio)?)
            },
            x,
            &cfg.attack,
            &mut rng,
        )?;
        let adv = result.adversarial(x);
        let mut g = Graph::new();
        let av = g.constant(adv.clone());
        let yv = output(&mut g, av)?;
        let y = g.value(yv).clone();
        let mut run_max = 0.0f64;
        for i in 0..x.rows() {
            let din = cfg.input_metric.distance(adv.row(i), x.row(i));
            if din == 0.0 {
                skipped += 1;
                continue;
            }
            let dout = cfg.output_metric.distance(y.row(i), clean.row(i));
            run_max = run_max.max(dout / din);
        }
        ratios.push(run_max);
        if best.map_or(true, |(k, _)| run_max > k) {
            let preds = argmax_rows(&y);
            let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
            best = Some((run_max, correct as f64 / labels.len().max(1) as f64));
        }
    }
    let (k, worst_accuracy) = best.expect("runs >= 1");
    Ok(LipschitzEstimate {
        k,
        ratios,
        worst_accuracy,
        skipped,
    })
}

/// Estimates `K` for a classifier.
pub fn lipschitz_estimate<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &LipschitzConfig,
) -> Result<LipschitzEstimate> {
    lipschitz_estimate_with(
        |g, xv| {
            let p = model.bind(g, Trainable::NONE);
            Ok(model.forward(g, &p, xv, &Capture::logits())?.logits.expect("captured"))
        },
        x,
        labels,
        cfg,
    )
}
