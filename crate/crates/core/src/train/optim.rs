//! SGD with momentum and weight decay, and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl SgdConfig {
    pub(crate) fn check(&self, errs: &mut Vec<String>) {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("optimizer.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("optimizer.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("optimizer.weight_decay must be non-negative, got {}", self.weight_decay));
        }
    }
}

/// `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`, one buffer per
/// parameter tensor.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    cfg: SgdConfig,
    velocity: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: SgdConfig, num_params: usize) -> Self {
        Self {
            cfg,
            velocity: vec![None; num_params],
        }
    }

    pub fn update(&mut self, slot: usize, param: &mut Tensor<S>, grad: &Tensor<S>, lr: f64) {
        let (mu, wd, lr) = (S::lit(self.cfg.momentum), S::lit(self.cfg.weight_decay), S::lit(lr));
        let v = self.velocity[slot].get_or_insert_with(|| vec![S::zero(); grad.len()]);
        for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            *v = mu * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decay {
    Constant,
    /// Cosine annealing from the base rate to zero after warmup.
    Cosine,
    /// Multiply by `factor` at each milestone, given as a fraction of the
    /// total epochs.
    Step { milestones: Vec<f64>, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Rate at the first warmup epoch.
    #[serde(default = "default_warmup_start")]
    pub warmup_start: f64,
    #[serde(default = "default_decay")]
    pub decay: Decay,
}

fn default_warmup_start() -> f64 {
    0.01
}

fn default_decay() -> Decay {
    Decay::Cosine
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 0,
            warmup_start: default_warmup_start(),
            decay: default_decay(),
        }
    }
}

impl Schedule {
    /// Step decay at 75% and 87.5% of training.
    pub fn step_default() -> Self {
        Self {
            decay: Decay::Step {
                milestones: vec![0.75, 0.875],
                factor: 0.1,
            },
            ..Self::default()
        }
    }

    pub(crate) fn check(&self, epochs: usize, errs: &mut Vec<String>) {
        if self.warmup_epochs >= epochs.max(1) && self.warmup_epochs > 0 {
            errs.push(format!(
                "schedule.warmup_epochs ({}) must be below epochs ({epochs})",
                self.warmup_epochs
            ));
        }
        if !(self.warmup_start >= 0.0) {
            errs.push("schedule.warmup_start must be non-negative".into());
        }
        if let Decay::Step { milestones, factor } = &self.decay {
            if milestones.iter().any(|m| !(*m > 0.0 && *m <= 1.0)) {
                errs.push(format!("schedule milestones must lie in (0, 1], got {milestones:?}"));
            }
            if !(*factor > 0.0 && *factor <= 1.0) {
                errs.push(format!("schedule factor must lie in (0, 1], got {factor}"));
            }
        }
    }

    /// Learning rate for 0-based `epoch` of `epochs`.
    pub fn lr(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let w = self.warmup_epochs;
        if epoch < w {
            return self.warmup_start + (base - self.warmup_start) * epoch as f64 / w as f64;
        }
        match &self.decay {
            Decay::Constant => base,
            Decay::Cosine => {
                let span = epochs.saturating_sub(w).max(1) as f64;
                base * 0.5 * (1.0 + (PI * (epoch - w) as f64 / span).cos())
            }
            Decay::Step { milestones, factor } => {
                let passed = milestones
                    .iter()
                    .filter(|&&m| epoch >= (m * epochs as f64).round() as usize)
                    .count();
                base * factor.powi(passed as i32)
            }
        }
    }
}
