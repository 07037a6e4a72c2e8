//! Training loops: natural and adversarial classification, contrastive and
//! adversarially aligned pre-training, their joint form, two ablation
//! objectives and four fine-tuning modes.

mod history;
mod optim;
mod sampler;

pub use history::{EpochRecord, TrainHistory};
pub use optim::{Decay, Schedule, Sgd, SgdConfig};
pub use sampler::{epoch_batches, Sampler};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError};
use crate::data::{build_multiview, DataError, Dataset, MultiviewBatch, Pipeline, ViewMode, ViewSpec};
use crate::losses::{self, ContrastiveBatch, LossConfig, LossError};
use crate::nn::{Bound, Capture, Model, NnError, ParamGroup, Trainable};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged { epoch: usize, step: usize, what: String },
    #[error("perturbation {found} exceeds the budget {epsilon} at epoch {epoch}")]
    BudgetViolated { epoch: usize, found: f64, epsilon: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Standard linear: classifier only, clean inputs.
    Slf,
    /// Adversarial linear: classifier only, PGD inputs.
    Alf,
    /// Standard full: extractor and classifier, clean inputs.
    Sff,
    /// Adversarial full: extractor and classifier, PGD inputs.
    Aff,
}

impl FinetuneMode {
    pub fn is_linear(self) -> bool {
        matches!(self, FinetuneMode::Slf | FinetuneMode::Alf)
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, FinetuneMode::Alf | FinetuneMode::Aff)
    }
}

/// Training objective and its coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// Cross-entropy on clean inputs.
    Natural,
    /// Supervised contrastive loss on clean views.
    Supcon,
    /// Cross-entropy on PGD examples.
    PgdAt,
    /// Clean cross-entropy plus `beta` times the KL to the perturbed output.
    Trades { beta: f64 },
    /// `lambda1 * L_sup(clean views) + lambda2 * L_AFA(perturbed vs clean)`.
    Afa { lambda1: f64, lambda2: f64 },
    /// TRADES plus `afa_weight` times the AFA objective, with independent
    /// inner maximisations for each part.
    JointAfaTrades {
        lambda1: f64,
        lambda2: f64,
        beta: f64,
        afa_weight: f64,
    },
    /// Clean supervised contrastive loss plus cross-entropy on PGD examples;
    /// the attack maximises cross-entropy.
    SupconAdvCe,
    /// Supervised contrastive loss of perturbed views only; the attack
    /// maximises that same loss.
    AdvSupcon,
    /// Fine-tuning of a pre-trained model.
    Finetune { mode: FinetuneMode },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Natural => "natural",
            Strategy::Supcon => "supcon",
            Strategy::PgdAt => "pgd_at",
            Strategy::Trades { .. } => "trades",
            Strategy::Afa { .. } => "afa",
            Strategy::JointAfaTrades { .. } => "joint_afa_trades",
            Strategy::SupconAdvCe => "supcon_adv_ce",
            Strategy::AdvSupcon => "adv_supcon",
            Strategy::Finetune { mode } => match mode {
                FinetuneMode::Slf => "finetune_slf",
                FinetuneMode::Alf => "finetune_alf",
                FinetuneMode::Sff => "finetune_sff",
                FinetuneMode::Aff => "finetune_aff",
            },
        }
    }

    /// Parameter groups the outer step updates.
    pub fn trainable(&self) -> Trainable {
        match self {
            Strategy::Natural | Strategy::PgdAt | Strategy::Trades { .. } => Trainable::NETWORK,
            Strategy::Supcon | Strategy::Afa { .. } | Strategy::AdvSupcon => Trainable::ENCODER,
            Strategy::JointAfaTrades { .. } | Strategy::SupconAdvCe => Trainable::ALL,
            Strategy::Finetune { mode } if mode.is_linear() => Trainable::CLASSIFIER,
            Strategy::Finetune { .. } => Trainable::NETWORK,
        }
    }

    /// Whether batches are expanded into multiple views.
    pub fn uses_views(&self) -> bool {
        match self {
            Strategy::Supcon | Strategy::Afa { .. } | Strategy::SupconAdvCe | Strategy::AdvSupcon => true,
            Strategy::JointAfaTrades { afa_weight, .. } => *afa_weight != 0.0,
            _ => false,
        }
    }

    pub fn default_views(&self) -> ViewMode {
        match self {
            Strategy::Afa { .. } | Strategy::JointAfaTrades { .. } => ViewMode::Afa,
            Strategy::AdvSupcon => ViewMode::Custom(vec![ViewSpec::TRANSFORMED_ADV; 2]),
            _ => ViewMode::Plain(2),
        }
    }

    pub fn default_sampler(&self) -> Sampler {
        if self.uses_views() {
            Sampler::Balanced
        } else {
            Sampler::Shuffle
        }
    }

    /// Objective maximised by the inner attack, if any.
    pub fn inner_objective(&self) -> Option<&'static str> {
        match self {
            Strategy::Natural | Strategy::Supcon => None,
            Strategy::PgdAt | Strategy::SupconAdvCe => Some("ce"),
            Strategy::Trades { .. } => Some("kl"),
            Strategy::Afa { lambda2, .. } => (*lambda2 != 0.0).then_some("afa"),
            Strategy::JointAfaTrades { afa_weight, lambda2, .. } => {
                Some(if *afa_weight != 0.0 && *lambda2 != 0.0 { "kl+afa" } else { "kl" })
            }
            Strategy::AdvSupcon => Some("sup"),
            Strategy::Finetune { mode } => mode.is_adversarial().then_some("ce"),
        }
    }
}

/// Attack used when reporting robust accuracy during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Robust accuracy every this many epochs (0 disables it).
    #[serde(default)]
    pub robust_every: usize,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            robust_every: 0,
            attack: None,
        }
    }
}

fn default_train_attack() -> AttackConfig {
    AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 10)
}

fn default_temperature() -> f64 {
    0.5
}

fn default_pipeline() -> Pipeline {
    Pipeline::standard()
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    /// Source samples per batch (before view expansion).
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub schedule: Schedule,
    /// Inner maximisation budget.
    #[serde(default = "default_train_attack")]
    pub attack: AttackConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// View layout for contrastive strategies; `None` picks the strategy's
    /// default.
    #[serde(default)]
    pub views: Option<ViewMode>,
    #[serde(default = "default_pipeline")]
    pub augmentation: Pipeline,
    #[serde(default)]
    pub sampler: Option<Sampler>,
    /// Divide contrastive sums by the anchor count before the step.
    #[serde(default = "yes")]
    pub normalize_contrastive: bool,
    #[serde(default = "yes")]
    pub afa_include_self: bool,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(strategy: Strategy, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            strategy,
            epochs,
            batch_size,
            optimizer: SgdConfig::default(),
            schedule: Schedule::default(),
            attack: default_train_attack(),
            temperature: default_temperature(),
            views: None,
            augmentation: default_pipeline(),
            sampler: None,
            normalize_contrastive: true,
            afa_include_self: true,
            eval: EvalConfig::default(),
            seed,
        }
    }

    pub fn views(&self) -> ViewMode {
        self.views.clone().unwrap_or_else(|| self.strategy.default_views())
    }

    pub fn sampler(&self) -> Sampler {
        self.sampler.unwrap_or_else(|| self.strategy.default_sampler())
    }

    /// Loss coefficients implied by the strategy.
    pub fn loss_config(&self) -> LossConfig {
        let mut c = LossConfig {
            temperature: self.temperature,
            afa_include_self: self.afa_include_self,
            ..LossConfig::default()
        };
        match self.strategy {
            Strategy::Trades { beta } => c.beta = beta,
            Strategy::Afa { lambda1, lambda2 } => {
                c.lambda1 = lambda1;
                c.lambda2 = lambda2;
            }
            Strategy::JointAfaTrades {
                lambda1,
                lambda2,
                beta,
                afa_weight,
            } => {
                c.lambda1 = lambda1;
                c.lambda2 = lambda2;
                c.beta = beta;
                c.joint_afa_weight = afa_weight;
            }
            _ => {}
        }
        c
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        self.optimizer.check(&mut errs);
        self.schedule.check(self.epochs, &mut errs);
        if let Err(e) = self.attack.validate() {
            errs.push(format!("attack: {e}"));
        }
        if let Some(a) = &self.eval.attack {
            if let Err(e) = a.validate() {
                errs.push(format!("eval.attack: {e}"));
            }
        }
        if self.eval.robust_every > 0 && self.eval.attack.is_none() {
            errs.push("eval.robust_every needs eval.attack".into());
        }
        let coefs: Vec<(&str, f64)> = match self.strategy {
            Strategy::Trades { beta } => vec![("beta", beta)],
            Strategy::Afa { lambda1, lambda2 } => vec![("lambda1", lambda1), ("lambda2", lambda2)],
            Strategy::JointAfaTrades {
                lambda1,
                lambda2,
                beta,
                afa_weight,
            } => vec![
                ("lambda1", lambda1),
                ("lambda2", lambda2),
                ("beta", beta),
                ("afa_weight", afa_weight),
            ],
            _ => vec![],
        };
        for (name, v) in coefs {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("strategy.{name} must be finite and non-negative, got {v}"));
            }
        }
        if let Err(LossError::Config(e)) = self.loss_config().validate() {
            errs.extend(e.split("; ").map(|s| format!("loss: {s}")));
        }
        if self.strategy.uses_views() {
            let slots = self.views().slots();
            if slots.len() < 2 {
                errs.push(format!("views: contrastive strategies need >= 2 views, got {}", slots.len()));
            }
            let adv = slots.iter().any(|s| s.adversarial);
            if matches!(self.strategy, Strategy::Afa { .. } | Strategy::AdvSupcon) && !adv {
                errs.push("views: this strategy needs at least one adversarial view (x+d or T+d)".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(errs))
        }
    }
}

/// Independent random streams so that one purpose never shifts another's
/// draws.
#[derive(Clone, Copy, Debug)]
enum Purpose {
    Shuffle = 1,
    Augment = 2,
    Attack = 3,
    Eval = 4,
}

fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Clean and robust accuracy of a classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub clean_accuracy: f64,
    pub robust_accuracy: Option<f64>,
}

/// Clean accuracy, plus PGD accuracy when `attack` is given.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &Dataset<S>,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<Evaluation> {
    let clean = model.predict(data.samples())?;
    let clean_accuracy = 1.0 - attacks::error_rate(&clean, data.labels());
    let robust_accuracy = match attack {
        Some(cfg) => {
            let mut rng = stream(seed, Purpose::Eval);
            let r = attacks::ce_attack(model, data.samples(), data.labels(), cfg, &mut rng)?;
            Some(1.0 - attacks::error_rate(&r.predictions, data.labels()))
        }
        None => None,
    };
    Ok(Evaluation {
        clean_accuracy,
        robust_accuracy,
    })
}

/// Value and named parts of one batch objective.
struct StepLoss {
    loss: Var,
    parts: Vec<(&'static str, Var)>,
    max_delta: f64,
}

fn max_abs<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
}

struct Step<'a, S: Scalar> {
    model: &'a Model<S>,
    cfg: &'a TrainConfig,
    loss_cfg: LossConfig,
    x: Tensor<S>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    aug_seed: u64,
}

impl<'a, S: Scalar> Step<'a, S> {
    fn logits(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.model.forward(g, p, x, &Capture::logits())?.logits.expect("captured"))
    }

    fn embed(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let f = self.model.forward(g, p, x, &Capture::features())?.penultimate;
        Ok(self.model.project(g, p, f)?)
    }

    fn multiview(&self) -> Result<(MultiviewBatch<S>, ContrastiveBatch)> {
        let mv = build_multiview(
            &self.x,
            &self.labels,
            &self.ids,
            &self.cfg.views(),
            &self.cfg.augmentation,
            self.aug_seed,
        )?;
        let cb = mv.contrastive()?;
        Ok((mv, cb))
    }

    /// Contrastive sum, optionally divided by the anchor count.
    fn normalize(&self, g: &mut Graph<S>, v: Var, batch: &ContrastiveBatch) -> Result<Var> {
        if self.cfg.normalize_contrastive {
            let n = batch.anchor_rows().len().max(1);
            Ok(g.scale(v, S::lit(1.0 / n as f64))?)
        } else {
            Ok(v)
        }
    }

    fn ce_adv(&self, rng: &mut ChaCha8Rng) -> Result<(Tensor<S>, f64)> {
        let r = attacks::ce_attack(self.model, &self.x, &self.labels, &self.cfg.attack, rng)?;
        Ok((r.adversarial(&self.x), max_abs(&r.delta)))
    }

    fn afa_views(&self, mv: &MultiviewBatch<S>, cb: &ContrastiveBatch, rng: &mut ChaCha8Rng) -> Result<(Tensor<S>, f64)> {
        let r = attacks::afa_attack(
            self.model,
            &mv.views,
            cb,
            &mv.adversarial_mask(),
            &self.loss_cfg,
            &self.cfg.attack,
            rng,
        )?;
        Ok((r.adversarial(&mv.views), max_abs(&r.delta)))
    }

    fn build(&self, g: &mut Graph<S>, p: &Bound, rng: &mut ChaCha8Rng) -> Result<StepLoss> {
        let lc = &self.loss_cfg;
        let mut parts = Vec::new();
        let mut max_delta = 0.0;
        let loss = match &self.cfg.strategy {
            Strategy::Natural
            | Strategy::Finetune {
                mode: FinetuneMode::Slf | FinetuneMode::Sff,
            } => {
                let xv = g.constant(self.x.clone());
                let z = self.logits(g, p, xv)?;
                losses::cross_entropy(g, z, &self.labels)?
            }
            Strategy::PgdAt
            | Strategy::Finetune {
                mode: FinetuneMode::Alf | FinetuneMode::Aff,
            } => {
                let (adv, d) = self.ce_adv(rng)?;
                max_delta = d;
                let xv = g.constant(adv);
                let z = self.logits(g, p, xv)?;
                losses::cross_entropy(g, z, &self.labels)?
            }
            Strategy::Trades { .. } => {
                let r = attacks::kl_attack(self.model, &self.x, &self.cfg.attack, rng)?;
                max_delta = max_abs(&r.delta);
                let xv = g.constant(self.x.clone());
                let av = g.constant(r.adversarial(&self.x));
                losses::trades_objective(g, self.model, p, xv, av, &self.labels, lc)?
            }
            Strategy::Supcon => {
                let (mv, cb) = self.multiview()?;
                let vv = g.constant(mv.views);
                let z = self.embed(g, p, vv)?;
                let sup = losses::contrastive_sup(g, z, &cb, lc)?;
                self.normalize(g, sup, &cb)?
            }
            Strategy::Afa { lambda2, .. } => {
                let (mv, cb) = self.multiview()?;
                let adv = if *lambda2 != 0.0 {
                    let (adv, d) = self.afa_views(&mv, &cb, rng)?;
                    max_delta = d;
                    Some(adv)
                } else {
                    None
                };
                let vv = g.constant(mv.views);
                let clean_z = self.embed(g, p, vv)?;
                let adv_z = match adv {
                    Some(a) => {
                        let av = g.constant(a);
                        self.embed(g, p, av)?
                    }
                    None => clean_z,
                };
                let obj = losses::afa_objective(g, clean_z, adv_z, &cb, lc)?;
                self.normalize(g, obj, &cb)?
            }
            Strategy::JointAfaTrades { afa_weight, .. } => {
                // TRADES inner problem on the originals first, then the AFA
                // inner problem on the augmented views.
                let r = attacks::kl_attack(self.model, &self.x, &self.cfg.attack, rng)?;
                max_delta = max_abs(&r.delta);
                let xv = g.constant(self.x.clone());
                let av = g.constant(r.adversarial(&self.x));
                let trades = losses::trades_objective(g, self.model, p, xv, av, &self.labels, lc)?;
                if *afa_weight == 0.0 {
                    trades
                } else {
                    parts.push(("trades", trades));
                    let (mv, cb) = self.multiview()?;
                    let (adv, d) = if lc.lambda2 != 0.0 {
                        let (a, d) = self.afa_views(&mv, &cb, rng)?;
                        (Some(a), d)
                    } else {
                        (None, 0.0)
                    };
                    max_delta = f64::max(max_delta, d);
                    let vv = g.constant(mv.views);
                    let clean_z = self.embed(g, p, vv)?;
                    let adv_z = match adv {
                        Some(a) => {
                            let av = g.constant(a);
                            self.embed(g, p, av)?
                        }
                        None => clean_z,
                    };
                    let obj = losses::afa_objective(g, clean_z, adv_z, &cb, lc)?;
                    let obj = self.normalize(g, obj, &cb)?;
                    parts.push(("afa", obj));
                    losses::joint_loss_var(g, trades, obj, lc)?
                }
            }
            Strategy::SupconAdvCe => {
                let (mv, cb) = self.multiview()?;
                let (adv, d) = self.ce_adv(rng)?;
                max_delta = d;
                let vv = g.constant(mv.views);
                let z = self.embed(g, p, vv)?;
                let sup = losses::contrastive_sup(g, z, &cb, lc)?;
                let sup = self.normalize(g, sup, &cb)?;
                let av = g.constant(adv);
                let logits = self.logits(g, p, av)?;
                let ce = losses::cross_entropy(g, logits, &self.labels)?;
                parts.push(("sup", sup));
                parts.push(("ce", ce));
                g.add(sup, ce)?
            }
            Strategy::AdvSupcon => {
                let (mv, cb) = self.multiview()?;
                let model = self.model;
                let r = attacks::pgd_masked(
                    |g: &mut Graph<S>, xv: Var| -> Result<Var, AttackError> {
                        let p = model.bind(g, Trainable::NONE);
                        let f = model.forward(g, &p, xv, &Capture::features())?.penultimate;
                        let z = model.project(g, &p, f)?;
                        Ok(losses::contrastive_sup(g, z, &cb, lc)?)
                    },
                    &mv.views,
                    Some(&mv.adversarial_mask()),
                    &self.cfg.attack,
                    rng,
                )?;
                max_delta = max_abs(&r.delta);
                let av = g.constant(r.adversarial(&mv.views));
                let z = self.embed(g, p, av)?;
                let sup = losses::contrastive_sup(g, z, &cb, lc)?;
                self.normalize(g, sup, &cb)?
            }
        };
        Ok(StepLoss { loss, parts, max_delta })
    }
}

fn tensor_overflow(e: &TensorError) -> Option<String> {
    matches!(e, TensorError::NonFinite { .. }).then(|| e.to_string())
}

fn nn_overflow(e: &NnError) -> Option<String> {
    match e {
        NnError::Tensor(t) => tensor_overflow(t),
        _ => None,
    }
}

fn loss_overflow(e: &LossError) -> Option<String> {
    match e {
        LossError::NonFinite(_) => Some(e.to_string()),
        LossError::Tensor(t) => tensor_overflow(t),
        LossError::Nn(n) => nn_overflow(n),
        _ => None,
    }
}

fn attack_overflow(e: &AttackError) -> Option<String> {
    match e {
        AttackError::NonFiniteGradient { .. } => Some(e.to_string()),
        AttackError::Loss { source, .. } => attack_overflow(source),
        AttackError::Tensor(t) => tensor_overflow(t),
        AttackError::Nn(n) => nn_overflow(n),
        AttackError::Losses(l) => loss_overflow(l),
        _ => None,
    }
}

/// Non-finite values anywhere in a step, reported as divergence.
fn overflow(e: &TrainError) -> Option<String> {
    match e {
        TrainError::Tensor(t) => tensor_overflow(t),
        TrainError::Nn(n) => nn_overflow(n),
        TrainError::Loss(l) => loss_overflow(l),
        TrainError::Attack(a) => attack_overflow(a),
        _ => None,
    }
}

/// Trains `model` in place on `data`.
pub fn train<S: Scalar>(model: &mut Model<S>, data: &Dataset<S>, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_eval(model, data, None, cfg)
}

/// Trains `model` in place, reporting accuracy on `eval` after each epoch
/// when given.
pub fn train_with_eval<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset<S>,
    eval: Option<&Dataset<S>>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config(vec!["training set is empty".into()]));
    }
    let trainable = cfg.strategy.trainable();
    let loss_cfg = cfg.loss_config();
    let mut opt = Sgd::new(cfg.optimizer.clone(), model.params().len());
    let mut shuffle_rng = stream(cfg.seed, Purpose::Shuffle);
    let mut aug_rng = stream(cfg.seed, Purpose::Augment);
    let mut attack_rng = stream(cfg.seed, Purpose::Attack);
    let sampler = cfg.sampler();
    let mut history = TrainHistory::new(cfg.strategy.name());

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.schedule.lr(cfg.optimizer.lr, epoch, cfg.epochs);
        let batches = epoch_batches(data.labels(), data.num_classes(), cfg.batch_size, sampler, &mut shuffle_rng);
        let aug_seed: u64 = aug_rng.gen();
        let mut loss_sum = 0.0;
        let mut part_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut max_delta = 0.0f64;
        let mut seen = 0usize;
        for (step, idx) in batches.iter().enumerate() {
            let (x, labels) = data.batch(idx)?;
            let ctx = Step {
                model,
                cfg,
                loss_cfg: loss_cfg.clone(),
                x,
                labels,
                ids: idx.iter().map(|&i| i as u64).collect(),
                aug_seed,
            };
            let mut g = Graph::new();
            let p = model.bind(&mut g, trainable);
            let out = ctx.build(&mut g, &p, &mut attack_rng).map_err(|e| match overflow(&e) {
                Some(what) => TrainError::Diverged { epoch, step, what },
                None => e,
            })?;
            let value = g.value(out.loss).item().as_f64();
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    what: format!("loss is {value}"),
                });
            }
            if out.max_delta > cfg.attack.epsilon + 1e-6 {
                return Err(TrainError::BudgetViolated {
                    epoch,
                    found: out.max_delta,
                    epsilon: cfg.attack.epsilon,
                });
            }
            max_delta = max_delta.max(out.max_delta);
            let w = idx.len() as f64;
            loss_sum += value * w;
            for (name, v) in &out.parts {
                *part_sums.entry(name.to_string()).or_default() += g.value(*v).item().as_f64() * w;
            }
            seen += idx.len();
            let grads = g.backward(out.loss)?;
            let groups: Vec<ParamGroup> = model.groups().to_vec();
            for (slot, (&var, group)) in p.vars().iter().zip(groups).enumerate() {
                if !trainable.contains(group) {
                    continue;
                }
                if let Some(grad) = grads.get(var) {
                    let param = &mut model.params_mut()[slot];
                    opt.update(slot, param, grad, lr);
                    if !param.all_finite() {
                        return Err(TrainError::Diverged {
                            epoch,
                            step,
                            what: format!("parameter tensor {slot} is no longer finite"),
                        });
                    }
                }
            }
        }
        let n = seen.max(1) as f64;
        let (clean_accuracy, robust_accuracy) = match eval {
            Some(ev) => {
                let robust = cfg.eval.robust_every > 0 && (epoch + 1) % cfg.eval.robust_every == 0;
                let attack = if robust { cfg.eval.attack.as_ref() } else { None };
                let e = evaluate(model, ev, attack, cfg.seed)?;
                (Some(e.clean_accuracy), e.robust_accuracy)
            }
            None => (None, None),
        };
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / n,
            components: part_sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            inner_objective: cfg.strategy.inner_objective().map(str::to_string),
            clean_accuracy,
            robust_accuracy,
            max_perturbation: max_delta,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

/// Fine-tunes a pre-trained model. Linear modes leave the extractor
/// untouched; the projection head is never used.
pub fn finetune<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset<S>,
    mode: FinetuneMode,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let cfg = TrainConfig {
        strategy: Strategy::Finetune { mode },
        ..cfg.clone()
    };
    train(model, data, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::align::Metric;
    use crate::nn::ModelSpec;

    fn blobs() -> Dataset<f64> {
        let mut spec = SyntheticSpec::aligned(3, 4, 0.3, 0.25, Metric::L2, 9);
        spec.train_per_class = 8;
        let (train, _, _) = gen_synthetic::<f64>(&spec).unwrap();
        train
    }

    fn model() -> Model<f64> {
        let mut spec = ModelSpec::mlp(4, 3);
        spec.projection.out = 8;
        Model::new(spec, 3).unwrap()
    }

    fn cfg(strategy: Strategy) -> TrainConfig {
        let mut c = TrainConfig::new(strategy, 2, 12, 5);
        c.attack = AttackConfig::pgd(0.05, 0.02, 2).unclamped();
        c
    }

    fn params_of(m: &Model<f64>, group: ParamGroup) -> Vec<Tensor<f64>> {
        m.group_params(group).into_iter().cloned().collect()
    }

    #[test]
    fn every_strategy_runs_and_records_epochs() {
        let data = blobs();
        for s in [
            Strategy::Natural,
            Strategy::Supcon,
            Strategy::PgdAt,
            Strategy::Trades { beta: 6.0 },
            Strategy::Afa { lambda1: 1.0, lambda2: 2.0 },
            Strategy::JointAfaTrades {
                lambda1: 1.0,
                lambda2: 5.0,
                beta: 5.0,
                afa_weight: 0.1,
            },
            Strategy::SupconAdvCe,
            Strategy::AdvSupcon,
        ] {
            let mut m = model();
            let h = train(&mut m, &data, &cfg(s.clone())).unwrap();
            assert_eq!(h.records.len(), 2, "{}", s.name());
            assert!(h.records.iter().all(|r| r.loss.is_finite()));
            assert!(h.records.iter().all(|r| r.max_perturbation <= 0.05 + 1e-6));
            assert_eq!(h.records[0].inner_objective.as_deref(), s.inner_objective());
        }
    }

    #[test]
    fn zero_budget_pgd_matches_natural() {
        let data = blobs();
        let mut a = model();
        let mut b = model();
        train(&mut a, &data, &cfg(Strategy::Natural)).unwrap();
        let mut c = cfg(Strategy::PgdAt);
        c.attack.epsilon = 0.0;
        train(&mut b, &data, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn afa_without_adversarial_term_is_supcon() {
        let data = blobs();
        let views = ViewMode::parse_list("x+d,T+d,T").unwrap();
        let mut a = model();
        let mut b = model();
        let mut ca = cfg(Strategy::Afa { lambda1: 1.0, lambda2: 0.0 });
        ca.views = Some(views.clone());
        let mut cb = cfg(Strategy::Supcon);
        cb.views = Some(views);
        train(&mut a, &data, &ca).unwrap();
        train(&mut b, &data, &cb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weight_joint_is_trades() {
        let data = blobs();
        let mut a = model();
        let mut b = model();
        let mut ca = cfg(Strategy::JointAfaTrades {
            lambda1: 1.0,
            lambda2: 5.0,
            beta: 5.0,
            afa_weight: 0.0,
        });
        ca.sampler = Some(Sampler::Shuffle);
        train(&mut a, &data, &ca).unwrap();
        train(&mut b, &data, &cfg(Strategy::Trades { beta: 5.0 })).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_budget_adv_supcon_is_supcon() {
        let data = blobs();
        let mut a = model();
        let mut b = model();
        let mut ca = cfg(Strategy::AdvSupcon);
        ca.attack.epsilon = 0.0;
        train(&mut a, &data, &ca).unwrap();
        train(&mut b, &data, &cfg(Strategy::Supcon)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn freeze_contracts() {
        let data = blobs();
        let mut m = model();
        let head = params_of(&m, ParamGroup::Classifier);
        train(&mut m, &data, &cfg(Strategy::Afa { lambda1: 1.0, lambda2: 2.0 })).unwrap();
        assert_eq!(params_of(&m, ParamGroup::Classifier), head);

        for mode in [FinetuneMode::Slf, FinetuneMode::Alf] {
            let mut m = model();
            let g = params_of(&m, ParamGroup::Extractor);
            let h = params_of(&m, ParamGroup::Classifier);
            finetune(&mut m, &data, mode, &cfg(Strategy::Natural)).unwrap();
            assert_eq!(params_of(&m, ParamGroup::Extractor), g);
            assert_ne!(params_of(&m, ParamGroup::Classifier), h);
        }
        let mut m = model();
        let g = params_of(&m, ParamGroup::Extractor);
        let proj = params_of(&m, ParamGroup::Projection);
        finetune(&mut m, &data, FinetuneMode::Aff, &cfg(Strategy::Natural)).unwrap();
        assert_ne!(params_of(&m, ParamGroup::Extractor), g);
        assert_eq!(params_of(&m, ParamGroup::Projection), proj);
    }

    #[test]
    fn deterministic() {
        let data = blobs();
        let c = cfg(Strategy::Afa { lambda1: 1.0, lambda2: 2.0 });
        let mut a = model();
        let mut b = model();
        let ha = train(&mut a, &data, &c).unwrap();
        let hb = train(&mut b, &data, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.records[1].loss.to_bits(), hb.records[1].loss.to_bits());
    }

    #[test]
    fn natural_training_fits_separable_blobs() {
        let data = blobs();
        let mut m = model();
        let mut c = cfg(Strategy::Natural);
        c.epochs = 30;
        c.optimizer.lr = 0.1;
        c.schedule.decay = Decay::Constant;
        train(&mut m, &data, &c).unwrap();
        assert_eq!(evaluate(&m, &data, None, 0).unwrap().clean_accuracy, 1.0);
    }

    #[test]
    fn validation_lists_every_error() {
        let mut c = cfg(Strategy::Afa { lambda1: 0.0, lambda2: -1.0 });
        c.epochs = 0;
        c.optimizer.lr = -1.0;
        c.views = Some(ViewMode::Plain(1));
        let Err(TrainError::Config(errs)) = c.validate() else {
            panic!("expected config errors");
        };
        assert!(errs.len() >= 4, "{errs:?}");
    }

    #[test]
    fn diverging_loss_is_reported() {
        let data = blobs();
        let mut m = model();
        let mut c = cfg(Strategy::Natural);
        c.optimizer.lr = 1e30;
        c.schedule.decay = Decay::Constant;
        c.epochs = 5;
        let r = train(&mut m, &data, &c);
        assert!(matches!(r, Err(TrainError::Diverged { .. })), "{r:?}");
    }
}
