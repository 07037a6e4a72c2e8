//! Experiment configuration: strict TOML, resolved to explicit seeds and
//! absolute paths before hashing.

use std::path::{Path, PathBuf};

use afa_core::align::{ComparisonMode, LipschitzConfig, Metric};
use afa_core::attacks::AttackConfig;
use afa_core::data::{GaussianMixtureSpec, SyntheticSpec};
use afa_core::nn::{LayerRef, LayerSpec, ModelSpec, ProjectionSpec};
use afa_core::train::{FinetuneMode, Strategy, TrainConfig};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Keys merged into every stage table before it is parsed.
    #[serde(default)]
    pub stage_defaults: Option<toml::Table>,
    #[serde(default)]
    pub runs: Vec<RunConfig>,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        spec: SyntheticSpec,
    },
    GaussianMixture {
        spec: GaussianMixtureSpec,
    },
    /// A directory of MNIST IDX files.
    Mnist {
        path: PathBuf,
        #[serde(default)]
        train_per_class: Option<usize>,
        #[serde(default)]
        test_per_class: Option<usize>,
    },
    /// A directory of CIFAR-10 binary batches.
    Cifar10 {
        path: PathBuf,
        #[serde(default)]
        train_per_class: Option<usize>,
        #[serde(default)]
        test_per_class: Option<usize>,
    },
    /// Dataset manifests written by `save_dataset`.
    Files {
        train: PathBuf,
        test: PathBuf,
    },
}

fn default_channels() -> [usize; 2] {
    [16, 32]
}

fn default_fc() -> usize {
    64
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Fully connected ReLU stack on flattened inputs.
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        projection: ProjectionSpec,
    },
    /// Two conv/pool blocks and one hidden fc layer.
    ImageCnn {
        #[serde(default = "default_channels")]
        channels: [usize; 2],
        #[serde(default = "default_fc")]
        fc: usize,
        #[serde(default)]
        projection: ProjectionSpec,
    },
    Custom {
        extractor: Vec<LayerSpec>,
        #[serde(default)]
        projection: ProjectionSpec,
    },
}

impl ModelConfig {
    pub fn spec(&self, input: &[usize], num_classes: usize) -> Result<ModelSpec> {
        let spec = match self {
            ModelConfig::Mlp { hidden, projection } => {
                let mut extractor = Vec::new();
                if input.len() > 1 {
                    extractor.push(LayerSpec::Flatten);
                }
                for &out in hidden {
                    extractor.push(LayerSpec::Fc { out });
                    extractor.push(LayerSpec::Relu);
                }
                ModelSpec {
                    input: input.to_vec(),
                    extractor,
                    projection: projection.clone(),
                    num_classes,
                }
            }
            ModelConfig::ImageCnn { channels, fc, projection } => {
                let shape: [usize; 3] = input
                    .try_into()
                    .map_err(|_| anyhow!("image_cnn needs [c, h, w] inputs, dataset gives {input:?}"))?;
                ModelSpec {
                    projection: projection.clone(),
                    ..ModelSpec::image_cnn_with(shape, num_classes, *channels, *fc)
                }
            }
            ModelConfig::Custom { extractor, projection } => ModelSpec {
                input: input.to_vec(),
                extractor: extractor.clone(),
                projection: projection.clone(),
                num_classes,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub stages: Vec<TrainConfig>,
}

fn default_finetune_epochs() -> usize {
    5
}

/// How `compare` expands a strategy name into stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Epochs of the fine-tuning stage that follows contrastive pre-training.
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    /// Keys merged over `stage_defaults` for fine-tuning stages.
    #[serde(default)]
    pub finetune_overrides: Option<toml::Table>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            finetune_epochs: default_finetune_epochs(),
            finetune_overrides: None,
        }
    }
}

/// A representation to measure alignment in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Input,
    Penultimate,
    Logits,
    /// 1-based extractor layer.
    Layer(usize),
}

impl Space {
    pub fn layer(self) -> Option<LayerRef> {
        match self {
            Space::Input => None,
            Space::Penultimate => Some(LayerRef::Penultimate),
            Space::Logits => Some(LayerRef::Logits),
            Space::Layer(i) => Some(LayerRef::Layer(i)),
        }
    }
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Space::Input => f.write_str("input"),
            Space::Penultimate => f.write_str("penultimate"),
            Space::Logits => f.write_str("logits"),
            Space::Layer(i) => write!(f, "layer{i}"),
        }
    }
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::LINF]
}

fn default_modes() -> Vec<ComparisonMode> {
    vec![ComparisonMode::TrainTest]
}

fn default_lipschitz_samples() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// One robust-accuracy column per attack.
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_modes")]
    pub modes: Vec<ComparisonMode>,
    /// Defaults to the input space without runs and the penultimate layer
    /// with them.
    #[serde(default)]
    pub spaces: Option<Vec<Space>>,
    /// Attack producing train-adv queries; defaults to the first attack.
    #[serde(default)]
    pub align_attack: Option<AttackConfig>,
    /// Jointly min-max normalise train and queries before measuring.
    #[serde(default)]
    pub normalize: bool,
    /// Neighbour counts for the accordance table.
    #[serde(default)]
    pub k: Vec<usize>,
    /// Extractor layers for the layer curve; empty probes every layer.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Also run the layer curve on adversarial queries.
    #[serde(default)]
    pub layer_attack: bool,
    #[serde(default)]
    pub lipschitz: Option<LipschitzConfig>,
    /// Leading test samples used for the Lipschitz estimate.
    #[serde(default = "default_lipschitz_samples")]
    pub lipschitz_samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            attacks: Vec::new(),
            metrics: default_metrics(),
            modes: default_modes(),
            spaces: None,
            align_attack: None,
            normalize: false,
            k: Vec::new(),
            layers: None,
            layer_attack: false,
            lipschitz: None,
            lipschitz_samples: default_lipschitz_samples(),
        }
    }
}

impl EvaluationConfig {
    pub fn spaces(&self, has_model: bool) -> Vec<Space> {
        self.spaces.clone().unwrap_or_else(|| {
            if has_model {
                vec![Space::Penultimate]
            } else {
                vec![Space::Input]
            }
        })
    }

    pub fn align_attack(&self) -> Option<&AttackConfig> {
        self.align_attack.as_ref().or(self.attacks.first())
    }
}

/// Parses and resolves a config. `base` anchors relative paths.
pub fn parse(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut root: toml::Table = text.parse().context("config is not valid TOML")?;
    let seed = match root.get("seed") {
        Some(Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(_) => bail!("seed must be an integer in 0..2^63"),
        None => bail!("seed is required"),
    };
    fill_seeds(&mut root, seed);
    let cfg: ExperimentConfig = Value::Table(root).try_into().context("config does not match the schema")?;
    Ok(resolve_paths(cfg, base))
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base).with_context(|| format!("in {}", path.display()))
}

/// Seed of stage `stage` of run `run`, derived from the experiment seed and
/// kept below 2^63 so it fits a TOML integer.
pub fn stage_seed(seed: u64, run: usize, stage: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add(run as u64 * 1_000)
        .wrapping_add(stage as u64)
        & (i64::MAX as u64)
}

fn merge(base: &toml::Table, over: &toml::Table) -> toml::Table {
    let mut out = base.clone();
    for (k, v) in over {
        match (out.get_mut(k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => *a = merge(a, b),
            _ => {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    out
}

/// Applies stage defaults and fills every missing seed so the resolved
/// config spells out all of its randomness.
fn fill_seeds(root: &mut toml::Table, seed: u64) {
    let defaults = match root.get("stage_defaults") {
        Some(Value::Table(t)) => t.clone(),
        _ => toml::Table::new(),
    };
    if let Some(Value::Table(ds)) = root.get_mut("dataset") {
        if let Some(Value::Table(spec)) = ds.get_mut("spec") {
            spec.entry("seed").or_insert(Value::Integer(seed as i64));
        }
    }
    if let Some(Value::Array(runs)) = root.get_mut("runs") {
        for (ri, run) in runs.iter_mut().enumerate() {
            let Value::Table(run) = run else { continue };
            let Some(Value::Array(stages)) = run.get_mut("stages") else { continue };
            for (si, stage) in stages.iter_mut().enumerate() {
                let Value::Table(t) = stage else { continue };
                let mut merged = merge(&defaults, t);
                merged
                    .entry("seed")
                    .or_insert(Value::Integer(stage_seed(seed, ri, si) as i64));
                *t = merged;
            }
        }
    }
    if let Some(Value::Table(ev)) = root.get_mut("evaluation") {
        if let Some(Value::Table(l)) = ev.get_mut("lipschitz") {
            l.entry("seed").or_insert(Value::Integer(seed as i64));
        }
    }
}

fn resolve_paths(mut cfg: ExperimentConfig, base: &Path) -> ExperimentConfig {
    let abs = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    match &mut cfg.dataset {
        DatasetConfig::Mnist { path, .. } | DatasetConfig::Cifar10 { path, .. } => abs(path),
        DatasetConfig::Files { train, test } => {
            abs(train);
            abs(test);
        }
        _ => {}
    }
    if let Some(out) = cfg.output.as_mut() {
        abs(out);
    }
    cfg
}

/// Names accepted by `compare`.
pub const COMPARE_STRATEGIES: &[&str] = &[
    "natural",
    "pgd_at",
    "trades",
    "supcon",
    "afa",
    "joint_afa_trades",
    "supcon_adv_ce",
    "adv_supcon",
];

/// Replaces the runs with one run per strategy name, each built from
/// `stage_defaults`. Encoder-only pre-training is followed by fine-tuning;
/// strategies that train the classifier themselves run alone.
pub fn expand_compare(cfg: &ExperimentConfig, names: &[String]) -> Result<ExperimentConfig> {
    let defaults = cfg.stage_defaults.clone().unwrap_or_default();
    let mut runs = Vec::new();
    for (ri, name) in names.iter().enumerate() {
        let (main, tune) = match name.as_str() {
            "natural" => (Strategy::Natural, None),
            "pgd_at" => (Strategy::PgdAt, None),
            "trades" => (Strategy::Trades { beta: 6.0 }, None),
            "supcon" => (Strategy::Supcon, Some(FinetuneMode::Slf)),
            "afa" => (
                Strategy::Afa {
                    lambda1: 1.0,
                    lambda2: 2.0,
                },
                Some(FinetuneMode::Alf),
            ),
            "joint_afa_trades" => (
                Strategy::JointAfaTrades {
                    lambda1: 1.0,
                    lambda2: 2.0,
                    beta: 6.0,
                    afa_weight: 1.0,
                },
                None,
            ),
            "supcon_adv_ce" => (Strategy::SupconAdvCe, None),
            "adv_supcon" => (Strategy::AdvSupcon, Some(FinetuneMode::Alf)),
            other => bail!("unknown strategy {other:?}; expected one of {}", COMPARE_STRATEGIES.join(", ")),
        };
        let mut stages = vec![stage(&defaults, &main, None, stage_seed(cfg.seed, ri, 0))?];
        if let Some(mode) = tune {
            let over = cfg.compare.finetune_overrides.clone().unwrap_or_default();
            let base = merge(&defaults, &over);
            let s = stage(
                &base,
                &Strategy::Finetune { mode },
                Some(cfg.compare.finetune_epochs),
                stage_seed(cfg.seed, ri, 1),
            )?;
            stages.push(s);
        }
        runs.push(RunConfig {
            name: name.clone(),
            stages,
        });
    }
    Ok(ExperimentConfig { runs, ..cfg.clone() })
}

fn stage(defaults: &toml::Table, strategy: &Strategy, epochs: Option<usize>, seed: u64) -> Result<TrainConfig> {
    let mut t = defaults.clone();
    t.insert("strategy".into(), Value::try_from(strategy)?);
    if let Some(e) = epochs {
        t.insert("epochs".into(), Value::Integer(e as i64));
    }
    t.entry("seed").or_insert(Value::Integer(seed as i64));
    Value::Table(t)
        .try_into()
        .with_context(|| format!("stage_defaults do not form a valid {} stage", strategy.name()))
}

/// Every problem with the config, including missing input files.
pub fn validate(cfg: &ExperimentConfig) -> Vec<String> {
    let mut errs = Vec::new();
    if cfg.name.trim().is_empty() {
        errs.push("name must not be empty".into());
    }
    match &cfg.dataset {
        DatasetConfig::Synthetic { spec } => {
            if let Err(e) = spec.validate() {
                errs.push(format!("dataset: {e}"));
            }
        }
        DatasetConfig::GaussianMixture { spec } => {
            if let Err(e) = spec.validate() {
                errs.push(format!("dataset: {e}"));
            }
        }
        DatasetConfig::Mnist { path, .. } => {
            for f in [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ] {
                let p = path.join(f);
                if !p.is_file() {
                    errs.push(format!("dataset: missing {}", p.display()));
                }
            }
        }
        DatasetConfig::Cifar10 { path, .. } => {
            for f in crate::runner::cifar_files() {
                let p = path.join(f);
                if !p.is_file() {
                    errs.push(format!("dataset: missing {}", p.display()));
                }
            }
        }
        DatasetConfig::Files { train, test } => {
            for p in [train, test] {
                if !p.is_file() {
                    errs.push(format!("dataset: missing {}", p.display()));
                }
            }
        }
    }
    let mut names = std::collections::BTreeSet::new();
    for run in &cfg.runs {
        if !names.insert(run.name.as_str()) {
            errs.push(format!("run name {:?} is used twice", run.name));
        }
        if run.name.is_empty() || !run.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            errs.push(format!("run name {:?} must be non-empty and use only [A-Za-z0-9._-]", run.name));
        }
        if run.stages.is_empty() {
            errs.push(format!("run {:?} has no stages", run.name));
        }
        for (i, s) in run.stages.iter().enumerate() {
            if let Err(e) = s.validate() {
                errs.push(format!("run {:?} stage {}: {e}", run.name, i + 1));
            }
        }
    }
    if !cfg.runs.is_empty() && cfg.model.is_none() {
        errs.push("runs need a [model] section".into());
    }
    let ev = &cfg.evaluation;
    for (i, a) in ev.attacks.iter().enumerate() {
        if let Err(e) = a.validate() {
            errs.push(format!("evaluation.attacks[{i}]: {e}"));
        }
    }
    if let Some(a) = &ev.align_attack {
        if let Err(e) = a.validate() {
            errs.push(format!("evaluation.align_attack: {e}"));
        }
    }
    if ev.metrics.is_empty() {
        errs.push("evaluation.metrics must not be empty".into());
    }
    let has_model = !cfg.runs.is_empty();
    let spaces = ev.spaces(has_model);
    if !has_model && spaces.iter().any(|s| *s != Space::Input) {
        errs.push("feature spaces need at least one run".into());
    }
    if ev.modes.contains(&ComparisonMode::TrainAdv) {
        if !has_model {
            errs.push("train-adv queries need a trained model (add a run)".into());
        }
        if ev.align_attack().is_none() {
            errs.push("train-adv queries need evaluation.attacks or evaluation.align_attack".into());
        }
    }
    if !has_model && (!ev.k.is_empty() || ev.layers.is_some() || ev.lipschitz.is_some()) {
        errs.push("accordance, layer curves and Lipschitz estimates need a run".into());
    }
    if ev.k.contains(&0) {
        errs.push("evaluation.k values must be at least 1".into());
    }
    if ev.layer_attack && ev.attacks.is_empty() && ev.align_attack.is_none() {
        errs.push("evaluation.layer_attack needs an attack".into());
    }
    if let Some(l) = &ev.lipschitz {
        if let Err(e) = l.validate() {
            errs.push(format!("evaluation.lipschitz: {e}"));
        }
        if ev.lipschitz_samples == 0 {
            errs.push("evaluation.lipschitz_samples must be at least 1".into());
        }
    }
    errs
}

/// Hex of the first 8 bytes of SHA-256 over the canonical JSON form of the
/// resolved config. The output directory does not count.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canon = serde_json::to_string(&ExperimentConfig {
        output: None,
        ..cfg.clone()
    })
    .expect("config serializes");
    let digest = Sha256::digest(canon.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
