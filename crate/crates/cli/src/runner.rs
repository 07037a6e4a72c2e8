//! The data → train → evaluate pipeline behind `run` and `compare`.

use std::path::Path;
use std::time::Instant;

use afa_core::align::{
    accordance_rate, accuracy, alignment_report, knn_classify, layer_accuracy_curve, lipschitz_estimate,
    min_max_normalize, ComparisonMode, Labeled,
};
use afa_core::attacks::{ce_attack, AttackConfig};
use afa_core::data::{gen_gaussian_mixture, gen_synthetic, load_cifar_binary, load_dataset, load_mnist_dir, Dataset, Split};
use afa_core::nn::LayerRef;
use afa_core::train::{evaluate, train};
use afa_core::{Model32, Tensor32};
use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetConfig, ExperimentConfig, Space};
use crate::report::Table;

pub type Data = Dataset<f32>;

pub fn cifar_files() -> [&'static str; 6] {
    [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ]
}

fn per_class(d: Data, n: Option<usize>) -> Result<Data> {
    Ok(match n {
        Some(n) => d.first_per_class(n)?,
        None => d,
    })
}

/// Train and test splits described by the config.
pub fn load_data(cfg: &DatasetConfig) -> Result<(Data, Data)> {
    Ok(match cfg {
        DatasetConfig::Synthetic { spec } => {
            let (train, test, _) = gen_synthetic(spec)?;
            (train, test)
        }
        DatasetConfig::GaussianMixture { spec } => gen_gaussian_mixture(spec)?,
        DatasetConfig::Mnist {
            path,
            train_per_class,
            test_per_class,
        } => {
            let (train, test) = load_mnist_dir(path).with_context(|| format!("loading MNIST from {}", path.display()))?;
            (per_class(train, *train_per_class)?, per_class(test, *test_per_class)?)
        }
        DatasetConfig::Cifar10 {
            path,
            train_per_class,
            test_per_class,
        } => {
            let files: Vec<_> = cifar_files().iter().map(|f| path.join(f)).collect();
            let train = load_cifar_binary(&files[..5], 1, 0, 10, Split::Train)?;
            let test = load_cifar_binary(&files[5..], 1, 0, 10, Split::Test)?;
            (per_class(train, *train_per_class)?, per_class(test, *test_per_class)?)
        }
        DatasetConfig::Files { train, test } => (load(train)?, load(test)?),
    })
}

fn load(p: &Path) -> Result<Data> {
    load_dataset(p).with_context(|| format!("loading {}", p.display()))
}

/// Everything a run produces besides its tables.
pub struct Bundle {
    pub tables: Vec<Table>,
    pub checkpoints: Vec<(String, Model32)>,
    /// `(file stem, csv text)` of each training stage.
    pub histories: Vec<(String, String)>,
    pub timings: Vec<(String, f64)>,
}

/// Deterministic RNG for evaluation attacks of run `run`.
fn eval_rng(seed: u64, run: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + run as u64 * 16 + purpose);
    rng
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn layer_name(l: LayerRef) -> String {
    match l {
        LayerRef::Layer(i) => format!("layer{i}"),
        LayerRef::Penultimate => "penultimate".into(),
        LayerRef::Logits => "logits".into(),
    }
}

pub fn attack_column(a: &AttackConfig) -> String {
    format!("pgd_eps{}_steps{}", a.epsilon, a.iterations)
}

struct Tables {
    accuracy: Table,
    alignment: Table,
    pairs: Table,
    accordance: Table,
    layers: Table,
    lipschitz: Table,
}

impl Tables {
    fn new(cfg: &ExperimentConfig) -> Self {
        let mut acc_cols = vec!["run", "stages", "clean_accuracy"].into_iter().map(String::from).collect::<Vec<_>>();
        acc_cols.extend(cfg.evaluation.attacks.iter().map(attack_column));
        Self {
            accuracy: Table::new("accuracy", acc_cols),
            alignment: Table::with_header(
                "alignment",
                &[
                    "run",
                    "space",
                    "metric",
                    "mode",
                    "separation_min",
                    "separation_avg",
                    "separation_max",
                    "clustering_min",
                    "clustering_avg",
                    "clustering_max",
                    "r",
                    "R",
                    "verdict",
                    "witness",
                    "nn_accuracy",
                    "network_accuracy",
                ],
            ),
            pairs: Table::with_header("separation_pairs", &["run", "space", "metric", "mode", "class_a", "class_b", "distance"]),
            accordance: Table::with_header("accordance", &["run", "metric", "k", "clean_rate", "adversarial_rate"]),
            layers: Table::with_header("layer_curve", &["run", "metric", "layer", "clean_accuracy", "adversarial_accuracy"]),
            lipschitz: Table::with_header("lipschitz", &["run", "k", "worst_accuracy", "skipped", "ratios"]),
        }
    }
}

/// Representation of `x` in `space`.
fn represent(model: Option<&Model32>, x: &Tensor32, space: Space) -> Result<Tensor32> {
    match (space.layer(), model) {
        (None, _) => Ok(x.clone()),
        (Some(l), Some(m)) => Ok(m.activations(x, l)?),
        (Some(_), None) => anyhow::bail!("space {space} needs a model"),
    }
}

struct Subject<'a> {
    name: &'a str,
    model: Option<&'a Model32>,
    adv_test: Option<&'a Tensor32>,
}

fn alignment_rows(
    cfg: &ExperimentConfig,
    subj: &Subject,
    train: &Data,
    test: &Data,
    spaces: &[Space],
    t: &mut Tables,
) -> Result<()> {
    let ev = &cfg.evaluation;
    for &space in spaces {
        let ftrain = represent(subj.model, train.samples(), space)?;
        let ftest = represent(subj.model, test.samples(), space)?;
        let fadv = subj.adv_test.map(|a| represent(subj.model, a, space)).transpose()?;
        for &metric in &ev.metrics {
            for &mode in &ev.modes {
                let (query, qlabels, raw) = match mode {
                    ComparisonMode::TrainTrain => (&ftrain, train.labels(), train.samples()),
                    ComparisonMode::TrainTest => (&ftest, test.labels(), test.samples()),
                    ComparisonMode::TrainAdv => (
                        fadv.as_ref().context("train-adv queries were not generated")?,
                        test.labels(),
                        subj.adv_test.expect("present with fadv"),
                    ),
                };
                let normed;
                let (r, q) = if ev.normalize {
                    normed = if mode == ComparisonMode::TrainTrain {
                        let n = min_max_normalize(&[&ftrain]);
                        vec![n[0].clone(), n[0].clone()]
                    } else {
                        min_max_normalize(&[&ftrain, query])
                    };
                    (&normed[0], &normed[1])
                } else {
                    (&ftrain, query)
                };
                let reference = Labeled::new(r, train.labels())?;
                let queries = Labeled::new(q, qlabels)?;
                let rep = alignment_report(&reference, &queries, metric, mode)?;
                let nn = (mode != ComparisonMode::TrainTrain)
                    .then(|| knn_classify(q, &reference, 1, metric).map(|p| accuracy(&p, qlabels)))
                    .transpose()?;
                let net = match subj.model {
                    Some(m) if mode != ComparisonMode::TrainTrain => Some(accuracy(&m.predict(raw)?, qlabels)),
                    _ => None,
                };
                let (s, c, v) = (&rep.separation.aggregate, &rep.clustering.aggregate, &rep.verdict);
                t.alignment.push(vec![
                    subj.name.to_string(),
                    space.to_string(),
                    metric.to_string(),
                    mode.to_string(),
                    s.min.to_string(),
                    s.avg.to_string(),
                    s.max.to_string(),
                    c.min.to_string(),
                    c.avg.to_string(),
                    c.max.to_string(),
                    v.r.to_string(),
                    v.big_r.to_string(),
                    if v.aligned { "aligned" } else { "misaligned" }.to_string(),
                    v.witness.map(|w| w.to_string()).unwrap_or_default(),
                    fmt_opt(nn),
                    fmt_opt(net),
                ]);
                for p in &rep.separation.pairs {
                    t.pairs.push(vec![
                        subj.name.to_string(),
                        space.to_string(),
                        metric.to_string(),
                        mode.to_string(),
                        p.class_a.to_string(),
                        p.class_b.to_string(),
                        p.distance.to_string(),
                    ]);
                }
            }
        }
    }
    Ok(())
}

fn model_rows(cfg: &ExperimentConfig, ri: usize, name: &str, model: &Model32, train: &Data, test: &Data, t: &mut Tables) -> Result<()> {
    let ev = &cfg.evaluation;
    let stages: Vec<&str> = cfg.runs[ri].stages.iter().map(|s| s.strategy.name()).collect();
    let mut row = vec![name.to_string(), stages.join("+")];
    let clean = evaluate(model, test, None, cfg.seed)?.clean_accuracy;
    row.push(clean.to_string());
    for a in &ev.attacks {
        let e = evaluate(model, test, Some(a), cfg.seed)?;
        row.push(fmt_opt(e.robust_accuracy));
    }
    t.accuracy.push(row);

    let adv = match ev.align_attack() {
        Some(a) if ev.modes.contains(&ComparisonMode::TrainAdv) || !ev.k.is_empty() => {
            let mut rng = eval_rng(cfg.seed, ri, 0);
            Some(ce_attack(model, test.samples(), test.labels(), a, &mut rng)?.adversarial(test.samples()))
        }
        _ => None,
    };
    let subj = Subject {
        name,
        model: Some(model),
        adv_test: adv.as_ref(),
    };
    alignment_rows(cfg, &subj, train, test, &ev.spaces(true), t)?;

    for &metric in &ev.metrics {
        for &k in &ev.k {
            let c = accordance_rate(model, train, test.samples(), k, metric)?;
            let a = adv.as_ref().map(|x| accordance_rate(model, train, x, k, metric)).transpose()?;
            t.accordance.push(vec![name.into(), metric.to_string(), k.to_string(), c.to_string(), fmt_opt(a)]);
        }
    }

    if let Some(layers) = &ev.layers {
        for (mi, &metric) in ev.metrics.iter().enumerate() {
            let clean = layer_accuracy_curve::<f32, ChaCha8Rng>(model, train, test, layers, metric, None)?;
            let adv_curve = match (ev.layer_attack, ev.align_attack()) {
                (true, Some(a)) => {
                    let mut rng = eval_rng(cfg.seed, ri, 2 + mi as u64);
                    Some(layer_accuracy_curve(model, train, test, layers, metric, Some((a, &mut rng)))?)
                }
                _ => None,
            };
            for (i, c) in clean.iter().enumerate() {
                let a = adv_curve.as_ref().map(|v| v[i].accuracy);
                t.layers.push(vec![
                    name.into(),
                    metric.to_string(),
                    layer_name(c.layer),
                    c.accuracy.to_string(),
                    fmt_opt(a),
                ]);
            }
        }
    }

    if let Some(lc) = &ev.lipschitz {
        let n = ev.lipschitz_samples.min(test.len());
        let sub = test.subset(&(0..n).collect::<Vec<_>>())?;
        let est = lipschitz_estimate(model, sub.samples(), sub.labels(), lc)?;
        let ratios: Vec<String> = est.ratios.iter().map(|r| r.to_string()).collect();
        t.lipschitz.push(vec![
            name.into(),
            est.k.to_string(),
            est.worst_accuracy.to_string(),
            est.skipped.to_string(),
            ratios.join(";"),
        ]);
    }
    Ok(())
}

/// Runs the whole pipeline. `log` receives progress lines.
pub fn execute(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<Bundle> {
    let (train_set, test_set) = load_data(&cfg.dataset)?;
    log(&format!("data: {} train, {} test", train_set.len(), test_set.len()));
    let mut t = Tables::new(cfg);
    let mut bundle = Bundle {
        tables: Vec::new(),
        checkpoints: Vec::new(),
        histories: Vec::new(),
        timings: Vec::new(),
    };
    if cfg.runs.is_empty() {
        let start = Instant::now();
        let subj = Subject {
            name: "data",
            model: None,
            adv_test: None,
        };
        alignment_rows(cfg, &subj, &train_set, &test_set, &cfg.evaluation.spaces(false), &mut t)?;
        bundle.timings.push(("data".into(), start.elapsed().as_secs_f64()));
    }
    for (ri, run) in cfg.runs.iter().enumerate() {
        let start = Instant::now();
        let model_cfg = cfg.model.as_ref().context("runs need a model")?;
        let spec = model_cfg.spec(train_set.sample_shape(), train_set.num_classes())?;
        let mut model = Model32::new(spec, cfg.seed)?;
        for (si, stage) in run.stages.iter().enumerate() {
            log(&format!("run {}: stage {} ({})", run.name, si + 1, stage.strategy.name()));
            let h = train(&mut model, &train_set, stage).with_context(|| format!("run {} stage {}", run.name, si + 1))?;
            let mut csv = Vec::new();
            h.write_csv(&mut csv, false)?;
            bundle
                .histories
                .push((format!("history_{}_{}_{}", run.name, si + 1, stage.strategy.name()), String::from_utf8(csv)?));
        }
        log(&format!("run {}: evaluating", run.name));
        model_rows(cfg, ri, &run.name, &model, &train_set, &test_set, &mut t)?;
        bundle.checkpoints.push((run.name.clone(), model));
        bundle.timings.push((run.name.clone(), start.elapsed().as_secs_f64()));
    }
    let has_model = !cfg.runs.is_empty();
    let ev = &cfg.evaluation;
    if has_model {
        bundle.tables.push(t.accuracy);
    }
    if !ev.metrics.is_empty() && !ev.modes.is_empty() {
        bundle.tables.push(t.alignment);
        bundle.tables.push(t.pairs);
    }
    if has_model && !ev.k.is_empty() {
        bundle.tables.push(t.accordance);
    }
    if has_model && ev.layers.is_some() {
        bundle.tables.push(t.layers);
    }
    if has_model && ev.lipschitz.is_some() {
        bundle.tables.push(t.lipschitz);
    }
    Ok(bundle)
}

/// Feature rows of `data` at `layer`, or the raw inputs when `layer` is `None`.
pub fn embeddings(model: &Model32, data: &Data, layer: Option<LayerRef>) -> Result<Tensor32> {
    Ok(match layer {
        Some(l) => model.activations(data.samples(), l)?,
        None => data.samples().clone(),
    })
}
