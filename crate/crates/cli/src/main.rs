//! `afa`: config-driven alignment experiments.

mod config;
mod report;
mod runner;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use afa_core::nn::{load_checkpoint, LayerRef};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;

/// Thread-count override; the only setting read from the environment.
const THREADS_ENV: &str = "AFA_THREADS";

const PRESETS: &[(&str, &str)] = &[
    ("lemma1", include_str!("../presets/lemma1.toml")),
    ("theorem1", include_str!("../presets/theorem1.toml")),
    ("misaligned-witness", include_str!("../presets/misaligned-witness.toml")),
    ("mnist-tradeoff", include_str!("../presets/mnist-tradeoff.toml")),
    ("lambda-grid", include_str!("../presets/lambda-grid.toml")),
    ("view-ablation", include_str!("../presets/view-ablation.toml")),
    ("optimization-ablation", include_str!("../presets/optimization-ablation.toml")),
];

#[derive(Parser)]
#[command(name = "afa", version, about = "Adversarial feature alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Experiment config (TOML).
    #[arg(required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// A shipped preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and write the report bundle.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory (overrides `output` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per strategy on shared data, stage defaults and attacks.
    Compare {
        #[command(flatten)]
        source: Source,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes one CSV row per sample: id, label and feature vector.
    ExportEmbeddings {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// `penultimate`, `logits`, `input` or a 1-based layer number.
        #[arg(long, default_value = "penultimate")]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lists every problem with a config without running it.
    ValidateConfig {
        #[command(flatten)]
        source: Source,
    },
    /// Prints the tables of a finished bundle.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Lists the presets, or prints one.
    Presets { name: Option<String> },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            anyhow!("unknown preset {name:?}; available: {}", names.join(", "))
        })
}

fn load(source: &Source) -> Result<ExperimentConfig> {
    match (&source.config, &source.preset) {
        (Some(p), _) => config::load(p),
        (None, Some(name)) => {
            let cwd = std::env::current_dir()?;
            config::parse(preset_text(name)?, &cwd).with_context(|| format!("in preset {name}"))
        }
        (None, None) => bail!("give a config path or --preset"),
    }
}

fn ensure_valid(cfg: &ExperimentConfig) -> Result<()> {
    let errs = config::validate(cfg);
    if errs.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = errs.iter().map(|e| format!("  - {e}")).collect();
    bail!("{} config error(s):\n{}", errs.len(), list.join("\n"))
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    out.or_else(|| cfg.output.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set `output` in the config"))
}

fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    ensure_valid(cfg)?;
    let hash = config::config_hash(cfg);
    let _lock = report::DirLock::acquire(dir)?;
    report::mark_partial(dir, &hash, "run in progress")?;
    let resolved = toml::to_string(cfg).context("serializing the resolved config")?;
    std::fs::write(dir.join("config.toml"), format!("{}{hash}\n{resolved}", report::HASH_PREFIX))?;
    let start = Instant::now();
    let bundle = match runner::execute(cfg, |m| eprintln!("[{}] {m}", cfg.name)) {
        Ok(b) => b,
        Err(e) => {
            report::mark_partial(dir, &hash, &format!("run failed: {e:#}"))?;
            return Err(e);
        }
    };
    let manifest = report::write_bundle(dir, &cfg.name, &hash, &bundle, start.elapsed().as_secs_f64())?;
    report::clear_partial(dir)?;
    eprintln!(
        "[{}] wrote {} tables to {} (config {hash})",
        cfg.name,
        manifest.tables.len(),
        dir.display()
    );
    Ok(())
}

fn parse_layer(s: &str) -> Result<Option<LayerRef>> {
    Ok(match s {
        "input" => None,
        "penultimate" => Some(LayerRef::Penultimate),
        "logits" => Some(LayerRef::Logits),
        n => Some(LayerRef::Layer(n.parse().map_err(|_| {
            anyhow!("layer {n:?} is not input, penultimate, logits or a layer number")
        })?)),
    })
}

fn export(cfg: &ExperimentConfig, checkpoint: &Path, split: SplitArg, layer: &str, out: &Path) -> Result<()> {
    let layer = parse_layer(layer)?;
    let model = load_checkpoint::<f32>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (train, test) = runner::load_data(&cfg.dataset)?;
    let data = match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    if model.spec().input != data.sample_shape() {
        bail!(
            "checkpoint expects inputs {:?}, dataset has {:?}",
            model.spec().input,
            data.sample_shape()
        );
    }
    let feats = runner::embeddings(&model, &data, layer)?;
    let width = feats.row_len();
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..width).map(|j| format!("f{j}")));
    let mut table = report::Table::new("embeddings", header);
    for i in 0..data.len() {
        let mut row = vec![i.to_string(), data.labels()[i].to_string()];
        row.extend(feats.row(i).iter().map(|v| v.to_string()));
        table.push(row);
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, table.to_csv(&config::config_hash(cfg))?)?;
    eprintln!("wrote {} rows of width {width} to {}", data.len(), out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| anyhow!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run { source, out } => {
            let cfg = load(&source)?;
            let dir = output_dir(&cfg, out)?;
            run(&cfg, &dir)
        }
        Command::Compare { source, strategies, out } => {
            let cfg = config::expand_compare(&load(&source)?, &strategies)?;
            let dir = output_dir(&cfg, out)?;
            run(&cfg, &dir)
        }
        Command::ExportEmbeddings {
            source,
            checkpoint,
            split,
            layer,
            out,
        } => {
            let cfg = load(&source)?;
            ensure_valid(&cfg)?;
            export(&cfg, &checkpoint, split, &layer, &out)
        }
        Command::ValidateConfig { source } => {
            let cfg = load(&source)?;
            ensure_valid(&cfg)?;
            println!("ok: {} (config {})", cfg.name, config::config_hash(&cfg));
            Ok(())
        }
        Command::Report { dir, format } => {
            let text = match format {
                Format::Csv => report::bundle_csv(&dir)?,
                Format::Json => serde_json::to_string_pretty(&report::bundle_json(&dir)?)? + "\n",
            };
            print!("{text}");
            Ok(())
        }
        Command::Presets { name } => {
            match name {
                Some(n) => print!("{}", preset_text(&n)?),
                None => PRESETS.iter().for_each(|(n, _)| println!("{n}")),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
