use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the batch objectives.
    pub loss: f64,
    /// Named parts of composite objectives, averaged like `loss`.
    pub components: BTreeMap<String, f64>,
    /// What the inner attack maximised, if there was one.
    pub inner_objective: Option<String>,
    pub clean_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    /// Largest |delta| of any inner perturbation this epoch.
    pub max_perturbation: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub strategy: String,
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl TrainHistory {
    pub fn new(strategy: &str) -> Self {
        Self {
            strategy: strategy.to_string(),
            records: Vec::new(),
        }
    }

    /// One row per epoch. Wall time is left out unless `timing` is set, so
    /// that reruns produce identical files.
    pub fn write_csv(&self, mut w: impl Write, timing: bool) -> std::io::Result<()> {
        let names: Vec<&String> = {
            let mut n: Vec<&String> = self.records.iter().flat_map(|r| r.components.keys()).collect();
            n.sort();
            n.dedup();
            n
        };
        write!(w, "strategy,epoch,lr,loss")?;
        for n in &names {
            write!(w, ",{n}")?;
        }
        write!(w, ",inner_objective,clean_accuracy,robust_accuracy,max_perturbation")?;
        if timing {
            write!(w, ",wall_seconds")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(w, "{},{},{},{}", self.strategy, r.epoch, r.lr, r.loss)?;
            for n in &names {
                write!(w, ",{}", opt(r.components.get(*n).copied()))?;
            }
            write!(
                w,
                ",{},{},{},{}",
                r.inner_objective.as_deref().unwrap_or(""),
                opt(r.clean_accuracy),
                opt(r.robust_accuracy),
                r.max_perturbation
            )?;
            if timing {
                write!(w, ",{}", r.wall_seconds)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}
