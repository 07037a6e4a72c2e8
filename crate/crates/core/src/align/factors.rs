//! Separation and clustering factors and the alignment verdict.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{check_dims, Rows};
use super::{AlignError, Labeled, Metric, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Which sets are compared: the reference set is always the training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComparisonMode {
    /// Queries are the reference set itself; a sample is never compared
    /// with itself.
    TrainTrain,
    TrainTest,
    TrainAdv,
}

impl fmt::Display for ComparisonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComparisonMode::TrainTrain => "train-train",
            ComparisonMode::TrainTest => "train-test",
            ComparisonMode::TrainAdv => "train-adv",
        })
    }
}

impl std::str::FromStr for ComparisonMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train-train" => Ok(Self::TrainTrain),
            "train-test" => Ok(Self::TrainTest),
            "train-adv" => Ok(Self::TrainAdv),
            other => Err(format!("unknown comparison mode {other:?}")),
        }
    }
}

/// Minimum, mean and maximum of a sequence, folded in order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        (n > 0).then(|| Self {
            min,
            avg: sum / n as f64,
            max,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSeparation {
    pub class_a: usize,
    pub class_b: usize,
    /// Smallest distance between a sample of one class and a sample of the
    /// other, in either direction between reference and queries.
    pub distance: f64,
}

/// Separation factor `2r`: per class pair, then aggregated over pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub metric: Metric,
    pub mode: ComparisonMode,
    pub pairs: Vec<PairSeparation>,
    #[serde(flatten)]
    pub aggregate: Aggregate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleClustering {
    /// Query row.
    pub index: usize,
    pub label: usize,
    /// Largest distance to a same-class reference sample.
    pub dist_max: f64,
    /// Smallest distance to a reference sample of another class (infinite
    /// when there is none).
    pub nearest_other: f64,
    /// No same-class reference sample other than the query itself.
    pub singleton: bool,
}

/// Clustering factor `2R`: per query sample, then aggregated over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub metric: Metric,
    pub mode: ComparisonMode,
    pub samples: Vec<SampleClustering>,
    #[serde(flatten)]
    pub aggregate: Aggregate,
    /// Classes whose only member is the query itself; their `dist_max` is 0.
    pub singleton_classes: Vec<usize>,
}

impl ClusteringReport {
    /// First sample closer to another class than to some member of its own.
    pub fn misaligned_sample(&self) -> Option<usize> {
        self.samples.iter().find(|s| s.nearest_other < s.dist_max).map(|s| s.index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentVerdict {
    pub metric: Metric,
    pub mode: ComparisonMode,
    /// Half the minimum separation.
    pub r: f64,
    /// Half the maximum clustering distance.
    #[serde(rename = "R")]
    pub big_r: f64,
    pub aligned: bool,
    /// A query sample nearer to another class than to some sample of its own
    /// class, if the data is not aligned and one exists.
    pub witness: Option<usize>,
}

/// Everything measured by one scan of the query set against the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub separation: SeparationReport,
    pub clustering: ClusteringReport,
    pub verdict: AlignmentVerdict,
}

/// Per query: smallest distance to each reference class and largest distance
/// to its own class.
struct Scan {
    mins: Vec<Vec<f64>>,
    own_max: Vec<Option<f64>>,
    num_classes: usize,
}

fn scan<S: Scalar>(reference: &Labeled<S>, query: &Labeled<S>, metric: Metric, mode: ComparisonMode) -> Result<Scan> {
    metric.validate().map_err(AlignError::Config)?;
    check_dims(reference.x.row_len(), query.x.row_len())?;
    let coincident = mode == ComparisonMode::TrainTrain;
    if coincident && (reference.len() != query.len() || reference.labels != query.labels) {
        return Err(AlignError::Config(
            "train-train mode compares a set with itself; got two different sets".into(),
        ));
    }
    let num_classes = reference.num_classes().max(query.num_classes());
    let (r, q) = (Rows::new(reference.x), Rows::new(query.x));
    let rl = reference.labels;
    let results: Vec<(Vec<f64>, Option<f64>)> = (0..q.n)
        .into_par_iter()
        .map(|i| {
            let x = q.row(i);
            let own = query.labels[i];
            let mut mins = vec![f64::INFINITY; num_classes];
            let mut own_max: Option<f64> = None;
            for j in 0..r.n {
                if coincident && i == j {
                    continue;
                }
                let d = metric.distance(x, r.row(j));
                let c = rl[j];
                if d < mins[c] {
                    mins[c] = d;
                }
                if c == own {
                    own_max = Some(own_max.map_or(d, |m: f64| m.max(d)));
                }
            }
            (mins, own_max)
        })
        .collect();
    let (mins, own_max) = results.into_iter().unzip();
    Ok(Scan {
        mins,
        own_max,
        num_classes,
    })
}

fn separation_from(
    scan: &Scan,
    reference: &Labeled<impl Scalar>,
    query: &Labeled<impl Scalar>,
    metric: Metric,
    mode: ComparisonMode,
) -> Result<SeparationReport> {
    let n = scan.num_classes;
    let mut table = vec![f64::INFINITY; n * n];
    for (i, mins) in scan.mins.iter().enumerate() {
        let b = query.labels[i];
        for (a, &d) in mins.iter().enumerate() {
            if a != b {
                let (lo, hi) = (a.min(b), a.max(b));
                let cell = &mut table[lo * n + hi];
                *cell = cell.min(d);
            }
        }
    }
    let present_ref = reference.class_counts(n);
    let present_query = query.class_counts(n);
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let compared = (present_ref[a] > 0 && present_query[b] > 0) || (present_ref[b] > 0 && present_query[a] > 0);
            if compared && table[a * n + b].is_finite() {
                pairs.push(PairSeparation {
                    class_a: a,
                    class_b: b,
                    distance: table[a * n + b],
                });
            }
        }
    }
    let aggregate = Aggregate::of(pairs.iter().map(|p| p.distance)).ok_or(AlignError::SingleClass)?;
    Ok(SeparationReport {
        metric,
        mode,
        pairs,
        aggregate,
    })
}

fn clustering_from(
    scan: &Scan,
    reference: &Labeled<impl Scalar>,
    query: &Labeled<impl Scalar>,
    metric: Metric,
    mode: ComparisonMode,
) -> Result<ClusteringReport> {
    let counts = reference.class_counts(scan.num_classes);
    if let Some(&c) = query.labels.iter().find(|&&c| counts[c] == 0) {
        return Err(AlignError::EmptyClass(c));
    }
    let mut singleton_classes = Vec::new();
    let samples: Vec<SampleClustering> = (0..query.len())
        .map(|i| {
            let label = query.labels[i];
            let singleton = scan.own_max[i].is_none();
            if singleton && !singleton_classes.contains(&label) {
                singleton_classes.push(label);
            }
            let nearest_other = scan.mins[i]
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != label)
                .fold(f64::INFINITY, |m, (_, &d)| m.min(d));
            SampleClustering {
                index: i,
                label,
                dist_max: scan.own_max[i].unwrap_or(0.0),
                nearest_other,
                singleton,
            }
        })
        .collect();
    singleton_classes.sort_unstable();
    let aggregate = Aggregate::of(samples.iter().map(|s| s.dist_max))
        .ok_or_else(|| AlignError::Config("no query samples".into()))?;
    Ok(ClusteringReport {
        metric,
        mode,
        samples,
        aggregate,
        singleton_classes,
    })
}

/// Minimum distance between every pair of distinct classes, comparing
/// reference samples of one class with query samples of the other.
pub fn separation_factor<S: Scalar>(
    reference: &Labeled<S>,
    query: &Labeled<S>,
    metric: Metric,
    mode: ComparisonMode,
) -> Result<SeparationReport> {
    let s = scan(reference, query, metric, mode)?;
    separation_from(&s, reference, query, metric, mode)
}

/// For every query sample, the largest distance to a reference sample of the
/// same class.
pub fn clustering_factor<S: Scalar>(
    reference: &Labeled<S>,
    query: &Labeled<S>,
    metric: Metric,
    mode: ComparisonMode,
) -> Result<ClusteringReport> {
    let s = scan(reference, query, metric, mode)?;
    clustering_from(&s, reference, query, metric, mode)
}

/// `r = sep.min / 2`, `R = clu.max / 2`, aligned iff `r > R`.
pub fn alignment_verdict(sep: &SeparationReport, clu: &ClusteringReport) -> Result<AlignmentVerdict> {
    if sep.mode != clu.mode || sep.metric != clu.metric {
        return Err(AlignError::ReportMismatch(format!(
            "separation is {} / {}, clustering is {} / {}",
            sep.metric, sep.mode, clu.metric, clu.mode
        )));
    }
    let r = sep.aggregate.min / 2.0;
    let big_r = clu.aggregate.max / 2.0;
    let aligned = r > big_r;
    Ok(AlignmentVerdict {
        metric: sep.metric,
        mode: sep.mode,
        r,
        big_r,
        aligned,
        witness: if aligned { None } else { clu.misaligned_sample() },
    })
}

/// Separation, clustering and verdict from a single scan.
pub fn alignment_report<S: Scalar>(
    reference: &Labeled<S>,
    query: &Labeled<S>,
    metric: Metric,
    mode: ComparisonMode,
) -> Result<AlignmentReport> {
    let s = scan(reference, query, metric, mode)?;
    let separation = separation_from(&s, reference, query, metric, mode)?;
    let clustering = clustering_from(&s, reference, query, metric, mode)?;
    let verdict = alignment_verdict(&separation, &clustering)?;
    Ok(AlignmentReport {
        separation,
        clustering,
        verdict,
    })
}

/// Rescales all sets jointly so the smallest value over all of them maps to
/// 0 and the largest to 1. A constant input maps to zeros.
pub fn min_max_normalize<S: Scalar>(sets: &[&Tensor<S>]) -> Vec<Tensor<S>> {
    let all = sets.iter().flat_map(|t| t.data().iter().copied());
    let (lo, hi) = all.fold((S::infinity(), S::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    sets.iter()
        .map(|t| {
            if span > S::zero() {
                t.map(|v| (v - lo) / span)
            } else {
                t.map(|_| S::zero())
            }
        })
        .collect()
}

impl SeparationReport {
    /// One row per class pair.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "metric,mode,class_a,class_b,min_distance")?;
        for p in &self.pairs {
            writeln!(w, "{},{},{},{},{}", self.metric, self.mode, p.class_a, p.class_b, p.distance)?;
        }
        Ok(())
    }
}

impl ClusteringReport {
    /// One row per query sample.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "metric,mode,index,label,dist_max,nearest_other,singleton")?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.metric, self.mode, s.index, s.label, s.dist_max, s.nearest_other, s.singleton
            )?;
        }
        Ok(())
    }
}

/// Table-shaped summary row: separation and clustering aggregates plus the
/// verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub metric: Metric,
    pub mode: ComparisonMode,
    pub separation: Aggregate,
    pub clustering: Aggregate,
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    pub aligned: bool,
    pub witness: Option<usize>,
    pub singleton_classes: Vec<usize>,
}

impl AlignmentReport {
    pub fn summary(&self) -> AlignmentSummary {
        AlignmentSummary {
            metric: self.verdict.metric,
            mode: self.verdict.mode,
            separation: self.separation.aggregate,
            clustering: self.clustering.aggregate,
            r: self.verdict.r,
            big_r: self.verdict.big_r,
            aligned: self.verdict.aligned,
            witness: self.verdict.witness,
            singleton_classes: self.clustering.singleton_classes.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_f64(vec![rows.len(), d], &flat).unwrap()
    }

    #[test]
    fn two_singletons() {
        let x = set(&[&[0.0], &[1.0]]);
        let l = Labeled::new(&x, &[0, 1]).unwrap();
        let sep = separation_factor(&l, &l, Metric::L1, ComparisonMode::TrainTrain).unwrap();
        assert_eq!(sep.aggregate, Aggregate { min: 1.0, avg: 1.0, max: 1.0 });
        let clu = clustering_factor(&l, &l, Metric::L1, ComparisonMode::TrainTrain).unwrap();
        assert_eq!(clu.aggregate.max, 0.0);
        assert_eq!(clu.singleton_classes, vec![0, 1]);
    }

    #[test]
    fn identical_class_members_cluster_at_zero() {
        let x = set(&[&[0.5, 0.5], &[0.5, 0.5], &[2.0, 2.0], &[2.0, 2.0]]);
        let l = Labeled::new(&x, &[0, 0, 1, 1]).unwrap();
        let clu = clustering_factor(&l, &l, Metric::L2, ComparisonMode::TrainTrain).unwrap();
        assert_eq!(clu.aggregate, Aggregate { min: 0.0, avg: 0.0, max: 0.0 });
        assert!(clu.singleton_classes.is_empty());
    }

    #[test]
    fn single_class_is_an_error() {
        let x = set(&[&[0.0], &[1.0]]);
        let l = Labeled::new(&x, &[0, 0]).unwrap();
        assert!(matches!(
            separation_factor(&l, &l, Metric::L1, ComparisonMode::TrainTrain),
            Err(AlignError::SingleClass)
        ));
    }

    #[test]
    fn query_class_missing_from_reference() {
        let r = set(&[&[0.0], &[1.0]]);
        let q = set(&[&[0.0]]);
        let rl = Labeled::new(&r, &[0, 1]).unwrap();
        let ql = Labeled::new(&q, &[2]).unwrap();
        assert!(matches!(
            clustering_factor(&rl, &ql, Metric::L1, ComparisonMode::TrainTest),
            Err(AlignError::EmptyClass(2))
        ));
    }

    fn verdict(sep_min: f64, clu_max: f64) -> AlignmentVerdict {
        let sep = SeparationReport {
            metric: Metric::L2,
            mode: ComparisonMode::TrainTest,
            pairs: vec![],
            aggregate: Aggregate { min: sep_min, avg: sep_min, max: sep_min },
        };
        let clu = ClusteringReport {
            metric: Metric::L2,
            mode: ComparisonMode::TrainTest,
            samples: vec![],
            aggregate: Aggregate { min: clu_max, avg: clu_max, max: clu_max },
            singleton_classes: vec![],
        };
        alignment_verdict(&sep, &clu).unwrap()
    }

    #[test]
    fn verdict_thresholds() {
        let v = verdict(2.0, 1.0);
        assert!(v.aligned);
        assert_eq!((v.r, v.big_r), (1.0, 0.5));
        assert!(!verdict(0.220, 1.0).aligned);
        assert!(!verdict(1.0, 1.0).aligned, "r = R is not aligned");
    }

    #[test]
    fn verdict_rejects_mixed_modes() {
        let x = set(&[&[0.0], &[1.0]]);
        let l = Labeled::new(&x, &[0, 1]).unwrap();
        let sep = separation_factor(&l, &l, Metric::L1, ComparisonMode::TrainTrain).unwrap();
        let clu = clustering_factor(&l, &l, Metric::L1, ComparisonMode::TrainTest).unwrap();
        assert!(matches!(alignment_verdict(&sep, &clu), Err(AlignError::ReportMismatch(_))));
    }

    #[test]
    fn misaligned_witness_found() {
        // Class 0 spans [0, 3]; the class-1 point at 1 sits inside it.
        let x = set(&[&[0.0], &[3.0], &[1.0], &[1.2]]);
        let l = Labeled::new(&x, &[0, 0, 1, 1]).unwrap();
        let rep = alignment_report(&l, &l, Metric::L1, ComparisonMode::TrainTrain).unwrap();
        assert!(!rep.verdict.aligned);
        assert_eq!(rep.verdict.witness, Some(0));
    }

    /// Direct transcription of the definitions.
    fn naive(r: &Labeled<f64>, q: &Labeled<f64>, m: Metric, coincident: bool) -> (Vec<(usize, usize, f64)>, Vec<f64>) {
        let n = r.num_classes().max(q.num_classes());
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let mut best = f64::INFINITY;
                for i in 0..r.len() {
                    for j in 0..q.len() {
                        let (ci, cj) = (r.labels[i], q.labels[j]);
                        if (ci == a && cj == b) || (ci == b && cj == a) {
                            best = best.min(m.distance(r.x.row(i), q.x.row(j)));
                        }
                    }
                }
                if best.is_finite() {
                    pairs.push((a, b, best));
                }
            }
        }
        let clu = (0..q.len())
            .map(|j| {
                let mut worst = 0.0f64;
                for i in 0..r.len() {
                    if r.labels[i] == q.labels[j] && !(coincident && i == j) {
                        worst = worst.max(m.distance(r.x.row(i), q.x.row(j)));
                    }
                }
                worst
            })
            .collect();
        (pairs, clu)
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let d = rng.gen_range(1..6);
            let (nr, nq) = (rng.gen_range(4..30), rng.gen_range(1..30));
            let k = rng.gen_range(2..5);
            let gen = |rng: &mut ChaCha8Rng, n: usize| {
                let v: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>()).collect();
                Tensor::from_f64(vec![n, d], &v).unwrap()
            };
            let (xr, xq) = (gen(&mut rng, nr), gen(&mut rng, nq));
            let mut lr: Vec<usize> = (0..nr).map(|i| i % k).collect();
            lr.sort_unstable();
            let lq: Vec<usize> = (0..nq).map(|_| rng.gen_range(0..k)).collect();
            let r = Labeled::new(&xr, &lr).unwrap();
            let q = Labeled::new(&xq, &lq).unwrap();
            let metric = [Metric::L1, Metric::L2, Metric::LINF][trial % 3];
            for (query, mode) in [(&r, ComparisonMode::TrainTrain), (&q, ComparisonMode::TrainTest)] {
                let rep = alignment_report(&r, query, metric, mode).unwrap();
                let (pairs, clu) = naive(&r, query, metric, mode == ComparisonMode::TrainTrain);
                let got: Vec<(usize, usize, f64)> =
                    rep.separation.pairs.iter().map(|p| (p.class_a, p.class_b, p.distance)).collect();
                assert_eq!(got, pairs);
                let got: Vec<f64> = rep.clustering.samples.iter().map(|s| s.dist_max).collect();
                assert_eq!(got, clu);
                let a = rep.separation.aggregate;
                assert!(a.min <= a.avg && a.avg <= a.max);
            }
        }
    }

    #[test]
    fn normalization_is_joint() {
        let a = set(&[&[0.0, 2.0]]);
        let b = set(&[&[4.0, 1.0]]);
        let out = min_max_normalize(&[&a, &b]);
        assert_eq!(out[0].data(), &[0.0, 0.5]);
        assert_eq!(out[1].data(), &[1.0, 0.25]);
        assert_eq!(min_max_normalize(&[&a.map(|_| 3.0)])[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn csv_and_json_shapes() {
        let x = set(&[&[0.0], &[1.0], &[3.0]]);
        let l = Labeled::new(&x, &[0, 1, 2]).unwrap();
        let rep = alignment_report(&l, &l, Metric::L1, ComparisonMode::TrainTrain).unwrap();
        let mut buf = Vec::new();
        rep.separation.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("l1,train-train,0,2,3"));
        let json = serde_json::to_value(rep.summary()).unwrap();
        assert_eq!(json["separation"]["min"], 1.0);
        assert_eq!(json["mode"], "train-train");
    }
}
