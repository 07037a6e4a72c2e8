//! Point clouds whose separation and clustering are known by construction.
//!
//! Class centres sit on a grid with spacing `D >= 2r + 2R`. In an L_p metric
//! two grid points differ by at least `D` in one coordinate, so points drawn
//! from radius-`R` balls around different centres are at least `D - 2R >= 2r`
//! apart, while points of one class are at most `2R` apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result, Split};
use crate::align::{Metric, MetricKind};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticMode {
    /// Train and test inside radius-`R` balls with `r > R`.
    Aligned,
    /// Train inside radius `R'`, test inside radius `R`. With `r > R'` every
    /// test point is classified correctly by 1-NN; with `r <= R'` the
    /// generator plants a witness that is not.
    Theorem,
    /// Separated but not aligned: always plants a misclassified witness.
    Misaligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Half the guaranteed minimum inter-class distance.
    pub separation: f64,
    /// Radius of the ball holding each class.
    pub radius: f64,
    /// Radius holding the training points; defaults to `radius`.
    #[serde(default)]
    pub train_radius: Option<f64>,
    /// Distance between neighbouring class centres; defaults to `2r + 2R`.
    #[serde(default)]
    pub center_spacing: Option<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub metric: Metric,
    pub mode: SyntheticMode,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn aligned(num_classes: usize, dim: usize, separation: f64, radius: f64, metric: Metric, seed: u64) -> Self {
        Self {
            num_classes,
            dim,
            separation,
            radius,
            train_radius: None,
            center_spacing: None,
            train_per_class: 20,
            test_per_class: 20,
            metric,
            mode: SyntheticMode::Aligned,
            seed,
        }
    }

    pub fn train_radius(&self) -> f64 {
        self.train_radius.unwrap_or(self.radius)
    }

    pub fn spacing(&self) -> f64 {
        self.center_spacing
            .unwrap_or(2.0 * self.separation + 2.0 * self.radius)
    }

    /// Whether the spec asks for a misclassified witness.
    pub fn plants_witness(&self) -> bool {
        match self.mode {
            SyntheticMode::Aligned => false,
            SyntheticMode::Theorem => self.separation <= self.train_radius(),
            SyntheticMode::Misaligned => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Infeasible(m));
        let (r, big_r, small_r, d) = (self.separation, self.radius, self.train_radius(), self.spacing());
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("dim and per-class counts must be positive".into());
        }
        if self.metric.kind == MetricKind::L0 {
            return bad("L0 is not a norm; synthetic balls need L1, L2 or Linf".into());
        }
        if !(r > 0.0 && big_r > 0.0 && small_r > 0.0) || ![r, big_r, small_r, d].iter().all(|v| v.is_finite()) {
            return bad(format!("radii must be positive and finite (r = {r}, R = {big_r}, R' = {small_r})"));
        }
        if small_r > big_r {
            return bad(format!("train radius R' = {small_r} exceeds R = {big_r}"));
        }
        if d < 2.0 * r + 2.0 * big_r {
            return bad(format!(
                "center spacing {d} is below 2r + 2R = {}",
                2.0 * r + 2.0 * big_r
            ));
        }
        match self.mode {
            SyntheticMode::Aligned if r <= big_r => bad(format!("aligned mode needs r > R (r = {r}, R = {big_r})")),
            SyntheticMode::Misaligned if r > small_r => {
                bad(format!("misaligned mode needs r <= R' (r = {r}, R' = {small_r})"))
            }
            _ if self.plants_witness() && d > 2.0 * big_r + 2.0 * small_r => bad(format!(
                "witness needs center spacing <= 2R + 2R' = {}, got {d}",
                2.0 * big_r + 2.0 * small_r
            )),
            _ => Ok(()),
        }
    }

    /// Grid centre of `class`: its base-`b` digits scaled by the spacing.
    pub fn center(&self, class: usize) -> Vec<f64> {
        let base = grid_base(self.num_classes, self.dim);
        let mut c = vec![0.0; self.dim];
        let mut rest = class;
        for v in c.iter_mut() {
            *v = (rest % base) as f64 * self.spacing();
            rest /= base;
        }
        c
    }
}

fn grid_base(n: usize, dim: usize) -> usize {
    let mut b = 2;
    while (b as f64).powi(dim.min(64) as i32) < n as f64 {
        b += 1;
    }
    b
}

/// Measured geometry of a generated pair of splits, pooled over train and
/// test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Minimum distance between points of different classes.
    pub min_separation: f64,
    /// Maximum `dist_max` over all points (distance to the farthest other
    /// point of the same class).
    pub max_clustering: f64,
    /// The same maximum restricted to training points.
    pub train_max_clustering: f64,
    pub max_train_center_distance: f64,
    pub max_test_center_distance: f64,
    /// `min_separation / 2`.
    pub r: f64,
    /// `max_clustering / 2`.
    pub big_r: f64,
    pub aligned: bool,
    /// Test index whose nearest training point has the wrong class.
    pub witness: Option<usize>,
}

/// Uniform draw from the radius-`radius` ball of `metric` around the origin.
fn ball_point(rng: &mut ChaCha8Rng, metric: Metric, dim: usize, radius: f64) -> Vec<f64> {
    let mut p: Vec<f64> = match metric.kind {
        MetricKind::Linf => (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        MetricKind::L2 => {
            let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let scale = rng.gen::<f64>().powf(1.0 / dim as f64) / norm;
            g.into_iter().map(|v| v * scale).collect()
        }
        MetricKind::L1 => {
            // Normalised exponentials with one slack coordinate give a uniform
            // point of the simplex; random signs fill the cross-polytope.
            let e: Vec<f64> = (0..=dim).map(|_| rng.sample(Exp1)).collect();
            let total: f64 = e.iter().sum();
            e[..dim]
                .iter()
                .map(|v| if rng.gen::<bool>() { v / total } else { -v / total })
                .collect()
        }
        MetricKind::L0 => unreachable!("validated"),
    };
    for v in p.iter_mut() {
        *v *= radius;
    }
    // Rounding can leave the point a few ulps outside; pull it back.
    let origin = vec![0.0; dim];
    let d = metric.distance(&p, &origin);
    if d > radius {
        let s = radius / d * (1.0 - 4.0 * f64::EPSILON);
        p.iter_mut().for_each(|v| *v *= s);
    }
    p
}

pub fn gen_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<(Dataset<S>, Dataset<S>, Certificate)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (dim, n) = (spec.dim, spec.num_classes);
    let mut train = Vec::with_capacity(n * spec.train_per_class * dim);
    let mut test = Vec::with_capacity(n * spec.test_per_class * dim);
    let mut train_labels = Vec::new();
    let mut test_labels = Vec::new();
    let witness_plan = spec.plants_witness();
    let mut witness = None;

    for class in 0..n {
        let c = spec.center(class);
        let offset = |p: Vec<f64>| c.iter().zip(p).map(|(a, b)| a + b).collect::<Vec<f64>>();
        for i in 0..spec.train_per_class {
            let mut p = offset(ball_point(&mut rng, spec.metric, dim, spec.train_radius()));
            if witness_plan {
                // Class 1 sits at +D on axis 0, class 0 at the origin. Class 0
                // gets one training point on the pole facing class 1; every
                // class-1 training point sits on the far pole.
                if class == 0 && i == 0 {
                    p = c.clone();
                    p[0] += spec.train_radius();
                } else if class == 1 {
                    p = c.clone();
                    p[0] += spec.train_radius();
                }
            }
            train.extend(p);
            train_labels.push(class);
        }
        for i in 0..spec.test_per_class {
            let mut p = offset(ball_point(&mut rng, spec.metric, dim, spec.radius));
            if witness_plan && class == 1 && i == 0 {
                p = c.clone();
                p[0] -= spec.radius;
                witness = Some(test_labels.len());
            }
            test.extend(p);
            test_labels.push(class);
        }
    }

    let to_s = |v: Vec<f64>| v.into_iter().map(S::lit).collect::<Vec<S>>();
    let train_t = Tensor::new(vec![train_labels.len(), dim], to_s(train))?;
    let test_t = Tensor::new(vec![test_labels.len(), dim], to_s(test))?;
    let train = Dataset::new(train_t, train_labels, n, Split::Train)?;
    let test = Dataset::new(test_t, test_labels, n, Split::Test)?;
    let cert = certify(spec, &train, &test, witness)?;
    Ok((train, test, cert))
}

/// Isotropic Gaussian classes with centres evenly spaced on a circle in the
/// first two coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Radius of the circle carrying the class means.
    pub center_radius: f64,
    /// Per-coordinate standard deviation.
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Infeasible(m.into()));
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.dim < 2 {
            return bad("gaussian mixture needs dim >= 2");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class counts must be positive");
        }
        if !(self.center_radius > 0.0 && self.center_radius.is_finite() && self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("center radius and sigma must be positive and finite");
        }
        Ok(())
    }

    pub fn center(&self, class: usize) -> Vec<f64> {
        let a = std::f64::consts::TAU * class as f64 / self.num_classes as f64;
        let mut c = vec![0.0; self.dim];
        c[0] = self.center_radius * a.cos();
        c[1] = self.center_radius * a.sin();
        c
    }
}

/// Draws train and test splits, class-major, from one seeded stream.
pub fn gen_gaussian_mixture<S: Scalar>(spec: &GaussianMixtureSpec) -> Result<(Dataset<S>, Dataset<S>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |per_class: usize, which: Split| -> Result<Dataset<S>> {
        let mut data = Vec::with_capacity(spec.num_classes * per_class * spec.dim);
        let mut labels = Vec::with_capacity(spec.num_classes * per_class);
        for class in 0..spec.num_classes {
            let c = spec.center(class);
            for _ in 0..per_class {
                data.extend(c.iter().map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    S::lit(m + spec.sigma * z)
                }));
                labels.push(class);
            }
        }
        let t = Tensor::new(vec![labels.len(), spec.dim], data)?;
        Dataset::new(t, labels, spec.num_classes, which)
    };
    let train = split(spec.train_per_class, Split::Train)?;
    let test = split(spec.test_per_class, Split::Test)?;
    Ok((train, test))
}

/// Brute-force measurement of the generated geometry.
fn certify<S: Scalar>(
    spec: &SyntheticSpec,
    train: &Dataset<S>,
    test: &Dataset<S>,
    planted: Option<usize>,
) -> Result<Certificate> {
    let m = spec.metric;
    let points: Vec<(&[S], usize)> = (0..train.len())
        .map(|i| (train.samples().row(i), train.labels()[i]))
        .chain((0..test.len()).map(|i| (test.samples().row(i), test.labels()[i])))
        .collect();
    let mut min_sep = f64::INFINITY;
    let mut max_clu = 0.0f64;
    let mut train_clu = 0.0f64;
    for (i, &(a, ya)) in points.iter().enumerate() {
        for (j, &(b, yb)) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = m.distance(a, b);
            if ya != yb {
                min_sep = min_sep.min(d);
            } else {
                max_clu = max_clu.max(d);
                if i < train.len() && j < train.len() {
                    train_clu = train_clu.max(d);
                }
            }
        }
    }
    let center_dist = |ds: &Dataset<S>| {
        (0..ds.len())
            .map(|i| {
                let c: Vec<S> = spec.center(ds.labels()[i]).into_iter().map(S::lit).collect();
                m.distance(ds.samples().row(i), &c)
            })
            .fold(0.0, f64::max)
    };
    let witness = match planted {
        Some(w) => {
            let q = test.samples().row(w);
            let mut best = (f64::INFINITY, usize::MAX);
            for i in 0..train.len() {
                let cand = (m.distance(q, train.samples().row(i)), train.labels()[i]);
                if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    best = cand;
                }
            }
            if best.1 == test.labels()[w] {
                return Err(DataError::Infeasible(format!(
                    "planted witness {w} is still classified correctly (rounding at r = R')"
                )));
            }
            Some(w)
        }
        None => None,
    };
    Ok(Certificate {
        min_separation: min_sep,
        max_clustering: max_clu,
        train_max_clustering: train_clu,
        max_train_center_distance: center_dist(train),
        max_test_center_distance: center_dist(test),
        r: min_sep / 2.0,
        big_r: max_clu / 2.0,
        aligned: min_sep / 2.0 > max_clu / 2.0,
        witness,
    })
}
