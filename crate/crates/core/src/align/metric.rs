use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    L0,
    L1,
    L2,
    Linf,
}

/// An L_p distance. For `L0`, coordinates count as different when
/// `|a - b| > l0_tolerance`.
///
/// Deserializes from a bare name such as `"linf"` or from the full table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetricRepr")]
pub struct Metric {
    pub kind: MetricKind,
    #[serde(default)]
    pub l0_tolerance: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricTable {
    kind: MetricKind,
    #[serde(default)]
    l0_tolerance: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MetricRepr {
    Name(String),
    Table(MetricTable),
}

impl TryFrom<MetricRepr> for Metric {
    type Error = String;

    fn try_from(r: MetricRepr) -> Result<Self, String> {
        let m = match r {
            MetricRepr::Name(s) => s.parse()?,
            MetricRepr::Table(t) => Metric::new(t.kind).with_tolerance(t.l0_tolerance),
        };
        m.validate()?;
        Ok(m)
    }
}

impl Metric {
    pub const L0: Metric = Metric::new(MetricKind::L0);
    pub const L1: Metric = Metric::new(MetricKind::L1);
    pub const L2: Metric = Metric::new(MetricKind::L2);
    pub const LINF: Metric = Metric::new(MetricKind::Linf);

    pub const fn new(kind: MetricKind) -> Self {
        Self { kind, l0_tolerance: 0.0 }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.l0_tolerance = tol;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.l0_tolerance >= 0.0 {
            Ok(())
        } else {
            Err(format!("l0 tolerance must be non-negative, got {}", self.l0_tolerance))
        }
    }

    /// Distance in `f64`, accumulated left to right.
    pub fn distance<S: Scalar>(&self, a: &[S], b: &[S]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let diffs = a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs());
        match self.kind {
            MetricKind::L0 => diffs.filter(|&d| d > self.l0_tolerance).count() as f64,
            MetricKind::L1 => diffs.fold(0.0, |acc, d| acc + d),
            MetricKind::L2 => diffs.fold(0.0, |acc, d| acc + d * d).sqrt(),
            MetricKind::Linf => diffs.fold(0.0, f64::max),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::L0 => "l0",
            MetricKind::L1 => "l1",
            MetricKind::L2 => "l2",
            MetricKind::Linf => "linf",
        };
        f.write_str(name)
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l0" => Ok(Metric::L0),
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            "linf" | "l_inf" | "inf" => Ok(Metric::LINF),
            other => Err(format!("unknown metric {other:?} (expected l0, l1, l2 or linf)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deserializes_from_name_or_table() {
        let a: Metric = serde_json::from_str(r#""linf""#).unwrap();
        assert_eq!(a, Metric::LINF);
        let b: Metric = serde_json::from_str(r#"{"kind":"l0","l0_tolerance":0.1}"#).unwrap();
        assert_eq!(b, Metric::L0.with_tolerance(0.1));
        assert_eq!(serde_json::from_str::<Metric>(&serde_json::to_string(&b).unwrap()).unwrap(), b);
        assert!(serde_json::from_str::<Metric>(r#""l3""#).is_err());
        assert!(serde_json::from_str::<Metric>(r#"{"kind":"l0","l0_tolerance":-1}"#).is_err());
        assert!(serde_json::from_str::<Metric>(r#"{"kind":"l1","extra":1}"#).is_err());
    }

    #[test]
    fn examples() {
        assert_eq!(Metric::LINF.distance(&[0.0f64, 0.0], &[0.3, 0.1]), 0.3);
        assert_eq!(Metric::L0.distance(&[0.2f64, 0.5], &[0.2, 0.5]), 0.0);
        assert_eq!(Metric::L0.with_tolerance(0.15).distance(&[0.0f64, 0.0], &[0.1, 0.2]), 1.0);
        assert_eq!(Metric::L2.distance(&[0.0f64, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(Metric::L1.distance(&[0.0f32, 0.0], &[3.0, -4.0]), 7.0);
        assert_eq!("LINF".parse::<Metric>().unwrap(), Metric::LINF);
        assert!("l3".parse::<Metric>().is_err());
    }

    proptest! {
        #[test]
        fn norm_ordering(a in prop::collection::vec(-10.0f64..10.0, 1..20), seed in any::<u64>()) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * ((seed >> (i % 60)) & 3) as f64 * 0.3).collect();
            let l1 = Metric::L1.distance(&a, &b);
            let l2 = Metric::L2.distance(&a, &b);
            let li = Metric::LINF.distance(&a, &b);
            prop_assert!(l2 <= l1 * (1.0 + 1e-12));
            prop_assert!(li <= l2);
        }
    }
}
