//! Loss aggregators over per-source loss vectors, their (sub)gradients, and a
//! Pareto-dominance check.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Linear,
    Quadratic,
    Euclidean,
    Chebyshev,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] =
        [AggregatorKind::Linear, AggregatorKind::Quadratic, AggregatorKind::Euclidean, AggregatorKind::Chebyshev];

    /// Whether the aggregator is convex and strictly monotone in every coordinate.
    pub fn is_pareto(self) -> bool {
        self != AggregatorKind::Chebyshev
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(AggregatorKind::Linear),
            "quadratic" => Ok(AggregatorKind::Quadratic),
            "euclidean" => Ok(AggregatorKind::Euclidean),
            "chebyshev" => Ok(AggregatorKind::Chebyshev),
            other => Err(Error::InvalidConfig(format!("unknown aggregator {other:?}"))),
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregatorKind::Linear => "linear",
            AggregatorKind::Quadratic => "quadratic",
            AggregatorKind::Euclidean => "euclidean",
            AggregatorKind::Chebyshev => "chebyshev",
        })
    }
}

/// An aggregator together with positive weights over sources `0..=m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct AggregatorSpec {
    kind: AggregatorKind,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    kind: AggregatorKind,
    weights: Vec<f64>,
}

impl TryFrom<RawSpec> for AggregatorSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        AggregatorSpec::new(raw.kind, raw.weights)
    }
}

impl From<AggregatorSpec> for RawSpec {
    fn from(spec: AggregatorSpec) -> Self {
        RawSpec { kind: spec.kind, weights: spec.weights }
    }
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidConfig("aggregator needs at least one weight".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidConfig(format!("weights must be finite and positive: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { kind, weights })
    }

    /// `1/(m+1)` on every source.
    pub fn equal(kind: AggregatorKind, sources: usize) -> Self {
        Self { kind, weights: vec![1.0 / sources as f64; sources] }
    }

    pub fn kind(&self) -> AggregatorKind {
        self.kind
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, weights)
    }

    fn check(&self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.weights.len() {
            return Err(Error::DimensionMismatch { context: "loss vector".into(), expected: self.weights.len(), found: losses.len() });
        }
        for (index, &value) in losses.iter().enumerate() {
            if value.is_nan() || value < 0.0 {
                return Err(Error::NegativeLoss { index, value });
            }
        }
        Ok(())
    }
}

fn weighted_sum(w: &[f64], l: &[f64]) -> f64 {
    w.iter().zip(l).map(|(w, l)| w * l).sum()
}

fn weighted_norm(w: &[f64], l: &[f64]) -> f64 {
    w.iter().zip(l).map(|(w, l)| (w * l) * (w * l)).sum::<f64>().sqrt()
}

pub fn aggregate(spec: &AggregatorSpec, losses: &[f64]) -> Result<f64> {
    spec.check(losses)?;
    Ok(aggregate_unchecked(spec, losses))
}

pub(crate) fn aggregate_unchecked(spec: &AggregatorSpec, l: &[f64]) -> f64 {
    let w = &spec.weights;
    match spec.kind {
        AggregatorKind::Linear => weighted_sum(w, l),
        AggregatorKind::Quadratic => {
            let s = weighted_sum(w, l);
            s * s
        }
        AggregatorKind::Euclidean => weighted_norm(w, l),
        AggregatorKind::Chebyshev => w.iter().zip(l).map(|(w, l)| w * l).fold(0.0, f64::max),
    }
}

/// `dG/dl`; chebyshev ties split the subgradient equally, and the euclidean
/// gradient at the origin is zero.
pub fn aggregate_gradient(spec: &AggregatorSpec, losses: &[f64]) -> Result<Vec<f64>> {
    spec.check(losses)?;
    let mut out = vec![0.0; losses.len()];
    aggregate_gradient_into(spec, losses, &mut out);
    Ok(out)
}

pub(crate) fn aggregate_gradient_into(spec: &AggregatorSpec, l: &[f64], out: &mut [f64]) {
    let w = &spec.weights;
    match spec.kind {
        AggregatorKind::Linear => out.copy_from_slice(w),
        AggregatorKind::Quadratic => {
            let s = 2.0 * weighted_sum(w, l);
            for (o, w) in out.iter_mut().zip(w) {
                *o = s * w;
            }
        }
        AggregatorKind::Euclidean => {
            let norm = weighted_norm(w, l);
            for (j, o) in out.iter_mut().enumerate() {
                *o = if norm > 0.0 { w[j] * w[j] * l[j] / norm } else { 0.0 };
            }
        }
        AggregatorKind::Chebyshev => {
            let max = w.iter().zip(l).map(|(w, l)| w * l).fold(0.0, f64::max);
            let ties = w.iter().zip(l).filter(|(w, l)| *w * *l == max).count();
            for (j, o) in out.iter_mut().enumerate() {
                *o = if w[j] * l[j] == max { w[j] / ties as f64 } else { 0.0 };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    ADominates,
    BDominates,
    Incomparable,
    Equal,
}

/// Compares two vectors of expected per-source losses (lower is better).
pub fn check_dominance(a: &[f64], b: &[f64]) -> Result<Dominance> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { context: "dominance comparison".into(), expected: a.len(), found: b.len() });
    }
    let a_better = a.iter().zip(b).any(|(x, y)| x < y);
    let b_better = a.iter().zip(b).any(|(x, y)| y < x);
    Ok(match (a_better, b_better) {
        (false, false) => Dominance::Equal,
        (true, false) => Dominance::ADominates,
        (false, true) => Dominance::BDominates,
        (true, true) => Dominance::Incomparable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half(kind: AggregatorKind) -> AggregatorSpec {
        AggregatorSpec::new(kind, vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn worked_values() {
        assert!((aggregate(&half(AggregatorKind::Linear), &[0.4, 0.6]).unwrap() - 0.5).abs() < 1e-15);
        assert!((aggregate(&half(AggregatorKind::Euclidean), &[6.0, 8.0]).unwrap() - 5.0).abs() < 1e-15);
        assert!((aggregate(&half(AggregatorKind::Chebyshev), &[0.2, 0.5]).unwrap() - 0.25).abs() < 1e-15);
        assert!((aggregate(&half(AggregatorKind::Quadratic), &[0.4, 0.6]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn worked_gradients() {
        assert_eq!(aggregate_gradient(&half(AggregatorKind::Linear), &[3.0, 0.1]).unwrap(), vec![0.5, 0.5]);
        let q = aggregate_gradient(&half(AggregatorKind::Quadratic), &[0.4, 0.6]).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);
        // finite-difference cross-check of the quadratic case
        let spec = half(AggregatorKind::Quadratic);
        let h = 1e-6;
        let fd = (aggregate(&spec, &[0.4 + h, 0.6]).unwrap() - aggregate(&spec, &[0.4 - h, 0.6]).unwrap()) / (2.0 * h);
        assert!((fd - q[0]).abs() < 1e-8);
        assert_eq!(aggregate_gradient(&half(AggregatorKind::Chebyshev), &[0.5, 0.5]).unwrap(), vec![0.25, 0.25]);
        assert_eq!(aggregate_gradient(&half(AggregatorKind::Chebyshev), &[0.2, 0.5]).unwrap(), vec![0.0, 0.5]);
        assert_eq!(aggregate_gradient(&half(AggregatorKind::Euclidean), &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = half(AggregatorKind::Linear);
        assert!(matches!(aggregate(&spec, &[-0.1, 0.2]), Err(Error::NegativeLoss { index: 0, .. })));
        assert!(matches!(aggregate(&spec, &[0.1]), Err(Error::DimensionMismatch { .. })));
        assert!(AggregatorSpec::new(AggregatorKind::Linear, vec![0.5, 0.6]).is_err());
        assert!(AggregatorSpec::new(AggregatorKind::Linear, vec![1.0, 0.0]).is_err());
        assert!(serde_json::from_str::<AggregatorSpec>(r#"{"kind":"linear","weights":[0.7,0.7]}"#).is_err());
    }

    #[test]
    fn dominance_cases() {
        assert_eq!(check_dominance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), Dominance::Equal);
        assert_eq!(check_dominance(&[1.0, 2.0], &[2.0, 2.0]).unwrap(), Dominance::ADominates);
        assert_eq!(check_dominance(&[2.0, 2.0], &[1.0, 2.0]).unwrap(), Dominance::BDominates);
        assert_eq!(check_dominance(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), Dominance::Incomparable);
    }

    #[test]
    fn kind_parses() {
        for kind in AggregatorKind::ALL {
            assert_eq!(kind.to_string().parse::<AggregatorKind>().unwrap(), kind);
        }
        assert!("max".parse::<AggregatorKind>().is_err());
    }
}
