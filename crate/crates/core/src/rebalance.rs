//! Source weights derived from the residual correlation of a pilot harmonizer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::harmonizer::{forward, HarmonizerParams};

pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;
/// Variances at or below this are treated as zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const DEFAULT_EPSILON: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Equal,
    MaxEigen,
    MinVariance,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(Scheme::Equal),
            "max_eigen" => Ok(Scheme::MaxEigen),
            "min_variance" => Ok(Scheme::MinVariance),
            other => Err(Error::InvalidConfig(format!("unknown weighting scheme {other:?}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Equal => "equal",
            Scheme::MaxEigen => "max_eigen",
            Scheme::MinVariance => "min_variance",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebalanceConfig {
    pub scheme: Scheme,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::ridge")]
    pub ridge: f64,
    /// Seeds the power-iteration start vector.
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn epsilon() -> f64 {
        super::DEFAULT_EPSILON
    }
    pub fn ridge() -> f64 {
        1e-8
    }
}

impl RebalanceConfig {
    pub fn new(scheme: Scheme, epsilon: f64) -> Self {
        Self { scheme, epsilon, ridge: defaults::ridge(), seed: 0 }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon {} must lie in [0, 1]", self.epsilon)));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::InvalidConfig(format!("ridge {} must be non-negative", self.ridge)));
        }
        Ok(())
    }
}

/// Residual statistics over sources `0..=m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    /// Diagonal over each source's triggered rows; off-diagonal over co-triggered rows.
    pub covariance: Vec<Vec<f64>>,
    pub correlation: Vec<Vec<f64>>,
    pub pair_counts: Vec<Vec<usize>>,
}

impl ResidualStats {
    /// Stats with a given correlation matrix, for weighting experiments.
    pub fn from_correlation(correlation: Vec<Vec<f64>>) -> Result<Self> {
        check_square(&correlation)?;
        let n = correlation.len();
        Ok(Self { covariance: correlation.clone(), correlation, pair_counts: vec![vec![0; n]; n] })
    }

    pub fn sources(&self) -> usize {
        self.correlation.len()
    }
}

fn check_square(a: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyInput("matrix"));
    }
    for row in a {
        if row.len() != a.len() {
            return Err(Error::DimensionMismatch { context: "square matrix".into(), expected: a.len(), found: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix".into()));
        }
    }
    Ok(())
}

/// Centered second moments of residuals `onehot(label_j) - h0(x)` on a set of rows.
struct Moments {
    cov: f64,
    var_i: f64,
    var_j: f64,
}

fn moments(residuals: &[Vec<Option<Vec<f64>>>], i: usize, j: usize, k: usize) -> (usize, Option<Moments>) {
    let rows: Vec<(&Vec<f64>, &Vec<f64>)> = residuals.iter().filter_map(|r| Some((r[i].as_ref()?, r[j].as_ref()?))).collect();
    let count = rows.len();
    if count == 0 {
        return (0, None);
    }
    let mut mean_i = vec![0.0; k];
    let mut mean_j = vec![0.0; k];
    for (ri, rj) in &rows {
        for c in 0..k {
            mean_i[c] += ri[c];
            mean_j[c] += rj[c];
        }
    }
    for c in 0..k {
        mean_i[c] /= count as f64;
        mean_j[c] /= count as f64;
    }
    let (mut cov, mut var_i, mut var_j) = (0.0, 0.0, 0.0);
    for (ri, rj) in &rows {
        for c in 0..k {
            let (a, b) = (ri[c] - mean_i[c], rj[c] - mean_j[c]);
            cov += a * b;
            var_i += a * a;
            var_j += b * b;
        }
    }
    let n = count as f64;
    (count, Some(Moments { cov: cov / n, var_i: var_i / n, var_j: var_j / n }))
}

/// Residual covariance and correlation of every source pair under a pilot model.
///
/// Each correlation entry normalizes by the two variances measured on the
/// same co-triggered rows, so `|C_ij| <= 1`. Entries with no overlap or a
/// vanishing variance are zero.
pub fn compute_residual_stats(params: &HarmonizerParams, data: &Dataset) -> Result<ResidualStats> {
    let k = data.k();
    let s = data.m() + 1;
    let mut residuals = Vec::with_capacity(data.n());
    for (inst, row) in data.instances().iter().zip(data.labels().rows()) {
        let dist = forward(params, &inst.features)?;
        residuals.push(
            row.answers()
                .map(|answer| {
                    answer.map(|label| {
                        let mut r: Vec<f64> = dist.probs().iter().map(|p| -p).collect();
                        r[label.0] += 1.0;
                        r
                    })
                })
                .collect::<Vec<_>>(),
        );
    }

    let mut covariance = vec![vec![0.0; s]; s];
    let mut correlation = vec![vec![0.0; s]; s];
    let mut pair_counts = vec![vec![0; s]; s];
    let mut variance = vec![0.0; s];
    for i in 0..s {
        let (count, m) = moments(&residuals, i, i, k);
        pair_counts[i][i] = count;
        variance[i] = m.map_or(0.0, |m| m.cov);
        covariance[i][i] = variance[i];
        correlation[i][i] = if variance[i] > VARIANCE_FLOOR { 1.0 } else { 0.0 };
    }
    for i in 0..s {
        for j in i + 1..s {
            let (count, m) = moments(&residuals, i, j, k);
            pair_counts[i][j] = count;
            pair_counts[j][i] = count;
            let Some(m) = m else { continue };
            covariance[i][j] = m.cov;
            covariance[j][i] = m.cov;
            let defined =
                variance[i] > VARIANCE_FLOOR && variance[j] > VARIANCE_FLOOR && m.var_i > VARIANCE_FLOOR && m.var_j > VARIANCE_FLOOR;
            if defined {
                let c = m.cov / (m.var_i * m.var_j).sqrt();
                correlation[i][j] = c;
                correlation[j][i] = c;
            }
        }
    }
    Ok(ResidualStats { covariance, correlation, pair_counts })
}

/// Floors every weight at `epsilon / len` and spreads the remaining `1 - epsilon`
/// in proportion to the excess above the floor. Equal weights when no entry
/// exceeds the floor.
pub fn project_to_simplex(v: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("weight vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("weight vector".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} must lie in [0, 1]")));
    }
    let len = v.len() as f64;
    let floor = epsilon / len;
    let excess: Vec<f64> = v.iter().map(|x| (x - floor).max(0.0)).collect();
    let total: f64 = excess.iter().sum();
    if total <= 0.0 {
        return Ok(vec![1.0 / len; v.len()]);
    }
    Ok(excess.iter().map(|e| floor + e / total * (1.0 - epsilon)).collect())
}

fn with_ridge(c: &[Vec<f64>], ridge: f64) -> Vec<Vec<f64>> {
    let mut a = c.to_vec();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += ridge;
    }
    a
}

/// Unit eigenvector of the largest eigenvalue of a symmetric matrix.
///
/// The matrix is shifted by its Gershgorin lower bound so that the largest
/// algebraic eigenvalue is also the largest in magnitude.
pub fn power_iteration(a: &[Vec<f64>], seed: u64) -> Result<Vec<f64>> {
    check_square(a)?;
    let n = a.len();
    let shift = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| a[i][j].abs()).sum::<f64>() - a[i][i]).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize_l2(&mut v);
    let mut next = vec![0.0; n];
    for _ in 0..POWER_MAX_ITER {
        for i in 0..n {
            next[i] = shift * v[i] + a[i].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        }
        if !normalize_l2(&mut next) {
            // the start vector lies in the null space of a zero matrix
            return Ok(v);
        }
        let delta = next.iter().zip(&v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if delta < POWER_TOLERANCE {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence(POWER_MAX_ITER))
}

fn normalize_l2(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    check_square(a)?;
    let n = a.len();
    if b.len() != n {
        return Err(Error::DimensionMismatch { context: "right-hand side".into(), expected: n, found: b.len() });
    }
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &bi)| row.iter().copied().chain([bi]).collect()).collect();
    let scale = a.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs())).unwrap_or(col);
        if m[pivot][col].abs() <= scale * f64::EPSILON * n as f64 {
            return Err(Error::Singular);
        }
        m.swap(col, pivot);
        let (top, bottom) = m.split_at_mut(col + 1);
        let pivot_row = &top[col];
        for row in bottom {
            let f = row[col] / pivot_row[col];
            if f == 0.0 {
                continue;
            }
            for (x, p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - tail) / m[r][r];
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(x)
}

/// Top eigenvector of `C + ridge I`, sign-fixed to a positive entry sum and
/// scaled to sum 1 (to unit L1 norm if the entries cancel).
pub fn max_eigen_direction(c: &[Vec<f64>], ridge: f64, seed: u64) -> Result<Vec<f64>> {
    let mut v = power_iteration(&with_ridge(c, ridge), seed)?;
    let sum: f64 = v.iter().sum();
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if sum < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    let denom = if sum.abs() > 1e-12 * l1 { sum.abs() } else { l1 };
    Ok(v.iter().map(|x| x / denom).collect())
}

/// `(C + ridge I)^{-1} 1`, scaled to sum 1.
pub fn min_variance_direction(c: &[Vec<f64>], ridge: f64) -> Result<Vec<f64>> {
    let v = solve(&with_ridge(c, ridge), &vec![1.0; c.len()])?;
    let sum: f64 = v.iter().sum();
    if sum.is_nan() || sum.abs() <= 1e-300 {
        return Err(Error::Singular);
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

pub fn max_eigen_weights(stats: &ResidualStats, cfg: &RebalanceConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    project_to_simplex(&max_eigen_direction(&stats.correlation, cfg.ridge, cfg.seed)?, cfg.epsilon)
}

pub fn min_variance_weights(stats: &ResidualStats, cfg: &RebalanceConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    project_to_simplex(&min_variance_direction(&stats.correlation, cfg.ridge)?, cfg.epsilon)
}

pub fn rebalance_weights(stats: &ResidualStats, cfg: &RebalanceConfig) -> Result<Vec<f64>> {
    match cfg.scheme {
        Scheme::Equal => {
            cfg.validate()?;
            Ok(vec![1.0 / stats.sources() as f64; stats.sources()])
        }
        Scheme::MaxEigen => max_eigen_weights(stats, cfg),
        Scheme::MinVariance => min_variance_weights(stats, cfg),
    }
}

/// The weights file written by the rebalance step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub weights: Vec<f64>,
    pub scheme: Scheme,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClassIndex, ClassSpace, Instance, SourceLabelMatrix, Split};
    use crate::harmonizer::Architecture;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn projection_examples() {
        let w = project_to_simplex(&[0.9, 0.1, 0.0], 0.3).unwrap();
        assert!(close(&w, &[0.8, 0.1, 0.1], 1e-15), "{w:?}");
        let w = project_to_simplex(&[0.6, -0.2, 0.6], 0.0).unwrap();
        assert_eq!(w, vec![0.5, 0.0, 0.5]);
        let w = project_to_simplex(&[5.0, 0.0, -1.0, 2.0], 1.0).unwrap();
        assert_eq!(w, vec![0.25; 4]);
        assert_eq!(project_to_simplex(&[-1.0, -2.0], 0.5).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn eigen_examples() {
        let c = vec![vec![1.0, 0.8], vec![0.8, 1.0]];
        assert!(close(&max_eigen_direction(&c, 0.0, 0).unwrap(), &[0.5, 0.5], 1e-10));
        let c = vec![vec![1.0, 0.6, 0.0], vec![0.6, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let v = max_eigen_direction(&c, 0.0, 0).unwrap();
        assert!(close(&v, &[0.5, 0.5, 0.0], 1e-9), "{v:?}");
        let w = project_to_simplex(&v, 0.3).unwrap();
        assert!(close(&w, &[0.45, 0.45, 0.1], 1e-9), "{w:?}");

        let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let stats = ResidualStats::from_correlation(eye).unwrap();
        let w = max_eigen_weights(&stats, &RebalanceConfig::new(Scheme::MaxEigen, 0.3)).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.1 - 1e-15));
    }

    #[test]
    fn min_variance_examples() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(close(&min_variance_direction(&eye, 1e-8).unwrap(), &[0.5, 0.5], 1e-15));
        let c = vec![vec![1.0, 0.6, 0.0], vec![0.6, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let v = min_variance_direction(&c, 1e-8).unwrap();
        // C v = 1 gives v = (0.625, 0.625, 1) up to scale
        let total = 2.25;
        assert!(close(&v, &[0.625 / total, 0.625 / total, 1.0 / total], 1e-8), "{v:?}");
    }

    #[test]
    fn duplicated_pair_gets_no_more_than_merged() {
        // sources 0 and 1 duplicate each other; source 2 is independent
        let dup = vec![vec![1.0, 1.0, 0.2], vec![1.0, 1.0, 0.2], vec![0.2, 0.2, 1.0]];
        let merged = vec![vec![1.0, 0.2], vec![0.2, 1.0]];
        let v_dup = min_variance_direction(&dup, 1e-8).unwrap();
        let v_merged = min_variance_direction(&merged, 1e-8).unwrap();
        // equality holds without the ridge; the ridge perturbs the split by O(1e-8)
        assert!(v_dup[0] + v_dup[1] <= v_merged[0] + 1e-6, "{v_dup:?} {v_merged:?}");
    }

    #[test]
    fn solve_detects_singularity() {
        let a = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(matches!(solve(&a, &[1.0, 1.0]), Err(Error::Singular)));
        let x = solve(&[vec![0.0, 1.0], vec![2.0, 0.0]], &[3.0, 4.0]).unwrap();
        assert_eq!(x, vec![2.0, 3.0]);
    }

    fn matrix_dataset(rows: &[[Option<usize>; 3]]) -> Dataset {
        let n = rows.len();
        let instances = (0..n)
            .map(|i| Instance { id: format!("r{i}"), features: vec![i as f64 * 0.3 - 0.6], text: None, entities: vec![], gold: None })
            .collect();
        let llm = rows.iter().map(|r| r[0].map(ClassIndex)).collect();
        let sources = rows.iter().map(|r| r[1..].iter().map(|s| s.map(ClassIndex)).collect()).collect();
        let labels = SourceLabelMatrix::new(llm, sources, 2).unwrap();
        Dataset::new(ClassSpace::numbered(2).unwrap(), instances, labels, Split::Train).unwrap()
    }

    #[test]
    fn identical_columns_correlate_perfectly() {
        let rows = [[Some(0), Some(1), Some(1)], [Some(1), Some(0), Some(0)], [Some(1), Some(1), Some(1)], [None, Some(0), Some(0)]];
        let data = matrix_dataset(&rows);
        let mut params = HarmonizerParams::zeros(Architecture::Linear, 1, 2, 0).unwrap();
        params.values_mut()[0] = 0.7;
        let stats = compute_residual_stats(&params, &data).unwrap();
        assert!((stats.correlation[1][2] - 1.0).abs() < 1e-12);
        assert_eq!(stats.pair_counts[0][1], 3);
        assert_eq!(stats.pair_counts[1][1], 4);
        for i in 0..3 {
            for j in 0..3 {
                assert!(stats.correlation[i][j].abs() <= 1.0 + 1e-9);
                assert_eq!(stats.correlation[i][j], stats.correlation[j][i]);
            }
        }
    }

    #[test]
    fn constant_residual_is_zeroed() {
        // a confident constant pilot; source 1 always agrees with its argmax
        let rows = [[Some(0), Some(1), Some(0)], [Some(1), Some(1), None], [Some(1), Some(1), Some(1)]];
        let data = matrix_dataset(&rows);
        let mut params = HarmonizerParams::zeros(Architecture::Linear, 1, 2, 0).unwrap();
        params.values_mut()[3] = 40.0; // bias of class 1
        let stats = compute_residual_stats(&params, &data).unwrap();
        assert!(stats.covariance[1][1] <= VARIANCE_FLOOR);
        assert!(stats.correlation[1].iter().all(|&c| c == 0.0));
        assert!(stats.correlation.iter().all(|row| row[1] == 0.0));
    }
}
