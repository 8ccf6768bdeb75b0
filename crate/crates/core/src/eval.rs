//! Calibration of risk scores against observed LLM errors, and the
//! majority-vote baseline.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelRow};
use crate::error::{Error, Result};
use crate::harmonizer::Simplex;
use crate::polar::PolarScore;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_BIN_SIZE: usize = 100;
pub const DEFAULT_PERCENTILES: [f64; 6] = [1.0, 5.0, 10.0, 20.0, 50.0, 100.0];

/// A scored instance with a known outcome: was the LLM answer wrong?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutcome {
    pub id: String,
    pub zeta: f64,
    pub is_error: bool,
}

fn check_pair(scores: &[f64], errors: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("calibration input"));
    }
    if scores.len() != errors.len() {
        return Err(Error::DimensionMismatch { context: "scores vs errors".into(), expected: scores.len(), found: errors.len() });
    }
    if let Some(z) = scores.iter().find(|z| !(0.0..=1.0).contains(*z)) {
        return Err(Error::InvalidDataset(format!("score {z} outside [0, 1]")));
    }
    Ok(())
}

fn bin_of(z: f64, n_bins: usize) -> usize {
    ((z * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Expected calibration error over `n_bins` equal-width score bins; the last
/// bin is closed on the right.
pub fn ece(scores: &[f64], errors: &[bool], n_bins: usize) -> Result<f64> {
    check_pair(scores, errors)?;
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be positive".into()));
    }
    let mut sum_z = vec![0.0; n_bins];
    let mut sum_e = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&z, &e) in scores.iter().zip(errors) {
        let b = bin_of(z, n_bins);
        sum_z[b] += z;
        sum_e[b] += f64::from(u8::from(e));
        count[b] += 1;
    }
    let n = scores.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            nb / n * (sum_z[b] / nb - sum_e[b] / nb).abs()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub bin_low: f64,
    pub bin_high: f64,
    /// `None` for empty bins.
    pub mean_score: Option<f64>,
    pub error_rate: Option<f64>,
    pub count: usize,
}

pub fn calibration_curve(scores: &[f64], errors: &[bool], n_bins: usize) -> Result<Vec<CurveBin>> {
    check_pair(scores, errors)?;
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be positive".into()));
    }
    let mut bins: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); n_bins];
    for (&z, &e) in scores.iter().zip(errors) {
        let b = &mut bins[bin_of(z, n_bins)];
        b.0 += z;
        b.1 += f64::from(u8::from(e));
        b.2 += 1;
    }
    Ok(bins
        .into_iter()
        .enumerate()
        .map(|(b, (sz, se, count))| CurveBin {
            bin_low: b as f64 / n_bins as f64,
            bin_high: (b + 1) as f64 / n_bins as f64,
            mean_score: (count > 0).then(|| sz / count as f64),
            error_rate: (count > 0).then(|| se / count as f64),
            count,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortedBin {
    pub mean_score: f64,
    pub error_rate: f64,
    pub count: usize,
}

fn ascending(a: &ScoredOutcome, b: &ScoredOutcome) -> Ordering {
    a.zeta.total_cmp(&b.zeta).then_with(|| a.id.cmp(&b.id))
}

/// Consecutive bins of `bin_size` points after sorting by score (ties by id);
/// the last bin may be smaller.
pub fn sorted_bins(points: &[ScoredOutcome], bin_size: usize) -> Result<Vec<SortedBin>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("calibration input"));
    }
    if bin_size == 0 {
        return Err(Error::InvalidConfig("bin_size must be positive".into()));
    }
    let mut sorted: Vec<&ScoredOutcome> = points.iter().collect();
    sorted.sort_by(|a, b| ascending(a, b));
    Ok(sorted
        .chunks(bin_size)
        .map(|chunk| {
            let n = chunk.len() as f64;
            SortedBin {
                mean_score: chunk.iter().map(|p| p.zeta).sum::<f64>() / n,
                error_rate: chunk.iter().filter(|p| p.is_error).count() as f64 / n,
                count: chunk.len(),
            }
        })
        .collect())
}

/// Squared Pearson correlation of per-bin mean score and error rate; 0 with
/// fewer than two bins or a degenerate axis.
pub fn r2_of_bins(bins: &[SortedBin]) -> f64 {
    if bins.len() < 2 {
        return 0.0;
    }
    let n = bins.len() as f64;
    let mx = bins.iter().map(|b| b.mean_score).sum::<f64>() / n;
    let my = bins.iter().map(|b| b.error_rate).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for b in bins {
        let (dx, dy) = (b.mean_score - mx, b.error_rate - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 1e-20 || syy <= 1e-20 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).min(1.0)
}

pub fn binned_r2(points: &[ScoredOutcome], bin_size: usize) -> Result<f64> {
    Ok(r2_of_bins(&sorted_bins(points, bin_size)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub percentile: f64,
    pub error_rate: f64,
    pub count: usize,
}

/// Error rate among the `ceil(p n / 100)` highest-scoring points (ties by id).
pub fn top_percentile_errors(points: &[ScoredOutcome], percentiles: &[f64]) -> Result<Vec<PercentileRow>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("calibration input"));
    }
    let mut sorted: Vec<&ScoredOutcome> = points.iter().collect();
    sorted.sort_by(|a, b| b.zeta.total_cmp(&a.zeta).then_with(|| a.id.cmp(&b.id)));
    percentiles
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::InvalidConfig(format!("percentile {p} outside (0, 100]")));
            }
            let count = ((p * points.len() as f64 / 100.0).ceil() as usize).clamp(1, points.len());
            let errors = sorted[..count].iter().filter(|s| s.is_error).count();
            Ok(PercentileRow { percentile: p, error_rate: errors as f64 / count as f64, count })
        })
        .collect()
}

/// Vote shares over the triggered sources and the LLM.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorityVote {
    pub dist: Simplex,
    /// No votes at all; `dist` is uniform.
    pub no_votes: bool,
}

pub fn majority_vote_estimate(row: LabelRow<'_>, k: usize) -> MajorityVote {
    let mut votes = vec![0usize; k];
    let mut total = 0usize;
    for answer in row.answers().flatten() {
        votes[answer.0] += 1;
        total += 1;
    }
    if total == 0 {
        return MajorityVote { dist: Simplex::uniform(k), no_votes: true };
    }
    let probs = votes.iter().map(|&v| v as f64 / total as f64).collect();
    MajorityVote { dist: Simplex::new(probs).expect("vote shares form a distribution"), no_votes: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub n_bins: usize,
    pub bin_size: usize,
    pub percentiles: Vec<f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { n_bins: DEFAULT_BINS, bin_size: DEFAULT_BIN_SIZE, percentiles: DEFAULT_PERCENTILES.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub r2: f64,
    pub curve_bins: Vec<CurveBin>,
    pub sorted_bins: Vec<SortedBin>,
    pub top_percentile_table: Vec<PercentileRow>,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub fn report_from_outcomes(points: &[ScoredOutcome], n_skipped: usize, opts: &ReportOptions) -> Result<CalibrationReport> {
    let scores: Vec<f64> = points.iter().map(|p| p.zeta).collect();
    let errors: Vec<bool> = points.iter().map(|p| p.is_error).collect();
    let sorted = sorted_bins(points, opts.bin_size)?;
    Ok(CalibrationReport {
        ece: ece(&scores, &errors, opts.n_bins)?,
        r2: r2_of_bins(&sorted),
        curve_bins: calibration_curve(&scores, &errors, opts.n_bins)?,
        sorted_bins: sorted,
        top_percentile_table: top_percentile_errors(points, &opts.percentiles)?,
        n_evaluated: points.len(),
        n_skipped,
        config_digest: None,
    })
}

/// Pairs scores with gold outcomes. Instances without a score (unsure LLM) or
/// without gold are counted as skipped.
pub fn outcomes(scores: &[PolarScore], data: &Dataset) -> Result<(Vec<ScoredOutcome>, usize)> {
    if !data.has_gold() {
        return Err(Error::NoGold);
    }
    let mut by_id: HashMap<&str, &PolarScore> = HashMap::with_capacity(scores.len());
    for s in scores {
        if by_id.insert(&s.id, s).is_some() {
            return Err(Error::Malformed(format!("duplicate score for {:?}", s.id)));
        }
    }
    let mut points = Vec::with_capacity(scores.len());
    let mut skipped = 0;
    for (i, inst) in data.instances().iter().enumerate() {
        let score = by_id.remove(inst.id.as_str());
        match (score, inst.gold) {
            (Some(s), Some(gold)) => {
                if data.row(i).llm != Some(s.llm) {
                    return Err(Error::Malformed(format!("score for {:?} disagrees with the dataset's llm answer", inst.id)));
                }
                points.push(ScoredOutcome { id: inst.id.clone(), zeta: s.zeta, is_error: s.llm != gold });
            }
            _ => skipped += 1,
        }
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Malformed(format!("score for unknown instance {id:?}")));
    }
    Ok((points, skipped))
}

pub fn build_report(scores: &[PolarScore], data: &Dataset, opts: &ReportOptions) -> Result<CalibrationReport> {
    let (points, skipped) = outcomes(scores, data)?;
    report_from_outcomes(&points, skipped, opts)
}

/// Majority-vote risk estimates `1 - p_vote[answer]` for every instance with a
/// stated LLM answer and gold label.
pub fn majority_vote_outcomes(data: &Dataset) -> Result<(Vec<ScoredOutcome>, usize)> {
    if !data.has_gold() {
        return Err(Error::NoGold);
    }
    let mut points = Vec::with_capacity(data.n());
    let mut skipped = 0;
    for (i, inst) in data.instances().iter().enumerate() {
        let row = data.row(i);
        match (row.llm, inst.gold) {
            (Some(answer), Some(gold)) => {
                let vote = majority_vote_estimate(row, data.k());
                points.push(ScoredOutcome { id: inst.id.clone(), zeta: 1.0 - vote.dist.get(answer), is_error: answer != gold });
            }
            _ => skipped += 1,
        }
    }
    Ok((points, skipped))
}

pub fn majority_vote_report(data: &Dataset, opts: &ReportOptions) -> Result<CalibrationReport> {
    let (points, skipped) = majority_vote_outcomes(data)?;
    report_from_outcomes(&points, skipped, opts)
}

fn csv_writer(path: &Path, digest: Option<&str>) -> Result<csv::Writer<BufWriter<File>>> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    if let Some(d) = digest {
        writeln!(out, "# config_digest: {d}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(out))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `bin_low,bin_high,mean_score,error_rate,count`; empty bins leave the means blank.
pub fn write_curve_csv(report: &CalibrationReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path, report.config_digest.as_deref())?;
    w.write_record(["bin_low", "bin_high", "mean_score", "error_rate", "count"])?;
    for b in &report.curve_bins {
        w.write_record([b.bin_low.to_string(), b.bin_high.to_string(), opt(b.mean_score), opt(b.error_rate), b.count.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `mean_score,error_rate,count`.
pub fn write_sorted_bins_csv(report: &CalibrationReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path, report.config_digest.as_deref())?;
    w.write_record(["mean_score", "error_rate", "count"])?;
    for b in &report.sorted_bins {
        w.write_record([b.mean_score.to_string(), b.error_rate.to_string(), b.count.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn save_report(report: &CalibrationReport, path: &Path) -> Result<()> {
    write_json(report, path)
}
