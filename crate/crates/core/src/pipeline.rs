//! Experiment orchestration: the aggregator x architecture x seed grid with a
//! no-sources ablation and a majority-vote baseline, and pilot-then-rebalanced
//! training.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_dataset, Dataset, Split, SynthConfig};
use crate::digest::config_digest;
use crate::error::{Error, Result};
use crate::eval::{
    build_report, majority_vote_report, save_report, write_curve_csv, write_json, write_sorted_bins_csv, CalibrationReport, ReportOptions,
};
use crate::harmonizer::{Architecture, HarmonizerParams, Model};
use crate::pareto::AggregatorKind;
use crate::polar::{save_scores, score_batch};
use crate::rebalance::{compute_residual_stats, rebalance_weights, RebalanceConfig, ResidualStats};
use crate::trainer::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The same files serve every seed.
    Files {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dev: Option<PathBuf>,
        test: PathBuf,
    },
    /// Fresh train/dev/test draws per seed.
    Synthetic {
        config: SynthConfig,
        n_train: usize,
        #[serde(default)]
        n_dev: usize,
        n_test: usize,
    },
}

/// Training hyperparameters shared by every grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainTemplate {
    pub hidden: usize,
    /// Per-architecture default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub single_pass: bool,
}

impl Default for TrainTemplate {
    fn default() -> Self {
        let base = TrainConfig::new(AggregatorKind::Linear, Architecture::Linear);
        Self {
            hidden: base.hidden,
            learning_rate: None,
            weight_decay: base.weight_decay,
            batch_size: base.batch_size,
            max_epochs: base.max_epochs,
            patience: base.patience,
            single_pass: base.single_pass,
        }
    }
}

impl TrainTemplate {
    pub fn config(&self, aggregator: AggregatorKind, architecture: Architecture, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            single_pass: self.single_pass,
            ..TrainConfig::new(aggregator, architecture)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub aggregators: Vec<AggregatorKind>,
    pub architectures: Vec<Architecture>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainTemplate,
    /// Reweights sources from an equal-weight pilot before each grid cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rebalance: Option<RebalanceConfig>,
    #[serde(default)]
    pub report: ReportOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aggregators.is_empty() || self.architectures.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("aggregators, architectures and seeds must be non-empty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        if let DataSource::Synthetic { n_train, n_test, .. } = self.data {
            if n_train == 0 || n_test == 0 {
                return Err(Error::InvalidConfig("synthetic n_train and n_test must be positive".into()));
            }
        }
        Ok(())
    }

    /// Digest of everything that determines the results (the output directory excluded).
    pub fn digest(&self) -> Result<String> {
        config_digest(&ExperimentConfig { output_dir: None, ..self.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Option<Dataset>,
    pub test: Dataset,
}

pub fn load_splits(source: &DataSource, seed: u64) -> Result<Splits> {
    match source {
        DataSource::Files { train, dev, test } => Ok(Splits {
            train: load_dataset(train, Split::Train)?,
            dev: dev.as_deref().map(|p| load_dataset(p, Split::Dev)).transpose()?,
            test: load_dataset(test, Split::Test)?,
        }),
        DataSource::Synthetic { config, n_train, n_dev, n_test } => {
            let total = n_train + n_dev + n_test;
            let data = generate_synthetic(&SynthConfig { n: total, ..config.clone() }, seed)?.dataset;
            Ok(Splits {
                train: data.slice(0..*n_train, Split::Train)?,
                dev: (*n_dev > 0).then(|| data.slice(*n_train..n_train + n_dev, Split::Dev)).transpose()?,
                test: data.slice(n_train + n_dev..total, Split::Test)?,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub aggregator: String,
    pub architecture: String,
    pub seed: u64,
    pub weights: Vec<f64>,
    pub report: CalibrationReport,
    pub train_report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub aggregator: String,
    pub architecture: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub aggregator: String,
    pub architecture: String,
    pub ece_mean: f64,
    pub r2_mean: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub seed: u64,
    pub report: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_digest: String,
    pub summary: Vec<SummaryRow>,
    pub cells: Vec<CellResult>,
    pub no_sources: Vec<CellResult>,
    pub majority_vote: Vec<BaselineResult>,
    pub failures: Vec<CellFailure>,
}

impl ExperimentResult {
    pub fn cell(&self, aggregator: AggregatorKind, architecture: Architecture, seed: u64) -> Option<&CellResult> {
        let (agg, arch) = (aggregator.to_string(), architecture.to_string());
        self.cells.iter().find(|c| c.aggregator == agg && c.architecture == arch && c.seed == seed)
    }
}

pub const NO_SOURCES: &str = "no_sources";
pub const MAJORITY_VOTE: &str = "majority_vote";

struct Trained {
    params: HarmonizerParams,
    weights: Vec<f64>,
    train_report: TrainReport,
    train_config: TrainConfig,
}

fn fit(splits: &Splits, cfg: TrainConfig, rebalance: Option<&RebalanceConfig>) -> Result<Trained> {
    let cfg = match rebalance {
        Some(rb) => {
            let (pilot, _) = train(&splits.train, splits.dev.as_ref(), &TrainConfig { weights: None, ..cfg.clone() })?;
            let stats = compute_residual_stats(&pilot, &splits.train)?;
            TrainConfig { weights: Some(rebalance_weights(&stats, rb)?), ..cfg }
        }
        None => cfg,
    };
    let weights = cfg.spec(splits.train.m())?.weights().to_vec();
    let (params, train_report) = train(&splits.train, splits.dev.as_ref(), &cfg)?;
    Ok(Trained { params, weights, train_report, train_config: cfg })
}

struct CellSpec {
    aggregator: AggregatorKind,
    architecture: Architecture,
    seed_index: usize,
    no_sources: bool,
}

impl CellSpec {
    fn label(&self) -> String {
        if self.no_sources {
            NO_SOURCES.to_string()
        } else {
            self.aggregator.to_string()
        }
    }
}

fn run_cell(cfg: &ExperimentConfig, splits: &Splits, cell: &CellSpec, digest: &str) -> Result<CellResult> {
    let seed = cfg.seeds[cell.seed_index];
    let ablated;
    let splits = if cell.no_sources {
        ablated = Splits {
            train: splits.train.without_sources(),
            dev: splits.dev.as_ref().map(Dataset::without_sources),
            test: splits.test.clone(),
        };
        &ablated
    } else {
        splits
    };
    let train_cfg = cfg.train.config(cell.aggregator, cell.architecture, seed);
    let rebalance = if cell.no_sources { None } else { cfg.rebalance.as_ref() };
    let trained = fit(splits, train_cfg, rebalance)?;
    let mut scores = score_batch(&trained.params, &splits.test)?.scores;
    for s in &mut scores {
        s.config_digest = Some(digest.to_string());
    }
    let mut report = build_report(&scores, &splits.test, &cfg.report)?;
    report.config_digest = Some(digest.to_string());

    if let Some(out) = &cfg.output_dir {
        let dir = out.join("cells").join(format!("{}-{}-seed{seed}", cell.label(), cell.architecture));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let model = Model {
            params: trained.params.clone(),
            class_labels: splits.train.class_space().labels().to_vec(),
            train_config_digest: trained.train_config.digest()?,
        };
        model.save(&dir.join("model.json"))?;
        write_json(&trained.train_report, &dir.join("train_report.json"))?;
        save_scores(&scores, &dir.join("scores.jsonl"))?;
        save_report(&report, &dir.join("report.json"))?;
        write_curve_csv(&report, &dir.join("curve.csv"))?;
        write_sorted_bins_csv(&report, &dir.join("sorted_bins.csv"))?;
    }

    Ok(CellResult {
        aggregator: cell.label(),
        architecture: cell.architecture.to_string(),
        seed,
        weights: trained.weights,
        report,
        train_report: trained.train_report,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (if n == 0 { f64::NAN } else { sum / n as f64 }, n)
}

fn summarize(aggregator: &str, architecture: &str, reports: &[&CalibrationReport]) -> Option<SummaryRow> {
    if reports.is_empty() {
        return None;
    }
    let (ece_mean, n_seeds) = mean(reports.iter().map(|r| r.ece));
    let (r2_mean, _) = mean(reports.iter().map(|r| r.r2));
    Some(SummaryRow { aggregator: aggregator.to_string(), architecture: architecture.to_string(), ece_mean, r2_mean, n_seeds })
}

/// Runs every grid cell plus the no-sources ablation (first aggregator and
/// architecture) and the majority-vote baseline. Cells run in parallel; a
/// failing cell is recorded and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let digest = cfg.digest()?;
    let splits: Vec<Splits> = cfg.seeds.par_iter().map(|&s| load_splits(&cfg.data, s)).collect::<Result<_>>()?;

    let mut specs = Vec::new();
    for &aggregator in &cfg.aggregators {
        for &architecture in &cfg.architectures {
            for seed_index in 0..cfg.seeds.len() {
                specs.push(CellSpec { aggregator, architecture, seed_index, no_sources: false });
            }
        }
    }
    for seed_index in 0..cfg.seeds.len() {
        specs.push(CellSpec { aggregator: cfg.aggregators[0], architecture: cfg.architectures[0], seed_index, no_sources: true });
    }

    let outcomes: Vec<Result<CellResult>> = specs.par_iter().map(|c| run_cell(cfg, &splits[c.seed_index], c, &digest)).collect();
    let mut cells = Vec::new();
    let mut no_sources = Vec::new();
    let mut failures = Vec::new();
    for (spec, outcome) in specs.iter().zip(outcomes) {
        match outcome {
            Ok(r) if spec.no_sources => no_sources.push(r),
            Ok(r) => cells.push(r),
            Err(e) => {
                log::warn!("cell {}/{}/seed {} failed: {e}", spec.label(), spec.architecture, cfg.seeds[spec.seed_index]);
                failures.push(CellFailure {
                    aggregator: spec.label(),
                    architecture: spec.architecture.to_string(),
                    seed: cfg.seeds[spec.seed_index],
                    error: e.to_string(),
                });
            }
        }
    }

    let majority_vote = cfg
        .seeds
        .iter()
        .zip(&splits)
        .map(|(&seed, s)| {
            let mut report = majority_vote_report(&s.test, &cfg.report)?;
            report.config_digest = Some(digest.clone());
            Ok(BaselineResult { seed, report })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::new();
    for &aggregator in &cfg.aggregators {
        for &architecture in &cfg.architectures {
            let (agg, arch) = (aggregator.to_string(), architecture.to_string());
            let reports: Vec<&CalibrationReport> =
                cells.iter().filter(|c| c.aggregator == agg && c.architecture == arch).map(|c| &c.report).collect();
            summary.extend(summarize(&agg, &arch, &reports));
        }
    }
    let reports: Vec<&CalibrationReport> = no_sources.iter().map(|c| &c.report).collect();
    summary.extend(summarize(NO_SOURCES, &cfg.architectures[0].to_string(), &reports));
    let reports: Vec<&CalibrationReport> = majority_vote.iter().map(|b| &b.report).collect();
    summary.extend(summarize(MAJORITY_VOTE, "-", &reports));

    let result = ExperimentResult { config_digest: digest, summary, cells, no_sources, majority_vote, failures };
    if let Some(out) = &cfg.output_dir {
        write_summary_csv(&result, &out.join("summary.csv"))?;
        write_json(&result, &out.join("experiment.json"))?;
    }
    Ok(result)
}

/// `aggregator,architecture,ece_mean,r2_mean,n_seeds`, preceded by a
/// `# config_digest:` comment line.
pub fn write_summary_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = format!("# config_digest: {}\n", result.config_digest);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["aggregator", "architecture", "ece_mean", "r2_mean", "n_seeds"])?;
    for row in &result.summary {
        w.write_record([
            row.aggregator.clone(),
            row.architecture.clone(),
            row.ece_mean.to_string(),
            row.r2_mean.to_string(),
            row.n_seeds.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
    text.push_str(&String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))?);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub seed: u64,
    pub pilot_weights: Vec<f64>,
    pub rebalanced_weights: Vec<f64>,
    pub stats: ResidualStats,
    pub pilot: CalibrationReport,
    pub rebalanced: CalibrationReport,
}

/// Per seed: an equal-weight pilot with the first aggregator and architecture,
/// weights from its residuals, and a retrained model; both evaluated on test.
pub fn run_pilot_then_rebalanced(cfg: &ExperimentConfig) -> Result<Vec<PairedReport>> {
    cfg.validate()?;
    let rb = cfg.rebalance.as_ref().ok_or_else(|| Error::InvalidConfig("pilot-then-rebalanced needs a rebalance section".into()))?;
    let digest = cfg.digest()?;
    let reports = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let splits = load_splits(&cfg.data, seed)?;
            let base = cfg.train.config(cfg.aggregators[0], cfg.architectures[0], seed);
            let (pilot, _) = train(&splits.train, splits.dev.as_ref(), &base)?;
            let stats = compute_residual_stats(&pilot, &splits.train)?;
            let weights = rebalance_weights(&stats, rb)?;
            let tuned_cfg = TrainConfig { weights: Some(weights.clone()), ..base.clone() };
            let (tuned, _) = train(&splits.train, splits.dev.as_ref(), &tuned_cfg)?;
            let evaluate = |params: &HarmonizerParams| -> Result<CalibrationReport> {
                let scores = score_batch(params, &splits.test)?.scores;
                let mut report = build_report(&scores, &splits.test, &cfg.report)?;
                report.config_digest = Some(digest.clone());
                Ok(report)
            };
            Ok(PairedReport {
                seed,
                pilot_weights: base.spec(splits.train.m())?.weights().to_vec(),
                rebalanced_weights: weights,
                stats,
                pilot: evaluate(&pilot)?,
                rebalanced: evaluate(&tuned)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(out) = &cfg.output_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        #[derive(Serialize)]
        struct Doc<'a> {
            config_digest: &'a str,
            seeds: &'a [PairedReport],
        }
        write_json(&Doc { config_digest: &digest, seeds: &reports }, &out.join("rebalance.json"))?;
    }
    Ok(reports)
}
