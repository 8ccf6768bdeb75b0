//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use polar_core::correction::{correct_batch, save_corrections, HttpClient, HttpConfig, LlmClient, ReplayClient, Status};
use polar_core::dataset::{self, generate_synthetic, load_dataset, save_dataset, SynthConfig};
use polar_core::digest::config_digest;
use polar_core::eval::{build_report, majority_vote_report, save_report, write_curve_csv, write_sorted_bins_csv};
use polar_core::harmonizer::Model;
use polar_core::pipeline::{run_experiment, run_pilot_then_rebalanced, ExperimentConfig};
use polar_core::polar::{load_scores, save_scores, score_batch};
use polar_core::rebalance::{compute_residual_stats, rebalance_weights, WeightsFile, DEFAULT_EPSILON};
use polar_core::trainer::train as fit;
use polar_core::{
    AggregatorKind, AnswerMapper, Architecture, CorrectionPolicy, Dataset, PromptBundle, RebalanceConfig, ReportOptions, Split, TrainConfig,
};

use crate::{ClientKind, CorrectArgs, EvalArgs, ExperimentArgs, ImportArgs, RebalanceArgs, ScoreArgs, SynthArgs, TrainArgs};

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path, split: Split) -> Result<Dataset> {
    load_dataset(path, split).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path, data: &Dataset) -> Result<Model> {
    let model = Model::load(path).with_context(|| format!("loading model {}", path.display()))?;
    if model.class_labels != data.class_space().labels() {
        bail!("model classes {:?} differ from dataset classes {:?}", model.class_labels, data.class_space().labels());
    }
    Ok(model)
}

pub fn synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig = read_json(&args.config)?;
    if let Some(n) = args.n {
        cfg.n = n;
    }
    let data = generate_synthetic(&cfg, seed.unwrap_or(0))?;
    save_dataset(&data.dataset, &args.out)?;
    if let Some(path) = &args.oracle {
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for ((inst, p), t) in data.dataset.instances().iter().zip(&data.llm_error_prob).zip(&data.difficulty) {
            let line = serde_json::json!({ "id": inst.id, "llm_error_prob": p, "difficulty": t });
            writeln!(out, "{line}")?;
        }
        out.flush()?;
    }
    log::info!("wrote {} instances to {}", data.dataset.n(), args.out.display());
    Ok(())
}

pub fn import_wrench(args: ImportArgs) -> Result<()> {
    let imported = dataset::import_wrench(&args.dir, args.split)?;
    if !imported.missing_llm.is_empty() {
        log::warn!("{} instances have no LLM answer", imported.missing_llm.len());
    }
    save_dataset(&imported.dataset, &args.out)?;
    log::info!("wrote {} instances to {}", imported.dataset.n(), args.out.display());
    Ok(())
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<TrainConfig>(path)?,
        None => TrainConfig::new(args.aggregator.unwrap_or(AggregatorKind::Quadratic), args.architecture.unwrap_or(Architecture::Mlp)),
    };
    if let Some(a) = args.aggregator {
        cfg.aggregator = a;
    }
    if let Some(a) = args.architecture {
        cfg.architecture = a;
    }
    if let Some(path) = &args.weights {
        cfg.weights = Some(read_json::<WeightsFile>(path)?.weights);
    }
    if let Some(h) = args.hidden {
        cfg.hidden = h;
    }
    if args.learning_rate.is_some() {
        cfg.learning_rate = args.learning_rate;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = args.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(p) = args.patience {
        cfg.patience = p;
    }
    if args.single_pass {
        cfg.single_pass = true;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }

    let data = load(&args.data, Split::Train)?;
    let dev = args.dev.as_deref().map(|p| load(p, Split::Dev)).transpose()?;
    let (params, report) = fit(&data, dev.as_ref(), &cfg)?;
    let model = Model { params, class_labels: data.class_space().labels().to_vec(), train_config_digest: report.config_digest.clone() };
    model.save(&args.out)?;
    if let Some(path) = &args.report {
        write_json(&report, path)?;
    }
    log::info!(
        "trained {} epochs (best {}), final train objective {:.6}",
        report.epochs_run,
        report.best_epoch,
        report.train_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn rebalance(args: RebalanceArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RebalanceConfig::new(args.scheme, args.epsilon.unwrap_or(DEFAULT_EPSILON));
    if let Some(r) = args.ridge {
        cfg.ridge = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = load(&args.data, Split::Train)?;
    let model = load_model(&args.model, &data)?;
    let stats = compute_residual_stats(&model.params, &data)?;
    let weights = rebalance_weights(&stats, &cfg)?;
    let file = WeightsFile { weights, scheme: cfg.scheme, epsilon: cfg.epsilon, config_digest: Some(config_digest(&cfg)?) };
    write_json(&file, &args.out)?;
    if let Some(path) = &args.stats {
        write_json(&stats, path)?;
    }
    log::info!("weights {:?}", file.weights);
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let data = load(&args.data, Split::Test)?;
    let model = load_model(&args.model, &data)?;
    let mut batch = score_batch(&model.params, &data)?;
    for s in &mut batch.scores {
        s.config_digest = Some(model.train_config_digest.clone());
    }
    if !batch.skipped.is_empty() {
        log::warn!("{} instances without an LLM answer were not scored", batch.skipped.len());
    }
    save_scores(&batch.scores, &args.out)?;
    log::info!("wrote {} scores to {}", batch.scores.len(), args.out.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut opts = match &args.config {
        Some(path) => read_json::<ReportOptions>(path)?,
        None => ReportOptions::default(),
    };
    if let Some(b) = args.bins {
        opts.n_bins = b;
    }
    if let Some(b) = args.bin_size {
        opts.bin_size = b;
    }
    let data = load(&args.data, Split::Test)?;
    let report = match &args.scores {
        Some(path) => {
            let scores = load_scores(path)?;
            let mut report = build_report(&scores, &data, &opts)?;
            let first = scores.first().and_then(|s| s.config_digest.clone());
            if scores.iter().all(|s| s.config_digest == first) {
                report.config_digest = first;
            }
            report
        }
        None if args.majority_vote => majority_vote_report(&data, &opts)?,
        None => bail!("either --scores or --majority-vote is required"),
    };
    save_report(&report, &args.out)?;
    if let Some(dir) = &args.csv_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_curve_csv(&report, &dir.join("curve.csv"))?;
        write_sorted_bins_csv(&report, &dir.join("sorted_bins.csv"))?;
    }
    println!("ece={:.4} r2={:.4} evaluated={} skipped={}", report.ece, report.r2, report.n_evaluated, report.n_skipped);
    Ok(())
}

pub fn correct(args: CorrectArgs) -> Result<()> {
    let mut policy = match &args.policy {
        Some(path) => read_json::<CorrectionPolicy>(path)?,
        None => CorrectionPolicy::self_verify(polar_core::correction::DEFAULT_DELTA),
    };
    if let Some(d) = args.delta {
        policy.delta = d;
    }
    if let Some(s) = args.strategy {
        policy.strategy = s;
    }
    if let Some(path) = &args.descriptions {
        policy.source_descriptions = read_json(path)?;
    }
    let bundle = match &args.prompts {
        Some(path) => read_json::<PromptBundle>(path)?,
        None => PromptBundle::default(),
    };
    let data = load(&args.data, Split::Test)?;
    let model = load_model(&args.model, &data)?;
    let mapper = match &args.mapper {
        Some(path) => read_json::<AnswerMapper>(path)?,
        None => AnswerMapper::from_class_space(data.class_space()),
    };

    let client: Box<dyn LlmClient> = match args.client {
        ClientKind::Replay => {
            let path = args.fixture.as_deref().context("--fixture is required with --client replay")?;
            Box::new(ReplayClient::load(path)?)
        }
        ClientKind::Live => {
            let endpoint = args.endpoint.clone().context("--endpoint is required with --client live")?;
            let llm_model = args.llm_model.clone().context("--llm-model is required with --client live")?;
            let mut cfg = HttpConfig::new(endpoint, llm_model);
            if let Some(c) = args.concurrency {
                cfg.concurrency = c;
            }
            Box::new(HttpClient::new(cfg)?)
        }
    };
    let records = correct_batch(client.as_ref(), &policy, &bundle, &mapper, &model.params, &data)?;
    save_corrections(&records, &args.out)?;

    let count = |status: Status| records.iter().filter(|r| r.status == status).count();
    println!(
        "kept={} updated={} unmapped={} unsure={} failed={} unscored={}",
        count(Status::Kept),
        count(Status::Updated),
        count(Status::Unmapped),
        count(Status::UnsureReply),
        count(Status::Failed),
        count(Status::Unscored)
    );
    Ok(())
}

pub fn experiment(args: ExperimentArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(&args.config)?;
    if let Some(dir) = args.out_dir {
        cfg.output_dir = Some(dir);
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if args.pilot {
        let reports = run_pilot_then_rebalanced(&cfg)?;
        println!("seed,pilot_ece,rebalanced_ece,pilot_r2,rebalanced_r2");
        for r in &reports {
            println!("{},{:.6},{:.6},{:.6},{:.6}", r.seed, r.pilot.ece, r.rebalanced.ece, r.pilot.r2, r.rebalanced.r2);
        }
        return Ok(());
    }
    let result = run_experiment(&cfg)?;
    println!("aggregator,architecture,ece_mean,r2_mean,n_seeds");
    for row in &result.summary {
        println!("{},{},{:.6},{:.6},{}", row.aggregator, row.architecture, row.ece_mean, row.r2_mean, row.n_seeds);
    }
    for f in &result.failures {
        log::warn!("cell {}/{}/seed {} failed: {}", f.aggregator, f.architecture, f.seed, f.error);
    }
    if !result.failures.is_empty() && result.cells.is_empty() {
        bail!("every grid cell failed");
    }
    Ok(())
}
