//! `polar` command-line tool.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use polar_core::{AggregatorKind, Architecture, Scheme, Split, Strategy};

#[derive(Parser)]
#[command(name = "polar", version, about = "Risk scores for LLM answers from weak information sources")]
struct Cli {
    /// Seed for every random step of the command; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Convert a WRENCH-format directory into a canonical JSONL dataset.
    ImportWrench(ImportArgs),
    /// Train a harmonizer on a gold-free split.
    Train(TrainArgs),
    /// Derive source weights from a pilot model's residuals.
    Rebalance(RebalanceArgs),
    /// Compute risk scores for every answered instance.
    Score(ScoreArgs),
    /// Calibration report for a score file against gold labels.
    Eval(EvalArgs),
    /// Re-ask the LLM about answers whose risk exceeds the threshold.
    Correct(CorrectArgs),
    /// Run an aggregator x architecture x seed grid.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Number of instances; overrides the config.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-instance LLM error probabilities and difficulties (JSONL).
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Training configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the training report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    aggregator: Option<AggregatorKind>,
    #[arg(long)]
    architecture: Option<Architecture>,
    /// Weights file produced by `polar rebalance`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// One epoch of per-instance updates in file order.
    #[arg(long)]
    single_pass: bool,
}

#[derive(Args)]
struct RebalanceArgs {
    /// Pilot model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "min_variance")]
    scheme: Scheme,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the residual covariance and correlation (JSON).
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Score file; omit together with --majority-vote to evaluate the baseline.
    #[arg(long, required_unless_present = "majority_vote")]
    scores: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for curve.csv and sorted_bins.csv.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// Report options (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    bin_size: Option<usize>,
    /// Evaluate the majority-vote estimate instead of a score file.
    #[arg(long, conflicts_with = "scores")]
    majority_vote: bool,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Correction policy (JSON); defaults to self-verification at delta 0.5.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Prompt bundle (JSON); defaults to the built-in wording.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Answer mapper (JSON); defaults to matching class names.
    #[arg(long)]
    mapper: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// JSON array with one evidence template per source.
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "replay")]
    client: ClientKind,
    /// Replay fixture (JSONL of id, strategy, response_text).
    #[arg(long, required_if_eq("client", "replay"))]
    fixture: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible API, e.g. https://host/v1.
    #[arg(long, required_if_eq("client", "live"))]
    endpoint: Option<String>,
    #[arg(long, required_if_eq("client", "live"))]
    llm_model: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ClientKind {
    Replay,
    Live,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run the pilot-then-rebalanced comparison instead of the grid.
    #[arg(long)]
    pilot: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::ImportWrench(a) => commands::import_wrench(a),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Rebalance(a) => commands::rebalance(a, cli.seed),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Correct(a) => commands::correct(a),
        Command::Experiment(a) => commands::experiment(a, cli.seed),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
