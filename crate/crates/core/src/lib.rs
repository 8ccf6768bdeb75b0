//! Risk scoring for LLM answers using a harmonizer trained against the LLM and
//! a set of weak information sources.

pub mod correction;
pub mod dataset;
pub mod digest;
pub mod error;
pub mod eval;
pub mod harmonizer;
pub mod pareto;
pub mod pipeline;
pub mod polar;
pub mod rebalance;
pub mod trainer;

pub use correction::{AnswerMapper, CorrectionPolicy, PromptBundle, Strategy};
pub use dataset::{ClassIndex, ClassSpace, Dataset, Instance, LabelRow, SourceLabelMatrix, Split};
pub use error::{Error, Result};
pub use eval::{CalibrationReport, ReportOptions};
pub use harmonizer::{Architecture, HarmonizerParams, LossVector, Model, Simplex};
pub use pareto::{AggregatorKind, AggregatorSpec, Dominance};
pub use pipeline::{ExperimentConfig, ExperimentResult};
pub use polar::PolarScore;
pub use rebalance::{RebalanceConfig, ResidualStats, Scheme};
pub use trainer::{TrainConfig, TrainReport};
