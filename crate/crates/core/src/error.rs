use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("label {label} out of range for {k} classes ({context})")]
    LabelOutOfRange { label: i64, k: usize, context: String },

    #[error("dimension mismatch ({context}): expected {expected}, found {found}")]
    DimensionMismatch { context: String, expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing sidecar file {0}")]
    MissingSidecar(PathBuf),

    #[error("training split exposes gold labels to the trainer")]
    GoldLeak,

    #[error("no triggered source entries in the training data")]
    NothingTriggered,

    #[error("training diverged at epoch {epoch}, batch {batch}: objective {value}")]
    Divergence { epoch: usize, batch: usize, value: f64 },

    #[error("negative loss {value} at coordinate {index}")]
    NegativeLoss { index: usize, value: f64 },

    #[error("power iteration did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("matrix is singular")]
    Singular,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no gold labels available for evaluation")]
    NoGold,

    #[error("replay fixture has no response for id {id:?} with strategy {strategy}")]
    MissingReplay { id: String, strategy: String },

    #[error("llm client: {0}")]
    Client(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn at_line(self, line: usize) -> Self {
        Error::AtLine { line, source: Box::new(self) }
    }
}
