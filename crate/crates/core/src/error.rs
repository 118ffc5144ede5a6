use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("non-positive price for asset {asset} at period {period}")]
    NonPositivePrice { asset: String, period: String },

    #[error("inconsistent OHLC for asset {asset} at period {period}: {msg}")]
    InconsistentBar {
        asset: String,
        period: String,
        msg: String,
    },

    #[error("period index {index} out of range (panel has {len} periods)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("insufficient history: period {t} needs {need} earlier periods")]
    InsufficientHistory { t: usize, need: usize },

    #[error("empty universe")]
    EmptyUniverse,

    #[error("invalid portfolio weights: {0}")]
    InvalidWeights(String),

    #[error("expected portfolio return must be positive, got {0}")]
    NonPositiveReturn(f64),

    #[error("infeasible constraint: minimal return {min_return} exceeds max expected fluctuation {max_mu}")]
    Infeasible { min_return: f64, max_mu: f64 },

    #[error("covariance is not positive semidefinite (smallest eigenvalue {0})")]
    NotPsd(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient at training step {0}")]
    NonFiniteGradient(u64),

    #[error("strategy `{strategy}` produced invalid weights at period {period}: {reason}")]
    InvalidDecision {
        strategy: String,
        period: usize,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
