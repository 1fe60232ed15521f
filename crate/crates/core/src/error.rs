use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{op}: shape mismatch {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty source sentence")]
    EmptySource,

    #[error("teacher distribution at position {position} sums to {sum}")]
    Unnormalized { position: usize, sum: f64 },

    #[error("search space too large: {size} sequences exceeds the limit of {limit}")]
    SearchSpaceTooLarge { size: f64, limit: f64 },

    #[error("NaN gradient for parameter {name} at update {update}")]
    NanGradient { name: String, update: u64 },

    #[error("training diverged at update {update}: loss {loss}")]
    Diverged { update: u64, loss: f64 },

    #[error("length mismatch: {hyps} hypotheses vs {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },

    #[error("k must be at least 1")]
    InvalidK,

    #[error("unknown phrase token {0:?}")]
    UnknownPhrase(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
