use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token sequence carries an unapplied permutation; reassemble it first")]
    UnappliedPermutation,

    #[error("number of subsets K must be at least 1, got {0}")]
    InvalidK(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("per-subset encoding requires the exact (-inf) mask fill")]
    LegacyFill,

    #[error("no valid ground-truth pixels for supervision")]
    EmptySupervision,

    #[error("no valid pixels to evaluate")]
    NoValidPixels,

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("labeled pool is empty")]
    EmptyLabeledPool,

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("non-finite loss at step {step}: {terms}")]
    NonFiniteLoss { step: u64, terms: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Format { path: path.into(), msg: msg.into() }
    }
}
