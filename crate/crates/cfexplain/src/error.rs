//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset contains a single class only: {0}")]
    SingleClass(String),

    #[error("training loss became non-finite at step {step} (loss = {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("sample `{id}`: {reason}")]
    CorruptSample { id: String, reason: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("PNG codec: {0}")]
    Png(String),
}

impl Error {
    pub fn shape(what: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}
