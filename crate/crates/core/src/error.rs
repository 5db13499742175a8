use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad mel file {path}: {reason}")]
    MelFormat { path: PathBuf, reason: String },

    #[error("manifest line {line}: {reason}")]
    ManifestRecord { line: usize, reason: String },

    #[error("utterance {id}: {reason}")]
    Utterance { id: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: u32, vocab: usize },

    #[error("unknown speaker id {id} ({count} speakers)")]
    UnknownSpeaker { id: usize, count: usize },

    #[error("label {label} out of range ({count} classes)")]
    LabelOutOfRange { label: usize, count: usize },

    #[error("zero-norm embedding at batch index {0}: cosine similarity undefined")]
    ZeroNorm(usize),

    #[error("diffusion time {0} outside the valid range")]
    InvalidTime(f64),

    #[error("invalid durations: {0}")]
    Duration(String),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: u64, breakdown: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
