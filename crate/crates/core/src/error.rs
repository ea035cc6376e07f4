use std::path::PathBuf;

use m2dan_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported kernel size {0}: only odd sizes are allowed")]
    UnsupportedKernel(usize),

    #[error("row {row} is not a one-hot vector")]
    NotOneHot { row: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("AUC needs at least one positive and one negative label")]
    DegenerateLabels,

    #[error("batch size {batch_size} is not divisible by {domains} domains")]
    IndivisibleBatch { batch_size: usize, domains: usize },

    #[error("dataset root {0} has no `source` domain directory")]
    MissingSource(PathBuf),

    #[error("malformed PGM {path}: {reason}")]
    MalformedPgm { path: PathBuf, reason: String },

    #[error("labeled class directory {0} contains no images")]
    EmptyClassDir(PathBuf),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint does not match the model spec: {0}")]
    SpecMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
