use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("batchnorm running stats are uninitialized; run at least one train-mode step first")]
    UninitializedStats,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable is detached from this tape")]
    Detached,

    #[error("backward already ran on this tape; call reset_grads before running it again")]
    BackwardTwice,

    #[error("memory is empty")]
    EmptyMemory,

    #[error("invalid label {label} for a {ways}-way episode")]
    Label { label: usize, ways: usize },

    #[error("dataset error at {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("cannot sample episode: {0}")]
    Sampling(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {field}: {detail}")]
    Config { field: String, detail: String },

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate { op, detail: detail.into() }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Dataset { path: path.into(), detail: detail.into() }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { field: field.into(), detail: detail.into() }
    }
}
