use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("unknown stem `{0}`")]
    UnknownStem(String),

    #[error("stage {stage} out of range for stem `{stem}` (1..={n_streams})")]
    StageOutOfRange {
        stem: String,
        stage: usize,
        n_streams: usize,
    },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("malformed delayed grid: {0}")]
    MalformedDelay(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid edit plan: {0}")]
    InvalidPlan(String),

    #[error("sequence too long: {len} frames exceeds max_frames {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("condition id {id} out of range (n_conditions = {n})")]
    UnknownCondition { id: usize, n: usize },

    #[error("no positions left after masking")]
    EmptyMask,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
