//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any influence-lab operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged: non-finite parameter at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("degenerate checkpoint pair: squared distance is zero")]
    DegeneratePair,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("insufficient trials: {0}")]
    InsufficientTrials(String),

    #[error("gram cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("need at least two checkpoints, got {0}")]
    NeedsTwoCheckpoints(usize),

    #[error("missing asset `{what}`; produce it with `{remediation}`")]
    MissingAsset { what: String, remediation: String },

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("inconsistent row width at row {row}: expected {expected} columns, got {actual}")]
    InconsistentWidth {
        row: usize,
        expected: usize,
        actual: usize,
    },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: String },

    #[error("unsupported file version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid_arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
