use std::path::PathBuf;

use nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: 6D input has a zero or parallel column")]
    DegenerateRotation,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("timestamps must increase: {prev} then {next}")]
    NonMonotonicTime { prev: f64, next: f64 },
    #[error("empty sequence")]
    EmptySequence,
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("bad moving-average window {window} for length {len} (must be odd, >= 1, <= length)")]
    BadWindow { window: usize, len: usize },
    #[error("{path}: line {line}, field `{field}`: {msg}")]
    Parse { path: String, line: usize, field: String, msg: String },
    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    Version { path: String, found: u32, supported: u32 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("demonstration too short: {len} frames, need at least {needed}")]
    DemoTooShort { len: usize, needed: usize },
    #[error("no training samples available")]
    EmptyDataset,
    #[error("incompatible VAE: {0}")]
    IncompatibleVae(String),
    #[error("horizon H = {horizon} violates H < n + N - L = {limit}")]
    HorizonViolation { horizon: usize, limit: i64 },
    #[error("latent-mode policy requires a decoder")]
    DecoderMissing,
    #[error("bad task spec: {0}")]
    BadSpec(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes; the command-line tool maps them to exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Constraint,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::BadSpec(_) | Error::IncompatibleVae(_) | Error::DecoderMissing => ErrorCategory::Config,
            Error::DegenerateRotation | Error::SingularInnovation | Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Nn(NnError::NonFinite { .. }) => ErrorCategory::Numeric,
            Error::HorizonViolation { .. } => ErrorCategory::Constraint,
            _ => ErrorCategory::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
