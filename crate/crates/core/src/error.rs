use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
///
/// Variants map onto the CLI exit-code classes: configuration problems,
/// data problems (missing/corrupt files, malformed samples) and numeric
/// failures.
#[derive(Debug, Error)]
pub enum AvdfError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt data in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("infeasible CTC target: {0}")]
    InfeasibleTarget(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl AvdfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AvdfError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            AvdfError::Config(_) => ErrorClass::Config,
            AvdfError::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = AvdfError> = std::result::Result<T, E>;
