use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants map onto the process exit codes used by the command line
/// front end (see [`GsError::exit_code`]).
#[derive(Debug, Error)]
pub enum GsError {
    /// Invalid parameters, shapes, or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A defect region captured no points; the caller should retry with a new center.
    #[error("defect rejected: {0}")]
    Rejected(String),

    /// Zero-shot protocol violation, e.g. overlapping train/test categories.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Degenerate numeric input (zero-norm vectors, non-finite values).
    #[error("scoring error: {0}")]
    Scoring(String),

    /// A metric is undefined for the given labels (e.g. a single class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl GsError {
    pub fn config(msg: impl Into<String>) -> Self {
        GsError::Config(msg.into())
    }

    /// Exit status for the command line: 2 configuration, 3 protocol, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            GsError::Config(_) | GsError::Format(_) | GsError::Rejected(_) => 2,
            GsError::Protocol(_) => 3,
            GsError::Scoring(_) | GsError::UndefinedMetric(_) | GsError::Tensor(_) => 4,
            GsError::Io(_) | GsError::Json(_) => 2,
        }
    }
}

pub type Result<T, E = GsError> = std::result::Result<T, E>;
