use thiserror::Error;

/// Errors raised by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error)]
pub enum DddmError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("singular variance at t = {0}")]
    Singular(f64),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DddmError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DddmError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = DddmError> = std::result::Result<T, E>;
