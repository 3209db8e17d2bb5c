use thiserror::Error;

pub type Result<T> = std::result::Result<T, SoedError>;

#[derive(Debug, Error)]
pub enum SoedError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model evaluation failed: {0}")]
    ModelEvaluation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("tensor-train build failed after {evaluations} evaluations (held-out residual {residual:.3e}): {reason}")]
    TtBuild {
        reason: String,
        evaluations: usize,
        residual: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SoedError {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        SoedError::Dimension {
            context,
            expected,
            got,
        }
    }
}
