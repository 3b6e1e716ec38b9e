use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("factorization failed for {context} (size {size}, jitter {jitter:e}): {diagnosis}")]
    Factorization {
        context: String,
        size: usize,
        jitter: f64,
        diagnosis: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parameters not identifiable: {0}")]
    Identifiability(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GpError {
    /// True for errors caused by bad user input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            GpError::InvalidArgument(_)
                | GpError::DimensionMismatch { .. }
                | GpError::Io(_)
                | GpError::Csv(_)
                | GpError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, GpError>;
