use thiserror::Error;

/// Errors raised anywhere in the test pipeline.
#[derive(Debug, Error)]
pub enum NplmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite loss at Newton iteration {iteration} (gradient norm {grad_norm:e}); regularization is likely too small")]
    NonFiniteLoss { iteration: usize, grad_norm: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("calibration rejected: {failed} of {total} toys failed")]
    CalibrationRejected { failed: usize, total: usize },

    #[error("config fingerprint mismatch: null model has {expected}, current config has {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl NplmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NplmError::InvalidInput(msg.into())
    }

    /// True for failures that come from the numerics rather than the caller
    /// or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            NplmError::NonFiniteLoss { .. }
                | NplmError::Numerical(_)
                | NplmError::CalibrationRejected { .. }
                | NplmError::FingerprintMismatch { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, NplmError::Io(_) | NplmError::Parse { .. } | NplmError::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, NplmError>;
