use std::path::PathBuf;

/// Errors raised by the poisoning laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("poison budget error: {0}")]
    Budget(String),

    #[error("clean-label violation: {0}")]
    CleanLabelViolation(String),

    #[error("non-finite value produced by layer {layer} ({kind})")]
    Numeric { layer: usize, kind: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by numerics or training dynamics rather than
    /// by the caller's configuration or files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::DegenerateGradient(_) | Error::TrainingDiverged { .. }
        )
    }

    /// True for errors caused by invalid configuration or arguments.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Budget(_) | Error::Capability(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
