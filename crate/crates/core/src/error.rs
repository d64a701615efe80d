use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a precondition (shape mismatch, out-of-range value, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input was structurally valid but numerically degenerate (e.g. zero norm).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Internal state reached a configuration no operation can act on.
    #[error("degenerate state: {0}")]
    DegenerateState(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// Every ROI was ignored by thresholding; the adaptation loop cannot proceed.
    #[error("meta-iteration {meta_iter}: all ROIs ignored by pseudo-label thresholds")]
    AllRoisIgnored { meta_iter: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A data file did not match the expected schema.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
