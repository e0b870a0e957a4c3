use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("degenerate embedding in {op}: vector norm below 1e-12")]
    DegenerateNorm { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DdnError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DdnError {
    DdnError::InvalidArgument(msg.into())
}
