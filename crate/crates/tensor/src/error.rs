use std::io;

/// Errors raised by tensor construction, graph operations, and checkpoint IO.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(
    op: &'static str,
    expected: impl std::fmt::Debug,
    got: impl std::fmt::Debug,
) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    })
}

pub(crate) fn invalid<T>(op: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    })
}
