use std::io;

use nfcs_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("expected {expected} tokens, got {got}")]
    TokenLength { expected: usize, got: usize },

    #[error("token {token} at position {position} is outside its vocabulary of size {vocab}")]
    TokenOutOfVocab {
        position: usize,
        token: usize,
        vocab: usize,
    },

    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("missing cache: {0} (run `nfcs prepare` with the same plan first)")]
    MissingCache(String),

    #[error("numeric divergence: {0}")]
    Diverged(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    /// Process exit code for the CLI, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::TokenLength { .. } | Error::TokenOutOfVocab { .. } | Error::InvalidConfig(_) => 3,
            Error::Plan(_) | Error::Toml(_) => 4,
            Error::MissingCache(_) => 5,
            Error::Diverged(_) => 6,
            Error::Protocol(_) => 7,
            Error::Checkpoint(_) => 8,
            Error::Tensor(_) => 9,
            Error::Io(_) | Error::Json(_) => 10,
        }
    }
}
