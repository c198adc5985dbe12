//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("loss is not connected to any gradient-tracked parameter")]
    DetachedGraph,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("sentence has {len} tokens, cap is {max}")]
    OverLength { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptyTokenSequence,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("grafting failed: sentence model hidden size {svae} != backbone hidden size {backbone}")]
    GraftDimensionMismatch { svae: usize, backbone: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code class: 2 for data/config problems, 3 for numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
