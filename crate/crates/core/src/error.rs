use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("position {position:?} lies outside the workspace")]
    OutOfBounds { position: [f64; 3] },

    #[error("incompatible format: found version {found}, expected {expected}")]
    Incompatible { found: u32, expected: u32 },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("non-finite loss in the {head} head")]
    NonFiniteLoss { head: &'static str },

    #[error("configuration errors: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
