//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by tensor arithmetic, quantization, model execution and
/// the generation loop.
#[derive(Debug, Error)]
pub enum FlexQuantError {
    /// Shapes that must agree do not.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration (unsupported bit-width, plan/model mismatch, ...).
    #[error("configuration error: {0}")]
    Configuration(String),

    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid caller-supplied input (token ids, empty sequences, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Operation not valid in the current state.
    #[error("state error: {0}")]
    State(String),

    /// A fixed-size buffer (the KV cache) is full.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlexQuantError>;
