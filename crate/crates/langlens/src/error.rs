//! Shared error type for the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, corpus, or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (tokens, documents, neuron ids).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed or inconsistent file contents.
    #[error("format error: {0}")]
    Format(String),

    /// A stratified random sample could not be drawn.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Training diverged or was misconfigured.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    /// A ratio with an empty denominator was requested.
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    /// Operands belong to different models.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
