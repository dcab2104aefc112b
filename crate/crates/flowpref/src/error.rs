//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Bad configuration: invalid field values, mismatched dataset/variant,
    /// unknown config keys, malformed config files.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity escaped a numeric operation.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// ODE sampling produced a non-finite intermediate state.
    #[error("sampling failed at step {step}: {msg}")]
    Sampling { step: usize, msg: String },

    /// `backward` was called on a loss with no path to any parameter.
    #[error("loss is not connected to any parameter")]
    EmptyGradient,

    /// Preference-label problems: bad entries, wrong lengths, unknown pair ids.
    #[error("label error: {0}")]
    Label(String),

    /// Checkpoint container problems: bad magic, version, truncation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration errors, 3 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
