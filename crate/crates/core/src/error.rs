//! Error type shared by everything that touches user-supplied input
//! (configs, corpora, checkpoints). Shape violations inside the tensor
//! kernel are programmer errors and panic instead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent configuration (bad field value, unknown key).
    #[error("config error: {0}")]
    Config(String),

    /// Structurally invalid input data (graphs, corpora, vocab files).
    #[error("validation error: {0}")]
    Validation(String),

    /// A runtime contract was broken mid-run (NaN loss, checkpoint mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI maps this error to: 1 for usage/config problems,
    /// 2 for runtime contract violations (including bad data).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
