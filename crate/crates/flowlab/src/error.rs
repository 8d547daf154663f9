//! Error taxonomy shared by every module.
//!
//! The CLI maps these onto process exit codes: config errors exit 2,
//! numeric/divergence errors exit 3, invariant violations exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: mismatched dimensions, invalid parameters,
    /// malformed config files, unknown keys.
    #[error("config error: {0}")]
    Config(String),

    /// Shape mismatch between tensors or between a tensor and a network.
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: String,
        got: String,
        context: String,
    },

    /// An operation was called before its prerequisite (e.g. backward
    /// without a recorded forward).
    #[error("state error: {0}")]
    State(String),

    /// Non-finite values, singularities, or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The requested operation is not defined for this variant
    /// (e.g. log-density of a point mass).
    #[error("unsupported: {0}")]
    Capability(String),

    /// Training loss blew up past the divergence threshold.
    #[error("training diverged at step {step}: loss {loss:.3e} vs initial {initial:.3e}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    /// A hard contract was broken (e.g. frozen base weights mutated).
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>, context: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
            context: context.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Exit code this error maps to in the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::Capability(_) => 2,
            Error::Numeric(_) | Error::Divergence { .. } => 3,
            Error::Invariant(_) => 4,
            Error::State(_) | Error::Io(_) | Error::Json(_) => 1,
        }
    }
}
