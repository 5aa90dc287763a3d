//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/graph shape inconsistency; the message names the offending node.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A graph leaf was evaluated without a bound value.
    #[error("unbound leaf '{0}'")]
    UnboundLeaf(String),

    /// Gradient was requested of a non-scalar node.
    #[error("loss node {0} is not scalar-shaped")]
    NonScalarLoss(String),

    /// NaN/Inf encountered where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A file had the wrong magic, version, or internal structure.
    #[error("format error: {0}")]
    Format(String),

    /// A required upstream artifact (checkpoint, dataset) is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Numerical failure (divergence, step-budget exhaustion).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for CLI commands: 2 bad input, 3 missing
    /// dependency artifact, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 3,
            Error::NonFinite(_) | Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}
