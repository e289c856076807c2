//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("unplaceable sample spec: {0}")]
    Unplaceable(String),

    #[error("infeasible config: {0}")]
    InfeasibleConfig(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("model not fitted: {0}")]
    NotFitted(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing split '{0}' in corpus")]
    MissingSplit(String),

    #[error("artifact fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("array format: {0}")]
    ArrayFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
