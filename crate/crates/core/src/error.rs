use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid probability: {0}")]
    InvalidProbability(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("KL divergence undefined: prior has zero mass at layer {layer} where posterior is {posterior}")]
    KlUndefined { layer: usize, posterior: f64 },

    #[error("non-finite value in {term} at layer {layer}")]
    NonFinite { term: &'static str, layer: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("malformed record at {path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("policy parse error: {0}")]
    Policy(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Short stable identifier used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidProbability(_) => "invalid_probability",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::KlUndefined { .. } => "kl_undefined",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::MissingGradient(_) => "missing_gradient",
            Error::Malformed { .. } => "malformed_record",
            Error::Policy(_) => "policy",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
