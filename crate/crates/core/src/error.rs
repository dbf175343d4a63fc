use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TmowError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TmowError {
    /// Operand shapes do not line up.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar hyperparameter is outside its admissible range.
    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Input values are malformed (non-finite, out of vocabulary, empty).
    #[error("invalid input: {0}")]
    Input(String),

    /// A norm, row sum or similar quantity vanished where it must be positive.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A caller broke an API contract (non-scalar loss, negative weight, count mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    Truncation { len: usize, max: usize },

    #[error("missing artifact(s): {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifact(Vec<PathBuf>),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TmowError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TmowError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn param(name: &'static str, reason: impl Into<String>) -> Self {
        TmowError::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
