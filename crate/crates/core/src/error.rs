use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum AggError {
    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error("group must contain at least 2 responses, got {0}")]
    GroupTooSmall(usize),

    #[error("degenerate group: all rewards equal with eps_var = 0 (sigma = 0)")]
    DegenerateGroup,

    #[error("non-finite reward {value} at response {index}")]
    NonFiniteReward { index: usize, value: f64 },

    #[error("eps_var must be finite and non-negative, got {0}")]
    InvalidEpsVar(f64),

    #[error("k = {k} out of range for group size {g} (need 1 <= k <= G-1)")]
    KOutOfRange { g: usize, k: usize },

    #[error("invalid clip config: {0}")]
    InvalidClip(String),

    #[error("ratio must be strictly positive and finite, got {0}")]
    NonPositiveRatio(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("group is length-only (no per-token ratios); objective evaluation unavailable")]
    LengthOnly,

    #[error("rule {rule} decomposition requires binary rewards with eps_var = 0: {reason}")]
    NotBinary { rule: &'static str, reason: String },

    #[error("degenerate sign subset: {0}")]
    DegenerateSubset(String),

    #[error("ratios within {margin} of a clip boundary at tokens {tokens:?}")]
    BoundaryProximity {
        margin: f64,
        tokens: Vec<(usize, usize)>,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient in group {group} (prompt {prompt})")]
    NonFiniteGradient { group: usize, prompt: usize },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("line {line}: response {response}: {reason}")]
    Validation {
        line: usize,
        response: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AggError>;

impl AggError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AggError::Io {
            path: path.into(),
            source,
        }
    }
}
