use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-norm vector for word {0:?}")]
    ZeroNorm(String),

    #[error("svd did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("invalid bias specification: {0}")]
    InvalidSpec(String),

    #[error("augmentation produced no terms for set {0}")]
    EmptyAugmentation(String),

    #[error("not enough usable terms: {0}")]
    InsufficientTerms(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Empty(_) => "empty",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::ZeroNorm(_) => "zero_norm",
            Error::NoConvergence { .. } => "no_convergence",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::EmptyAugmentation(_) => "empty_augmentation",
            Error::InsufficientTerms(_) => "insufficient_terms",
            Error::Degenerate(_) => "degenerate",
            Error::Diverged { .. } => "diverged",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Serde(_) => "serialization",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
