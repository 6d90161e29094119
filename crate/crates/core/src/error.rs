use std::path::PathBuf;

use thiserror::Error;

use crate::tape::PrimitiveKind;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive received operands whose shapes it cannot combine.
    #[error("{primitive}: incompatible shapes {shapes:?} ({detail})")]
    Shape {
        primitive: PrimitiveKind,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("histogram is not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("negative histogram entry {value} at index {index}")]
    NegativeMass { index: usize, value: f64 },

    #[error("total mass differs by {0:e}, transport is infeasible")]
    MassMismatch(f64),

    #[error("{path}: {message} at byte offset {offset}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
