use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has (near) zero norm")]
    ZeroVector,

    #[error("illuminant component {component} is {value}, below the 1e-6 floor")]
    DegenerateIlluminant { component: usize, value: f64 },

    #[error("value {0} lies outside the curve domain [0, 1]")]
    Domain(f64),

    #[error("all image statistics are zero")]
    BlackImage,

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("loss is not reachable from any recorded node")]
    UnreachableLoss,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("embedding {index} has norm {norm}, expected unit norm")]
    NormViolation { index: usize, norm: f64 },

    #[error("input is empty")]
    EmptyInput,

    #[error("division by (near) zero: {0}")]
    DivisionByZero(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {kind} data: {message}")]
    Format { kind: &'static str, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: message.into(),
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
