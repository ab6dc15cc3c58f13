use thiserror::Error;

/// Errors raised by the filtering, design, and scenario layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },

    #[error("matrix is singular or not positive definite in {context} (min eigenvalue {min_eig:e})")]
    Singular { context: &'static str, min_eig: f64 },

    #[error("no finite look-ahead bound exists: {0}")]
    NoFiniteBound(String),

    #[error("null space of the {0} measurement columns is empty")]
    EmptyNullspace(&'static str),

    #[error("self-check failed: {0}")]
    CheckFailed(String),

    #[error("estimate coincides with anchor {anchor} (distance {distance:e})")]
    AnchorCollision { anchor: usize, distance: f64 },

    #[error("invalid privacy spec: {0}")]
    InvalidSpec(String),

    #[error("invalid belief stage: expected {expected}")]
    WrongStage { expected: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
