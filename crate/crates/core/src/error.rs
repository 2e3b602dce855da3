use thiserror::Error;

/// Errors raised anywhere in the fit-and-match pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point maps to infinity (|w| = {0:e})")]
    PointAtInfinity(f64),

    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPairs { needed: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error("label {0} is not in the model list")]
    UnknownLabel(usize),

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("{0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
