use thiserror::Error;

/// Errors produced by the back-end.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("landmark is behind the camera")]
    BehindCamera,
    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("cannot initialize landmark: {0}")]
    CannotInitialize(String),
    #[error("trajectory alignment is degenerate: {0}")]
    AlignmentDegenerate(String),
    #[error("factor evaluation failed: {0}")]
    Evaluation(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
