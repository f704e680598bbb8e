use thiserror::Error;

/// Errors raised by the numerical core and the cache/memory engines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty support")]
    EmptySupport,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask supports differ at index {0}")]
    MaskMismatch(usize),

    #[error("sink eviction forbidden (position {0})")]
    SinkEviction(usize),

    #[error("local window row {0} must be retained")]
    WindowEviction(usize),

    #[error("non-monotone positions: {next} does not follow {last}")]
    NonMonotone { last: usize, next: usize },

    #[error("missing indexer key for position {0}")]
    MissingKey(usize),

    #[error("non-finite loss at step {0}")]
    Divergence(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
