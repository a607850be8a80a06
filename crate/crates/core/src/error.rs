use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("schedule exhausted: step {step} >= total {total}")]
    ScheduleExhausted { step: usize, total: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown client {0}")]
    UnknownClient(usize),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
