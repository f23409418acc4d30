use hyperfed_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(what: impl Into<String>) -> Error {
    Error::Dimension(what.into())
}

pub(crate) fn config_err(what: impl Into<String>) -> Error {
    Error::Config(what.into())
}
