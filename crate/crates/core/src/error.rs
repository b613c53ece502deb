use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors or model components.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Invalid configuration value or unsupported combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Numeric failure: non-finite values, divergence, singular systems.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed file contents (checkpoint, flow file, PNG, CSV).
    #[error("format error: {0}")]
    Format(String),

    /// Missing or unreadable input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
