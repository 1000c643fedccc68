use thiserror::Error;

/// Errors raised across the crate. Variants map onto the operator-facing
/// exit-code classes used by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("lexical error at byte {offset}: {msg}")]
    Lexical { offset: usize, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("integrity error at offset {offset}: {msg}")]
    Integrity { offset: u64, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
