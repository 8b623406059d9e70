use std::fmt;

/// Error categories shared by every module. The CLI maps them onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, hyperparameters or flags that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or out-of-range input data.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Error::Data(msg.to_string())
    }

    pub fn numeric(msg: impl fmt::Display) -> Self {
        Error::Numeric(msg.to_string())
    }

    /// Prefix the message with `ctx`, keeping the category.
    pub fn context(self, ctx: impl fmt::Display) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{ctx}: {e}"))),
        }
    }

    /// True for errors caused by the caller's configuration rather than the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
