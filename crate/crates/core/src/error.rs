//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad run configuration: unknown keys, unknown subjects, class-count mismatches.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data: CSV schema violations, unparseable cells.
    #[error("data error: {0}")]
    Data(String),

    /// An operation was called with arguments outside its contract.
    #[error("argument error: {0}")]
    Argument(String),

    /// The experimental protocol cannot be carried out on this data.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite values encountered in losses or gradients.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Corrupt or incompatible checkpoint / report files.
    #[error("format error: {0}")]
    Format(String),

    /// A loss component was requested over an empty cell set.
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 0 success, 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Data(_) | Error::Protocol(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::UndefinedLoss(_) => 4,
        }
    }

    /// Prefixes the message with caller context (io errors pass through
    /// untouched since they carry their own source).
    pub fn with_context(self, ctx: &str) -> Error {
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Argument(m) => Error::Argument(format!("{ctx}: {m}")),
            Error::Protocol(m) => Error::Protocol(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            Error::UndefinedLoss(m) => Error::UndefinedLoss(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
