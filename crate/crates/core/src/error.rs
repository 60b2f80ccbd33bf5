//! Crate-wide error type.

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// Bad user-supplied input (empty prompt, short corpus, ...).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unreadable token/corpus/checkpoint data.
    #[error("data error: {0}")]
    Data(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for command-line front ends.
    ///
    /// 3 config, 4 data/input, 5 numeric abort, 1 anything else. Code 2 is
    /// left for usage errors reported by the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Data(_) | Error::Input(_) => 4,
            Error::Numeric(_) => 5,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}
