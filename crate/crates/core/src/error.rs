use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt stream at symbol {symbol}, byte {byte}: {reason}")]
    Decode {
        symbol: usize,
        byte: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Self::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Self::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Self::Format(msg.into())
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Dimension(_) | Self::Domain(_) | Self::Config(_) | Self::Contract(_) => 2,
            Self::Format(_) | Self::Decode { .. } | Self::Io(_) => 3,
            Self::Invariant(_) | Self::Numeric(_) => 4,
        }
    }
}
