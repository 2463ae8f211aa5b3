use std::path::PathBuf;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("failed to decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss; the offending batch was dumped to `dump`.
    #[error("non-finite loss at step {step} (batch dumped to {dump})")]
    NonFinite { step: usize, dump: PathBuf },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad arguments rather than the environment.
    pub fn is_contract(&self) -> bool {
        matches!(self, Error::Contract(_) | Error::DimensionMismatch(_))
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
