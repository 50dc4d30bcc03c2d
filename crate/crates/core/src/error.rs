use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, finiteness).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The input is well-formed but leaves nothing to compute on.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("report parse error in section `{section}`: {reason}")]
    ReportParse { section: &'static str, reason: String },

    #[error("disease `{0}` is not in the lexicon")]
    LexiconMiss(String),

    #[error("tokenized report has {len} tokens, limit is {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("corrupt checkpoint {path} at byte offset {offset}: {reason}")]
    Checkpoint {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: usize, breakdown: String },

    #[error("llm endpoint: {0}")]
    Llm(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 3 for numerical failure, 2 for everything the
    /// caller can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
