use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory does not reconstruct: {0}")]
    ContextMismatch(String),

    #[error("banned set covers the entire vocabulary")]
    AllTokensBanned,

    #[error("non-finite {what} at trajectory {trajectory}, token {token}")]
    NonFinite {
        what: &'static str,
        trajectory: usize,
        token: usize,
    },

    #[error("non-finite {0}")]
    NonFiniteValue(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: key `{key}`: {reason}")]
    Config {
        line: usize,
        key: String,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteValue(_))
    }
}
