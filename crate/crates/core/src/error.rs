use std::path::PathBuf;

/// Errors produced across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument is out of range or malformed.
    #[error("argument error: {0}")]
    Argument(String),

    /// Input data cannot satisfy the requested operation.
    #[error("data error: {0}")]
    Data(String),

    /// Prompt does not fit the window under the `error` strategy.
    #[error("window overflow: need {needed} tokens, window is {window} tokens")]
    Overflow { needed: usize, window: usize },

    /// HTTP failure after retries were exhausted.
    #[error("transport error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transport {
        status: Option<u16>,
        message: String,
    },

    /// The remote service answered with something we could not interpret.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
