use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent configuration: shapes, architecture, missing stain.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller supplied data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),
    /// API misuse, e.g. calling `backward` on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A manifest row could not be loaded.
    #[error("load error at row {row}: {message}")]
    Load { row: usize, message: String },
    /// A binary or text file did not match its expected layout.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
