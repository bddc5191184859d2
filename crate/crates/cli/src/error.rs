use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ctxnorm::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed binary input; `offset` is the byte position of the problem
    /// in the (decompressed) stream.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0} method(s) failed: {1}")]
    MethodsFailed(usize, String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
