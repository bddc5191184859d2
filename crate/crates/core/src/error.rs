use thiserror::Error;

/// Errors raised by the normalization kernels and their supporting utilities.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty selection: mask selects no samples")]
    EmptySelection,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("uninitialized state: {0}")]
    Uninitialized(String),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("empty component {0}: all responsibilities are zero")]
    EmptyComponent(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
