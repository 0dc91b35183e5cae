use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("cannot downsample a {bits}-bit tensor")]
    CannotDownsample { bits: u32 },

    #[error("inconsistent bit planes: {0}")]
    Consistency(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("missing enhance layers: {levels:?}")]
    MissingLayers { levels: Vec<usize> },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("training diverged at level {level} (epoch {epoch})")]
    Divergence { level: usize, epoch: usize },

    #[error("degenerate initialization: {0}")]
    DegenerateInit(String),

    #[error("budget of {budget} bits is infeasible; at least {min_bits} bits are required")]
    Infeasible { budget: u64, min_bits: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptData(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
