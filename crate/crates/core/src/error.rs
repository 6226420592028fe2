use std::io;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed argument: wrong shape, non-finite value, bad range.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Inconsistent configuration (layer placement, resolutions, head shapes).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// A binary or text file did not match its format.
    #[error("malformed file: {0}")]
    Format(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

pub(crate) fn bad_config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidConfig(msg.into()))
}
