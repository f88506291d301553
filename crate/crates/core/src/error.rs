use std::io;

/// Errors raised anywhere in the pipeline.
///
/// The variants are coarse on purpose: the CLI maps each one onto a process
/// exit code, so new failure modes should reuse the closest existing kind.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("file truncated while reading tensor `{tensor}`")]
    Truncated { tensor: String },
    #[error("checksum mismatch for {path}")]
    Checksum { path: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
