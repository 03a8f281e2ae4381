use std::io;
use std::path::PathBuf;

use cyclevae_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected} ({expected:#010x})")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("format error: {0}")]
    Format(String),
    #[error("inconsistent data: {0}")]
    Consistency(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

/// Lets model code run inside closures that must return tensor errors, such
/// as gradient-check callbacks.
impl From<Error> for TensorError {
    fn from(e: Error) -> Self {
        match e {
            Error::Tensor(t) => t,
            other => TensorError::Usage(other.to_string()),
        }
    }
}
