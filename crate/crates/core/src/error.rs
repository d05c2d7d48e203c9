use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs disagree with the session geometry or violate a configuration invariant.
    #[error("configuration error: {0}")]
    Config(String),
    /// A quantity left its mathematical domain (e.g. log of zero expected counts).
    #[error("domain error: {0}")]
    Domain(String),
    /// An iterative solver or trainer produced non-finite values.
    #[error("diverged: {0}")]
    Diverged(String),
    /// A file did not match its binary layout.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
