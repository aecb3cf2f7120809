use thiserror::Error;

/// Library error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation was called with arguments violating its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite quantity; the run must stop.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Checkpoint or log files could not be read/written or were malformed.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint/config file parsed but had the wrong shape or version.
    #[error("format: {0}")]
    Format(String),
}
