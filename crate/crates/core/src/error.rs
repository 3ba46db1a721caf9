use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments violating its preconditions
    /// (shape mismatch, out-of-range index, bad probability, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward or backward pass produced NaN or infinity.
    #[error("numeric fault in `{op}`: non-finite value")]
    Numeric { op: String },

    /// Input too small or empty for the requested operation.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed binary file or wire record.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Every problem found while validating an experiment config.
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
