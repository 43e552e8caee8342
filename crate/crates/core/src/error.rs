use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum SikaError {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An input value lies outside the unit interval the basis is defined on.
    #[error("domain error: {what} = {value} is outside [0, 1]")]
    Domain { what: &'static str, value: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// An operation was called without the state it depends on.
    #[error("state error: {0}")]
    State(String),

    /// Training produced a non-finite objective.
    #[error("training diverged at epoch {epoch}, step {step}: {term} is {value}")]
    Diverged {
        epoch: usize,
        step: usize,
        term: &'static str,
        value: f64,
    },

    /// Malformed tabular input. `row` is the 1-based data row (header excluded).
    #[error("parse error at row {row} (line {line}), column '{column}': {message}")]
    Parse {
        row: usize,
        line: u64,
        column: String,
        message: String,
    },

    /// A persisted model document could not be accepted.
    #[error("model format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SikaError>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SikaError::Parameter(msg.into()))
}
