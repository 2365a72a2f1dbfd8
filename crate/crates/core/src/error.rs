use std::fmt;

/// Errors returned by every fallible operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    /// Input violates a documented precondition or invariant.
    #[error("{0}")]
    Invalid(String),
    /// A computation produced a non-finite or out-of-domain value.
    #[error("numerical failure: {0}")]
    Numeric(String),
    /// A binary or text file does not follow its expected layout.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl fmt::Display) -> Error {
    Error::Invalid(msg.to_string())
}

pub(crate) fn numeric(msg: impl fmt::Display) -> Error {
    Error::Numeric(msg.to_string())
}
