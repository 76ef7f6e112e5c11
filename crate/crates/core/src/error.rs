//! Crate-wide error type.
//!
//! Shape and contract violations inside the tensor graph panic with a
//! descriptive message (they are programming errors); everything that can be
//! caused by bad files, bad configs, or bad data surfaces as a [`Error`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Config file problems: unknown keys, malformed values, out-of-range values.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or episode integrity problems (teacher action missing, empty
    /// split, mismatched trajectory files, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Graph-structure problems in a house (missing vertex or edge).
    #[error("graph error: {0}")]
    Graph(String),

    /// Checkpoint file problems: bad magic, version, truncation, shape mismatch.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// A NaN or infinity escaped into a loss or metric.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Graph(_) | Error::Format(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}
