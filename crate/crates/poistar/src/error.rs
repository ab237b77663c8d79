//! Crate-wide error type.
//!
//! Validation failures carry enough context (indices, names, row numbers)
//! for a caller to locate the offending input without re-parsing anything.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Graph construction rejected an edge or node specification.
    #[error("invalid graph: {0}")]
    Graph(String),

    /// A vector or matrix had the wrong length for the operation.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A numeric argument left the domain where the operation is defined
    /// (e.g. a CAR mixing parameter outside [0, 1), a non-positive scale).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Input data failed validation (missing cells, inconsistent
    /// populations, malformed fields). Messages include row numbers where
    /// applicable.
    #[error("invalid input: {0}")]
    Validation(String),

    /// Configuration file or flag error.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The sampler could not find a finite starting point.
    #[error("initialization failed: {0}")]
    Init(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Attach a path to a raw `io::Error`.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a path to a `csv::Error`.
    pub fn csv(path: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
