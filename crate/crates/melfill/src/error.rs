//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI reports them: configuration problems,
//! bad input data, tensor shape violations, and numeric failures each map to
//! a distinct process exit code.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or contradictory configuration (unknown keys, bad values).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (files, alignments, manifests).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatch or out-of-range index.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values, divergence, or other numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Shape(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
