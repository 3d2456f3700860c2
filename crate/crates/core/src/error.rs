// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by numerical routines, model code, and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input is numerically degenerate (zero-norm vector, empty set).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or inconsistent data file.
    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    /// Unsupported file format version.
    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    /// Non-finite values or a failed numerical check.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &str, expected: usize, found: usize) -> Error {
    Error::Shape(format!("{what}: expected {expected}, found {found}"))
}

pub(crate) fn check_len(what: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(shape_err(what, expected, v.len()));
    }
    Ok(())
}
