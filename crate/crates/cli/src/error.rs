// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] truthx::Error),

    #[error(transparent)]
    Args(#[from] clap::Error),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),

    /// An input recorded in a manifest no longer has the recorded hash.
    #[error("input {0} changed since the manifest was written")]
    StaleInput(String),

    /// A replayed command produced different bytes.
    #[error("replay mismatch: {0}")]
    Replay(String),

    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage or contract, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        use truthx::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Shape(_) | E::Contract(_) | E::Config(_) => 1,
                E::Data { .. } | E::Version { .. } | E::Io(_) => 2,
                E::Degenerate(_) | E::Numerical(_) => 3,
            },
            CliError::Args(e) if !e.use_stderr() => 0,
            CliError::Args(_) | CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Json(_) | CliError::StaleInput(_) => 2,
            CliError::Replay(_) | CliError::Gradcheck(_) => 3,
        }
    }
}
