//! File formats, benchmarks and subcommands behind the `bda` binary.

use std::path::Path;

use thiserror::Error;

pub mod bench;
pub mod commands;
pub mod format;
pub mod manifest;

pub use commands::{run, Cli};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("role error: {0}")]
    Role(String),
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Core(#[from] bda_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Every error is a usage, input or I/O problem; failed checks are not errors.
    pub fn exit_code(&self) -> i32 {
        EXIT_USAGE
    }
}
