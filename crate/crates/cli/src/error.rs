use std::path::PathBuf;

use fusex_core::FuseError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Carries the JSON report so it can still be printed.
    #[error("gradient check failed for: {}", .failed.join(", "))]
    GradcheckFailed { failed: Vec<String>, report: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] FuseError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::GradcheckFailed { .. } => EXIT_NUMERIC,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                FuseError::Config(_) | FuseError::Usage(_) => EXIT_CONFIG,
                FuseError::Io { .. } | FuseError::Format { .. } | FuseError::Version { .. } => EXIT_IO,
                _ => EXIT_NUMERIC,
            },
        }
    }
}
