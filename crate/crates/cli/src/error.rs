use std::path::Path;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("numeric divergence: non-finite weight after gradient step {step}")]
    NonFinite { step: u64 },

    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Io(_) => EXIT_IO,
            Self::NonFinite { .. } => EXIT_NON_FINITE,
            Self::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {err}", path.display()))
    }
}

/// Invalid settings map to the config exit code; unreadable or malformed
/// files to the I/O code.
impl From<overcnn::Error> for CliError {
    fn from(err: overcnn::Error) -> Self {
        use overcnn::Error as E;
        match err {
            E::NonFinite { step } => Self::NonFinite { step },
            E::Io(_) | E::Format(_) | E::Json(_) => Self::Io(err.to_string()),
            E::Dimension(_) | E::Topology(_) | E::Domain(_) | E::Overflow(_) | E::EmptyDataset => {
                Self::Config(err.to_string())
            }
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
