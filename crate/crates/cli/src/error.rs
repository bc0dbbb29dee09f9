use std::path::PathBuf;

use thiserror::Error;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for bad arguments or configuration.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for failures while running a valid command.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("i/o failure on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    Core(#[from] mganet_core::Error),
    #[error(transparent)]
    Model(#[from] mganet_model::ModelError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mganet_core::Error as E;
        use mganet_model::ModelError as M;
        match self {
            CliError::UnknownCommand(_) | CliError::Usage(_) | CliError::ConfigInvalid(_) => EXIT_INVALID,
            CliError::Core(E::InvalidConfig(_)) | CliError::Model(M::InvalidConfig(_)) => EXIT_INVALID,
            CliError::Model(M::Core(E::InvalidConfig(_))) => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        }
    }
}
