//! Subcommands of the `pods` binary.

mod args;
mod commands;
pub mod pipeline;

pub use args::{Cli, Command, Common};
pub use commands::{apply_flags, resolve_config, run, toy_config};

/// Failure of a subcommand. Validation errors exit with 1, runtime
/// failures with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<pods::Error> for CliError {
    fn from(e: pods::Error) -> Self {
        use pods::Error as E;
        match e {
            E::Invalid(_) | E::Parse { .. } | E::Empty(_) | E::OutOfRange { .. } | E::Json(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
