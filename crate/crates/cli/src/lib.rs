//! Command-line pipeline around the `msreg` registration engine: tensor
//! files, run configuration and the per-mode drivers.

pub mod config;
pub mod io;
mod run;

pub use config::{Cli, Mode, Precision, Profile, RunConfig};
pub use run::{run, RunSummary, MANIFEST_FILE};

use msreg::RegError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(#[source] RegError),
    #[error("{0}")]
    Optim(#[source] RegError),
    #[error("{0}")]
    Engine(#[source] RegError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<RegError> for CliError {
    fn from(e: RegError) -> Self {
        if e.is_parse_error() {
            CliError::Parse(e)
        } else if e.is_optim_abort() {
            CliError::Optim(e)
        } else if let RegError::Io(io) = e {
            CliError::Io(io)
        } else {
            CliError::Engine(e)
        }
    }
}

impl CliError {
    /// 2 configuration, 3 parse, 4 optimisation abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Parse(_) => 3,
            CliError::Optim(_) => 4,
            _ => 1,
        }
    }
}
