//! Config-driven experiments on top of `stbp`: phantoms, simulated data,
//! MAP and MCMC runs, and their `.stba` / `.pgm` / `.csv` output.

pub mod config;
pub mod io;
pub mod pgm;
pub mod phantom;
pub mod runner;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] stbp::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}
