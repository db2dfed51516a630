//! Config-driven front end: `check`, `kernel`, `simulate`, `recover`,
//! `predict` and `selftest`.

use std::fmt;

pub mod commands;
pub mod config;
pub mod selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_HYPOTHESIS: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable, malformed or inconsistent configuration.
    Config(String),
    /// Input or output file problems.
    Io(String),
    /// Error raised by the numerical library.
    Model(carma_sdde::Error),
    /// One or more self-test criteria failed.
    SelfTest(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use carma_sdde::Error as E;
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Model(E::Hypothesis { .. }) => EXIT_HYPOTHESIS,
            CliError::Model(E::Numerical { .. }) | CliError::SelfTest(_) => EXIT_NUMERICAL,
            CliError::Model(_) => EXIT_CONFIG,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Model(e) => write!(f, "{e}"),
            CliError::SelfTest(m) => write!(f, "self-test failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<carma_sdde::Error> for CliError {
    fn from(e: carma_sdde::Error) -> Self {
        CliError::Model(e)
    }
}
