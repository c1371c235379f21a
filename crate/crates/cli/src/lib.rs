//! Config-driven batch runs over `qap-core` with CSV and JSON output.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod run;

use thiserror::Error;

pub use config::{RunConfig, Scenario};
pub use report::{emit_report, RunSummary};
pub use run::{run_config, RunOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed JSON or unknown keys.
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),

    #[error("config holds scenario `{found}` but the command is `{expected}`")]
    ScenarioMismatch { expected: String, found: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => run::EXIT_IO,
            _ => run::EXIT_INVALID,
        }
    }
}
