//! Train, calibrate, evaluate and sweep lightweight forward-only networks.

pub mod commands;
pub mod config;

use std::fmt;

pub use commands::{
    cmd_calibrate, cmd_eval, cmd_sweep, cmd_train, train_model, CalibrateArgs, EvalArgs, SweepArgs, SweepRow,
};
pub use config::{AlgorithmChoice, DatasetSpec, ExperimentConfig, HeadConfig, Preset, Splits};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<lightff::Error> for CliError {
    fn from(e: lightff::Error) -> Self {
        use lightff::Error::*;
        let code = match &e {
            Config(_) | UnsupportedDepth(_) | ModeMismatch(_) | MissingHeads(_) | MissingGates(_) => EXIT_CONFIG,
            Load { .. } | Parse { .. } | Dataset(_) | Shape { .. } | Model(_) | Io(_) | Json(_) => EXIT_DATA,
            TrainingDiverged { .. } => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}
