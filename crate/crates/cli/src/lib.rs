//! Command-line front end: config parsing, experiment runs with CSV/JSON
//! artifacts, closed-form tables and noise-multiplier calibration.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod config;
pub mod run;

use feo2_core::privacy::{epsilon_for, solve_noise_multiplier};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 1 for run failures, 2 for configuration failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

/// Noise multiplier whose accounted ε after `rounds` rounds at sampling
/// rate `q` is within 1e-3 of the target, with the ε it achieves.
pub fn cmd_solve_z(target_epsilon: f64, delta: f64, q: f64, rounds: usize) -> Result<(f64, f64), CliError> {
    if !(target_epsilon > 0.0) {
        return Err(CliError::Config("epsilon: must be > 0".into()));
    }
    let z = solve_noise_multiplier(target_epsilon, delta, q, rounds).map_err(|e| match e {
        feo2_core::Error::Range(_) => CliError::Run(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    let eps = epsilon_for(q, z, rounds, delta).map_err(|e| CliError::Run(e.to_string()))?;
    Ok((z, eps))
}
