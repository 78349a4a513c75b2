//! Command-line front end for the `timebin` simulator.

pub mod commands;
pub mod config;

use thiserror::Error;
use timebin_core::coincidence::CoincidenceError;
use timebin_core::experiment::ExperimentError;
use timebin_core::witness::WitnessError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("undefined estimate: {0}")]
    Undefined(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_UNDEFINED: i32 = 3;

fn witness_code(e: &WitnessError) -> i32 {
    match e {
        WitnessError::Undefined(_) => EXIT_UNDEFINED,
        WitnessError::Invalid(_) => EXIT_VALIDATION,
    }
}

fn coincidence_code(e: &CoincidenceError) -> i32 {
    match e {
        CoincidenceError::Undefined(_) => EXIT_UNDEFINED,
        CoincidenceError::Csv(c) if c.is_io_error() => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

/// Process exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Validation(_) => EXIT_VALIDATION,
                CliError::Io(_) => EXIT_IO,
                CliError::Undefined(_) => EXIT_UNDEFINED,
            };
        }
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return match e {
                ExperimentError::Witness(w) => witness_code(w),
                ExperimentError::Coincidence(c) => coincidence_code(c),
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<WitnessError>() {
            return witness_code(e);
        }
        if let Some(e) = cause.downcast_ref::<CoincidenceError>() {
            return coincidence_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}
