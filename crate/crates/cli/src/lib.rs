//! Experiment driver: configuration, phase orchestration, map export and
//! run summaries.

pub mod config;
pub mod export;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use pipeline::{run, Phase, PhaseError};

use impactx_core::Error;

/// Process exit code for an error: 1 for configuration and ordering
/// problems, 2 for data and file problems, 3 for numerical failures.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::State(_) | Error::Compatibility(_) | Error::Size(_) => 1,
        Error::Data(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Label { .. }
        | Error::Dimension { .. } => 2,
        Error::Numeric(_) | Error::StaleTape => 3,
    }
}
