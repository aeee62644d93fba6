//! Pipeline commands behind the `segctl` binary.

use std::path::PathBuf;

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod evaluate;
pub mod pipeline;

pub use commands::{cmd_evaluate, cmd_phantoms, cmd_segment, cmd_train, cmd_uncertainty};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] brainseg::trainer::TrainError),
    #[error(transparent)]
    Mc(#[from] brainseg::mc::McError),
    #[error(transparent)]
    Registration(#[from] brainseg::registration::RegistrationError),
    #[error(transparent)]
    Geometry(#[from] brainseg::affine::GeometryError),
    #[error(transparent)]
    Format(#[from] brainseg::mvox::FormatError),
    #[error(transparent)]
    Checkpoint(#[from] brainseg::checkpoint::CheckpointError),
    #[error(transparent)]
    Manifest(#[from] brainseg::manifest::ManifestError),
    #[error(transparent)]
    Phantom(#[from] brainseg::phantom::PhantomError),
    #[error(transparent)]
    Metric(#[from] brainseg::metrics::MetricError),
}

/// Quality-control result of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Warn,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::Warn => 2,
        }
    }
}

/// Exit code for errors.
pub const EXIT_ERROR: i32 = 1;
