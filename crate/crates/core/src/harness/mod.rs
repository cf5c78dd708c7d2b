//! Datasets, configuration, full runs and reports.

pub mod config;
pub mod dataset;
pub mod fixture;
pub mod record;
pub mod report;
pub mod run;

use thiserror::Error;

pub use config::RunConfig;
pub use dataset::{ingest_dataset, DatasetError, DatasetRecord, Task};
pub use record::RunRecord;
pub use report::{calibrate, report};
pub use run::{label_dataset, run, Backends, RunSummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend bootstrap failed: {0}")]
    Bootstrap(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("run directory has no records")]
    EmptyRun,
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("{0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Bootstrap(_) => 3,
            HarnessError::Dataset(_) | HarnessError::EmptyRun | HarnessError::Calibration(_) => 4,
            HarnessError::Io(_) => 1,
        }
    }
}
