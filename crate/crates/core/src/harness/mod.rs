//! Configuration, corpus handling, instrumented runs, sweeps and reports.

pub mod config;
pub mod corpus;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{CorpusSpec, ExperimentConfig, InterventionPlan, ScheduleSpec, SyntheticSpec, CONFIG_VERSION};
pub use corpus::{ingest_corpus, synthetic_text, Corpus, TokenMode};
pub use run::{latest_checkpoint, read_jsonl, run, EvalResult, LossRecord, RunOptions, RunOutcome, Trainer};

use thiserror::Error;

use crate::interventions::InterventionError;
use crate::metrics::MetricsError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("training diverged at step {step}")]
    Divergence { step: u64 },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Divergence { step } => Self::Divergence { step },
            ModelError::Config(msg) => Self::Config(msg),
            other => Self::Model(other),
        }
    }
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Corpus(_) => 2,
            Self::Divergence { .. } => 3,
            Self::Report(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
