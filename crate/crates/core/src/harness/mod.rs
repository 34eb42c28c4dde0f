//! Batch runs, persisted artifacts, comparison reports and dataset checks.

mod config;
mod records;
mod report;
mod run;
mod validate;

use std::path::PathBuf;

use thiserror::Error;

use crate::client::ClientError;
use crate::datasets::DatasetError;
use crate::prompts::PromptError;

pub use config::{DatasetSection, RunConfig, UnresolvedAge};
pub use records::{PredictionRow, TranscriptLine};
pub use report::{render_csv, render_markdown, report, ReportFormat};
pub use run::{
    compute_metrics, run, run_with_client, AttributeMetrics, RunArtifacts, RunManifest, RunMetrics, Scores, MANIFEST_FILE,
    METRICS_FILE, PREDICTIONS_FILE, REPORT_FILE, TRANSCRIPTS_FILE,
};
pub use validate::{find_labels, validate, Diagnostics};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("template error: {0}")]
    Template(#[from] PromptError),
    #[error("dataset missing: {0}")]
    DatasetMissing(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("cannot set up model client: {0}")]
    Client(#[from] ClientError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("aborted: {unresolvable} of {total} samples unresolvable; first cause: {cause}")]
    HealthGuard { unresolvable: usize, total: usize, cause: String },
    #[error("runs evaluated different datasets ({0}); pass --force to compare anyway")]
    SchemaMismatch(String),
    #[error("{dir}: not a run directory ({message})")]
    BadArtifacts { dir: PathBuf, message: String },
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 1 for everything
    /// else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigInvalid(_) | HarnessError::Template(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
