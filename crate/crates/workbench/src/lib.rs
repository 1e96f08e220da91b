//! Orchestration for stratify: run configuration, the pipeline runner, a
//! content-addressed report store, curation re-runs, report rendering and
//! the JSON HTTP API.

pub mod api;
pub mod bundle;
pub mod config;
pub mod curate;
pub mod pipeline;
pub mod report;
pub mod store;

use thiserror::Error;

pub use bundle::{ExperimentBundle, ReportBundle};
pub use config::RunConfig;
pub use curate::{apply_curation_and_rerun, CurationRequest};
pub use pipeline::{run_pipeline, RunOptions};
pub use report::{render_report, ReportFormat};
pub use store::{Manifest, RunStatus, Store};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid curation: {0}")]
    InvalidAction(String),
    #[error("screening rules changed: run recorded {recorded}, request has {current}")]
    RulesConflict { recorded: String, current: String },
    #[error("lineage cycle at run '{0}'")]
    LineageCycle(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ehr(#[from] stratify_core::ehr::EhrError),
    #[error(transparent)]
    Featurize(#[from] stratify_core::featurize::FeaturizeError),
    #[error(transparent)]
    Cluster(#[from] stratify_core::cluster::ClusterError),
    #[error(transparent)]
    Meta(#[from] stratify_core::metacluster::MetaError),
    #[error(transparent)]
    Survival(#[from] stratify_core::survival::SurvivalError),
    #[error(transparent)]
    Enrichment(#[from] stratify_core::enrichment::EnrichmentError),
    #[error(transparent)]
    Surrogate(#[from] stratify_core::surrogate::SurrogateError),
    #[error(transparent)]
    Screening(#[from] stratify_core::screening::ScreeningError),
    #[error(transparent)]
    Curation(#[from] stratify_core::curation::CurationError),
    #[error(transparent)]
    Synth(#[from] stratify_core::synthgen::SynthError),
}

impl From<serde_json::Error> for WorkbenchError {
    fn from(e: serde_json::Error) -> Self {
        WorkbenchError::Format(e.to_string())
    }
}

pub type Result<T, E = WorkbenchError> = std::result::Result<T, E>;
