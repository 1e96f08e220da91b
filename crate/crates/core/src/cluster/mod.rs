//! Per-experiment cluster assignments: a baseline k-means, import of
//! externally produced labels, partition agreement, and bootstrapped
//! selection of the cluster count.

mod agreement;
mod assignment;
mod bootstrap;
mod kmeans;

use thiserror::Error;

pub use agreement::{adjusted_rand_index, jaccard_agreement, jaccard_from_labels};
pub use assignment::{read_assignment_csv, write_assignment_csv, ClusterAssignment, ClusterLabel, Provenance};
pub use bootstrap::{bootstrap_select_k, BootstrapOptions, KSelectionReport};
pub use kmeans::{kmeans, kmeans_cluster, KMeansFit, KMeansOptions};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of rows ({rows})")]
    TooManyClusters { k: usize, rows: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("matrix has no rows or no columns")]
    EmptyMatrix,
    #[error("matrix has missing cells; clustering needs a complete matrix")]
    MissingValues,
    #[error("assignments cover different patients: {0}")]
    PatientMismatch(String),
    #[error("patients missing from assignment file: {}", .0.join(", "))]
    MissingPatients(Vec<String>),
    #[error("non-contiguous labels {found:?}; relabel with compaction (--compact) to get 1..{expected}")]
    NonContiguous { found: Vec<u32>, expected: usize },
    #[error("invalid label '{value}' at line {line}")]
    InvalidLabel { value: String, line: usize },
    #[error("duplicate patient '{0}'")]
    DuplicatePatient(String),
    #[error("assignment has no clustered patients")]
    NoClusters,
    #[error("invalid bootstrap settings: {0}")]
    InvalidOptions(String),
    #[error("assignment file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
