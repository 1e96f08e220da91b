//! Declarative curation: cohort, feature and cluster actions, the feature
//! rule language, the hash-chained action log, and re-run scoping.

mod actions;
mod log;
mod rule;

use thiserror::Error;

use crate::cluster::ClusterError;
use crate::featurize::FeaturizeError;

pub use actions::{
    apply_cluster_curation, apply_cohort_curation, apply_feature_curation, parse_actions_toml, plan_rerun, ActionKind,
    CohortCuration, CurationAction, Removal, RerunScope,
};
pub use log::{CurationLog, LogEntry, GENESIS};
pub use rule::{
    eval_rule, leaf_columns, parse_expr, parse_rule, rule_column, slug, Expr, FeatureRule, ParseError, Pattern,
};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("rule syntax error at {0}")]
    Parse(#[from] ParseError),
    #[error("action '{0}' has no justification")]
    MissingJustification(String),
    #[error("invalid action: {0}")]
    Invalid(String),
    #[error("feature '{0}' is not in the matrix")]
    AbsentFeature(String),
    #[error("feature '{0}' already exists")]
    DuplicateFeature(String),
    #[error("experiment '{experiment_id}' has no cluster {cluster}")]
    UnknownCluster { experiment_id: String, cluster: u32 },
    #[error("nothing to compare: curation leaves fewer than two clusters")]
    NothingToCompare,
    #[error("empty cohort: predicate '{0}' excludes every patient")]
    EmptyCohort(String),
    #[error("duplicate rule name '{0}'")]
    DuplicateRule(String),
    #[error("curation log broken at entry {seq}: {reason}")]
    BrokenChain { seq: u64, reason: String },
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(serde::Deserialize)]
struct RuleFile {
    #[serde(default)]
    rule: Vec<FeatureRule>,
}

/// Reads `[[rule]]` tables with `name` and `expression`; names must be unique.
pub fn parse_rules_toml(text: &str) -> Result<Vec<FeatureRule>, CurationError> {
    let f: RuleFile = toml::from_str(text).map_err(|e| CurationError::Format(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for r in &f.rule {
        if !seen.insert(r.feature_id()) {
            return Err(CurationError::DuplicateRule(r.name.clone()));
        }
    }
    Ok(f.rule)
}

/// Shipped definitions of the novel features used in the stroke analysis.
pub const NOVEL_FEATURES: &str = include_str!("../../fixtures/novel_features.toml");
