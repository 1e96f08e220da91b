//! Windowed aggregation of patient events into feature matrices.

mod aggregate;
mod encode;
mod matrix;
mod quantise;

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ehr::Domain;

pub use aggregate::{aggregate_window, ContinuousSummary, PatientSummary, Window};
pub use encode::{
    build_vocabulary, continuous_matrix, count_encode, encode, fit_lab_schemes, one_hot_encode, quantised_encode,
    summarize_cohort, Encoding, FeaturizeConfig, Vocabulary,
};
pub use matrix::{filter_sparse_patients, FeatureMatrix, SparsityFilter};
pub use quantise::{fit_quantisation, QuantisationScheme};

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("invalid window: start {start} is after end {end}")]
    InvalidWindow { start: NaiveDate, end: NaiveDate },
    #[error("no values to fit for '{0}'")]
    EmptyInput(String),
    #[error("bin count must be at least 1")]
    InvalidBinCount,
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("feature matrix shape mismatch: {0}")]
    Shape(String),
    #[error("unknown feature '{0}'")]
    UnknownFeature(String),
    #[error("unknown patient '{0}'")]
    UnknownPatient(String),
    #[error("matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A code within its domain; the unit of vocabulary membership.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureKey {
    pub domain: Domain,
    pub code: String,
}

impl FeatureKey {
    pub fn new(domain: Domain, code: &str) -> Self {
        Self {
            domain,
            code: code.trim().to_string(),
        }
    }

    /// Column identifier: `<domain prefix>:<code>`, e.g. `px:U21.2`.
    pub fn feature_id(&self) -> String {
        format!("{}:{}", self.domain.prefix(), self.code)
    }

    pub fn parse(feature_id: &str) -> Option<Self> {
        let (prefix, code) = feature_id.split_once(':')?;
        Some(Self::new(Domain::from_prefix(prefix)?, code))
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.domain.prefix(), self.code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Binary,
    Count,
    Continuous,
    Quantised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Presence,
    Count,
    Median,
    Mad,
    Min,
    Max,
    Last,
}

impl Aggregation {
    pub fn of(self, s: &ContinuousSummary) -> f64 {
        match self {
            Aggregation::Presence => 1.0,
            Aggregation::Count => s.count as f64,
            Aggregation::Median => s.median,
            Aggregation::Mad => s.mad,
            Aggregation::Min => s.min,
            Aggregation::Max => s.max,
            Aggregation::Last => s.last,
        }
    }
}

/// Column metadata. Source is either a code (`domain` + `code`) or a derived
/// rule, in which case `rule` holds its expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub feature_id: String,
    pub domain: Option<Domain>,
    pub code: String,
    pub kind: FeatureKind,
    pub aggregation: Aggregation,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
}

impl FeatureDescriptor {
    pub fn binary(key: &FeatureKey) -> Self {
        let display_name = if key.domain.carries_values() {
            format!("{} (p/a)", key.code)
        } else {
            key.code.clone()
        };
        Self {
            feature_id: key.feature_id(),
            domain: Some(key.domain),
            code: key.code.clone(),
            kind: FeatureKind::Binary,
            aggregation: Aggregation::Presence,
            display_name,
            bin: None,
            rule: None,
        }
    }

    pub fn count(key: &FeatureKey) -> Self {
        Self {
            feature_id: format!("{}#count", key.feature_id()),
            kind: FeatureKind::Count,
            aggregation: Aggregation::Count,
            display_name: format!("{} (count)", key.code),
            ..Self::binary(key)
        }
    }

    pub fn continuous(key: &FeatureKey, aggregation: Aggregation) -> Self {
        let tag = format!("{aggregation:?}").to_lowercase();
        Self {
            feature_id: format!("{}#{tag}", key.feature_id()),
            kind: FeatureKind::Continuous,
            aggregation,
            display_name: format!("{} ({tag})", key.code),
            ..Self::binary(key)
        }
    }

    pub fn quantised(key: &FeatureKey, bin: usize, lo: f64, hi: f64) -> Self {
        Self {
            feature_id: format!("{}#q{}", key.feature_id(), bin + 1),
            kind: FeatureKind::Quantised,
            aggregation: Aggregation::Median,
            display_name: format!("{} bin {} [{lo:.4}, {hi:.4}]", key.code, bin + 1),
            bin: Some(bin),
            ..Self::binary(key)
        }
    }

    /// Binary column defined by a rule over other columns.
    pub fn derived(feature_id: &str, display_name: &str, rule: &str) -> Self {
        Self {
            feature_id: feature_id.to_string(),
            domain: None,
            code: display_name.to_string(),
            kind: FeatureKind::Binary,
            aggregation: Aggregation::Presence,
            display_name: display_name.to_string(),
            bin: None,
            rule: Some(rule.to_string()),
        }
    }

    pub fn key(&self) -> Option<FeatureKey> {
        self.domain.map(|d| FeatureKey::new(d, &self.code))
    }
}
