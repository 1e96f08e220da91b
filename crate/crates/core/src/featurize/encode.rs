use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_window, fit_quantisation, Aggregation, FeatureDescriptor, FeatureKey, FeatureMatrix, FeaturizeError,
    PatientSummary, QuantisationScheme, Window,
};
use crate::ehr::{Cohort, Domain, EventStore};

/// Column encodings used as alternative pre-processings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Presence/absence of every vocabulary code.
    OneHot,
    /// Event counts per code.
    Counts,
    /// Presence for codes; measured values as one column per quantile bin.
    Quantised,
}

impl Encoding {
    pub fn as_str(self) -> &'static str {
        match self {
            Encoding::OneHot => "one_hot",
            Encoding::Counts => "counts",
            Encoding::Quantised => "quantised",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizeConfig {
    /// Window start relative to the index date, in days before it.
    pub days_before: i64,
    /// Window end relative to the index date, in days after it.
    pub days_after: i64,
    /// Minimum fraction of patients carrying a code for it to become a column.
    pub min_prevalence: f64,
    /// Patients with a lower fraction of present features are removed.
    pub sparsity_threshold: f64,
    pub quantisation_bins: usize,
    pub domains: Vec<Domain>,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self {
            days_before: 30,
            days_after: 0,
            min_prevalence: 0.01,
            sparsity_threshold: 0.01,
            quantisation_bins: 5,
            domains: vec![
                Domain::Diagnosis,
                Domain::Procedure,
                Domain::Medication,
                Domain::Laboratory,
                Domain::Demographic,
            ],
        }
    }
}

/// Summaries for every cohort member, ordered by patient id.
pub fn summarize_cohort(
    cohort: &Cohort,
    store: &EventStore,
    config: &FeaturizeConfig,
) -> Result<Vec<PatientSummary>, FeaturizeError> {
    let domains: BTreeSet<Domain> = config.domains.iter().copied().collect();
    let mut out: Vec<PatientSummary> = cohort
        .members
        .par_iter()
        .map(|m| {
            let record = store
                .get(&m.patient_id)
                .ok_or_else(|| FeaturizeError::UnknownPatient(m.patient_id.to_string()))?;
            let window = Window::new(
                m.index_date - Duration::days(config.days_before),
                m.index_date + Duration::days(config.days_after),
            )?;
            let mut s = aggregate_window(record, window);
            s.counts.retain(|k, _| domains.contains(&k.domain));
            s.continuous.retain(|k, _| domains.contains(&k.domain));
            Ok(s)
        })
        .collect::<Result<_, FeaturizeError>>()?;
    out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub keys: Vec<FeatureKey>,
}

impl Vocabulary {
    pub fn new(keys: impl IntoIterator<Item = FeatureKey>) -> Self {
        let mut keys: Vec<FeatureKey> = keys.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        keys.sort_by_key(FeatureKey::feature_id);
        Self { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Codes present in at least `min_prevalence` of the patients.
pub fn build_vocabulary(summaries: &[PatientSummary], min_prevalence: f64) -> Vocabulary {
    let mut carriers: BTreeMap<&FeatureKey, usize> = BTreeMap::new();
    for s in summaries {
        for k in s.counts.keys() {
            *carriers.entry(k).or_default() += 1;
        }
    }
    let n = summaries.len().max(1) as f64;
    Vocabulary::new(
        carriers
            .into_iter()
            .filter(|(_, c)| *c as f64 / n >= min_prevalence)
            .map(|(k, _)| k.clone()),
    )
}

fn ids(summaries: &[PatientSummary]) -> Vec<crate::ehr::PatientId> {
    summaries.iter().map(|s| s.patient_id.clone()).collect()
}

pub fn one_hot_encode(summaries: &[PatientSummary], vocab: &Vocabulary) -> Result<FeatureMatrix, FeaturizeError> {
    if vocab.is_empty() {
        return Err(FeaturizeError::EmptyVocabulary);
    }
    let features: Vec<FeatureDescriptor> = vocab.keys.iter().map(FeatureDescriptor::binary).collect();
    let mut values = Vec::with_capacity(summaries.len() * vocab.len());
    for s in summaries {
        values.extend(
            vocab
                .keys
                .iter()
                .map(|k| if s.counts.contains_key(k) { 1.0 } else { 0.0 }),
        );
    }
    FeatureMatrix::dense(ids(summaries), features, values)
}

pub fn count_encode(summaries: &[PatientSummary], vocab: &Vocabulary) -> Result<FeatureMatrix, FeaturizeError> {
    if vocab.is_empty() {
        return Err(FeaturizeError::EmptyVocabulary);
    }
    let features: Vec<FeatureDescriptor> = vocab.keys.iter().map(FeatureDescriptor::count).collect();
    let mut values = Vec::with_capacity(summaries.len() * vocab.len());
    for s in summaries {
        values.extend(vocab.keys.iter().map(|k| s.counts.get(k).copied().unwrap_or(0) as f64));
    }
    FeatureMatrix::dense(ids(summaries), features, values)
}

/// Fits a scheme per measured vocabulary code on the patients' window medians.
pub fn fit_lab_schemes(
    summaries: &[PatientSummary],
    vocab: &Vocabulary,
    bins: usize,
) -> Result<BTreeMap<FeatureKey, QuantisationScheme>, FeaturizeError> {
    let mut out = BTreeMap::new();
    for key in vocab.keys.iter().filter(|k| k.domain.carries_values()) {
        let medians: Vec<f64> = summaries
            .iter()
            .filter_map(|s| s.continuous.get(key).map(|c| c.median))
            .collect();
        if medians.is_empty() {
            continue;
        }
        out.insert(key.clone(), fit_quantisation(&key.feature_id(), &medians, bins)?);
    }
    Ok(out)
}

pub fn quantised_encode(
    summaries: &[PatientSummary],
    vocab: &Vocabulary,
    schemes: &BTreeMap<FeatureKey, QuantisationScheme>,
) -> Result<FeatureMatrix, FeaturizeError> {
    if vocab.is_empty() {
        return Err(FeaturizeError::EmptyVocabulary);
    }
    let mut features = Vec::new();
    for key in &vocab.keys {
        match schemes.get(key) {
            Some(s) => {
                let edges = s.edges();
                for b in 0..s.bin_count() {
                    features.push(FeatureDescriptor::quantised(key, b, edges[b], edges[b + 1]));
                }
            }
            None => features.push(FeatureDescriptor::binary(key)),
        }
    }
    let mut values = Vec::with_capacity(summaries.len() * features.len());
    for s in summaries {
        for key in &vocab.keys {
            match schemes.get(key) {
                Some(scheme) => {
                    let hit = s.continuous.get(key).map(|c| scheme.bin_of(c.median));
                    values.extend((0..scheme.bin_count()).map(|b| if hit == Some(b) { 1.0 } else { 0.0 }));
                }
                None => values.push(if s.counts.contains_key(key) { 1.0 } else { 0.0 }),
            }
        }
    }
    FeatureMatrix::dense(ids(summaries), features, values)
}

/// Window aggregates of measured codes; patients without a value are masked.
pub fn continuous_matrix(
    summaries: &[PatientSummary],
    vocab: &Vocabulary,
    aggregation: Aggregation,
) -> Result<FeatureMatrix, FeaturizeError> {
    let keys: Vec<&FeatureKey> = vocab
        .keys
        .iter()
        .filter(|k| summaries.iter().any(|s| s.continuous.contains_key(*k)))
        .collect();
    let features = keys
        .iter()
        .map(|k| FeatureDescriptor::continuous(k, aggregation))
        .collect();
    let mut values = Vec::with_capacity(summaries.len() * keys.len());
    let mut missing = Vec::with_capacity(summaries.len() * keys.len());
    for s in summaries {
        for k in &keys {
            match s.continuous.get(*k) {
                Some(c) => {
                    values.push(aggregation.of(c));
                    missing.push(false);
                }
                None => {
                    values.push(f64::NAN);
                    missing.push(true);
                }
            }
        }
    }
    FeatureMatrix::new(ids(summaries), features, values, missing)
}

/// Builds the matrix for one encoding. Quantisation schemes are returned so
/// they can be stored alongside the matrix.
pub fn encode(
    summaries: &[PatientSummary],
    vocab: &Vocabulary,
    encoding: Encoding,
    bins: usize,
) -> Result<(FeatureMatrix, Vec<QuantisationScheme>), FeaturizeError> {
    match encoding {
        Encoding::OneHot => Ok((one_hot_encode(summaries, vocab)?, Vec::new())),
        Encoding::Counts => Ok((count_encode(summaries, vocab)?, Vec::new())),
        Encoding::Quantised => {
            let schemes = fit_lab_schemes(summaries, vocab, bins)?;
            let m = quantised_encode(summaries, vocab, &schemes)?;
            Ok((m, schemes.into_values().collect()))
        }
    }
}
