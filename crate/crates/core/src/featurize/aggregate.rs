use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{FeatureKey, FeaturizeError};
use crate::ehr::{PatientId, PatientRecord};

/// Inclusive date window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Window {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, FeaturizeError> {
        if start > end {
            return Err(FeaturizeError::InvalidWindow { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSummary {
    pub median: f64,
    /// Median absolute deviation around the median, unscaled.
    pub mad: f64,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub last: f64,
}

impl ContinuousSummary {
    /// Summarizes values given in time order; `None` for an empty slice.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let last = *values.last()?;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = median_sorted(&sorted);
        let mut dev: Vec<f64> = sorted.iter().map(|v| (v - median).abs()).collect();
        dev.sort_by(f64::total_cmp);
        Some(Self {
            median,
            mad: median_sorted(&dev),
            count: values.len(),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            last,
        })
    }
}

pub(crate) fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Per-patient aggregation of the events inside a window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: PatientId,
    /// Event counts per code, every domain.
    pub counts: BTreeMap<FeatureKey, usize>,
    /// Value summaries for measured codes (laboratory and demographic).
    pub continuous: BTreeMap<FeatureKey, ContinuousSummary>,
}

impl PatientSummary {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Summarizes a record's events falling inside `window`; everything else is ignored.
pub fn aggregate_window(record: &PatientRecord, window: Window) -> PatientSummary {
    let mut counts: BTreeMap<FeatureKey, usize> = BTreeMap::new();
    let mut values: BTreeMap<FeatureKey, Vec<f64>> = BTreeMap::new();
    for event in record.events.iter().filter(|e| window.contains(e.date())) {
        let key = FeatureKey::new(event.domain, &event.code);
        if event.domain.carries_values() {
            if let Some(m) = &event.value {
                values.entry(key.clone()).or_default().push(m.value);
            }
        }
        *counts.entry(key).or_default() += 1;
    }
    let continuous = values
        .into_iter()
        .filter_map(|(k, v)| ContinuousSummary::from_values(&v).map(|s| (k, s)))
        .collect();
    PatientSummary {
        patient_id: record.patient_id.clone(),
        counts,
        continuous,
    }
}
