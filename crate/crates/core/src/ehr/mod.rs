//! Event-level clinical data model.
//!
//! Records arrive as flat event rows (diagnoses, procedures, medications,
//! laboratory values, demographic measurements and administrative events)
//! plus a demographics table. They are ingested into an [`EventStore`] of
//! time-ordered [`PatientRecord`]s, quality checked, standardized, and then
//! used to assemble index-dated cohorts and derive right-censored outcomes.

mod codes;
mod cohort;
mod ingest;
mod outcomes;
mod quality;
mod standardize;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codes::{any_match, normalize_code, CodePattern};
pub use cohort::{
    assemble_cohort, Cohort, CohortDecision, CohortMember, CohortOptions, CohortSpec, ExclusionRule, IndexCriterion,
    MedicationMatcher, PositionRequirement, ProvenanceNote,
};
pub use ingest::{
    ingest, read_demographics, read_events, write_demographics_csv, write_events_csv, DemographicsRow, IngestOptions,
    IngestReport, RawEventRow, RejectReason, Rejection, RowSource,
};
pub use outcomes::{
    derive_outcomes, MedicationWithin, OutcomeCriterion, OutcomeDefinition, OutcomeEvent, OutcomeExclusion, OutcomeSet,
};
pub use quality::{
    quality_check, quality_check_store, PhysRange, QcOutcome, QcPolicy, QcReport, RangeTable, Violation,
};
pub use standardize::{standardize, standardize_store, StandardizationConfig, SynonymMap, UnitConversion, UnitMap};

#[derive(Debug, Error)]
pub enum EhrError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input {path}: {message}")]
    Format { path: String, message: String },
    #[error("invalid code pattern '{pattern}': {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("invalid cohort spec: {0}")]
    InvalidCohortSpec(String),
    #[error("invalid outcome definition: {0}")]
    InvalidOutcome(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(pub String);

impl PatientId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PatientId {
    fn from(value: &str) -> Self {
        Self(value.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Diagnosis,
    Procedure,
    Medication,
    Laboratory,
    Demographic,
    Administrative,
}

impl Domain {
    pub const ALL: [Domain; 6] = [
        Domain::Diagnosis,
        Domain::Procedure,
        Domain::Medication,
        Domain::Laboratory,
        Domain::Demographic,
        Domain::Administrative,
    ];

    /// Short prefix used in feature identifiers (`dx:I50.1`, `lab:Sodium`).
    pub fn prefix(self) -> &'static str {
        match self {
            Domain::Diagnosis => "dx",
            Domain::Procedure => "px",
            Domain::Medication => "rx",
            Domain::Laboratory => "lab",
            Domain::Demographic => "demo",
            Domain::Administrative => "adm",
        }
    }

    pub fn from_prefix(prefix: &str) -> Option<Domain> {
        Domain::ALL
            .into_iter()
            .find(|d| d.prefix().eq_ignore_ascii_case(prefix))
    }

    pub fn carries_values(self) -> bool {
        matches!(self, Domain::Laboratory | Domain::Demographic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Diagnosis => "diagnosis",
            Domain::Procedure => "procedure",
            Domain::Medication => "medication",
            Domain::Laboratory => "laboratory",
            Domain::Demographic => "demographic",
            Domain::Administrative => "administrative",
        }
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == lower || d.prefix() == lower)
            .ok_or_else(|| s.trim().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    #[serde(rename = "primary")]
    Primary,
    #[serde(rename = "secondary")]
    Secondary,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Position {
    pub fn as_str(self) -> &'static str {
        match self {
            Position::Primary => "primary",
            Position::Secondary => "secondary",
            Position::NotApplicable => "n/a",
        }
    }
}

impl FromStr for Position {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "primary" | "p" | "1" => Ok(Position::Primary),
            "secondary" | "s" | "2" => Ok(Position::Secondary),
            "" | "n/a" | "na" | "none" => Ok(Position::NotApplicable),
            _ => Err(s.trim().to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncounterKind {
    Inpatient,
    Outpatient,
    Emergency,
    Other,
}

impl EncounterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncounterKind::Inpatient => "inpatient",
            EncounterKind::Outpatient => "outpatient",
            EncounterKind::Emergency => "emergency",
            EncounterKind::Other => "other",
        }
    }

    pub fn is_admission(self) -> bool {
        matches!(self, EncounterKind::Inpatient | EncounterKind::Emergency)
    }
}

impl FromStr for EncounterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inpatient" | "ip" => Ok(EncounterKind::Inpatient),
            "outpatient" | "op" => Ok(EncounterKind::Outpatient),
            "emergency" | "ed" | "ae" => Ok(EncounterKind::Emergency),
            "other" | "" => Ok(EncounterKind::Other),
            _ => Err(s.trim().to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    /// Covariate encoding used by the Cox adjustment: female 0, male 1.
    pub fn covariate(self) -> Option<f64> {
        match self {
            Sex::Female => Some(0.0),
            Sex::Male => Some(1.0),
            Sex::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
            Sex::Unknown => "unknown",
        }
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" => Ok(Sex::Female),
            "m" | "male" => Ok(Sex::Male),
            "u" | "unknown" | "" => Ok(Sex::Unknown),
            _ => Err(s.trim().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFlag {
    EmptyValue,
    MistypedValue,
    NonCanonical,
    UnitUnconvertible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub patient_id: PatientId,
    pub domain: Domain,
    pub code: String,
    pub position: Position,
    pub timestamp: NaiveDateTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Measurement>,
    pub encounter_id: String,
    pub encounter_kind: EncounterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admission_code: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<EventFlag>,
}

impl ClinicalEvent {
    pub fn date(&self) -> NaiveDate {
        self.timestamp.date()
    }

    /// Medication codes may carry a trailing dose token (`"Spironolactone 25mg"`).
    /// Returns the drug name and the normalized dose, if any.
    pub fn medication_name_and_dose(&self) -> (&str, Option<String>) {
        split_dose(&self.code)
    }
}

/// Splits `"Spironolactone 25 mg"` into `("Spironolactone", Some("25mg"))`.
pub fn split_dose(code: &str) -> (&str, Option<String>) {
    let trimmed = code.trim();
    let tokens: Vec<(usize, &str)> = trimmed
        .split_whitespace()
        .map(|t| (t.as_ptr() as usize - trimmed.as_ptr() as usize, t))
        .collect();
    if tokens.len() < 2 {
        return (trimmed, None);
    }
    let is_number = |t: &str| !t.is_empty() && t.chars().all(|c| c.is_ascii_digit() || c == '.');
    let split_num_unit = |t: &str| -> Option<String> {
        let idx = t.find(|c: char| !(c.is_ascii_digit() || c == '.'))?;
        let (num, unit) = t.split_at(idx);
        (is_number(num) && unit.chars().all(|c| c.is_ascii_alphabetic() || c == '/'))
            .then(|| format!("{num}{}", unit.to_ascii_lowercase()))
    };
    let (last_off, last) = tokens[tokens.len() - 1];
    if let Some(dose) = split_num_unit(last) {
        return (trimmed[..last_off].trim_end(), Some(dose));
    }
    if tokens.len() >= 3 {
        let (prev_off, prev) = tokens[tokens.len() - 2];
        if is_number(prev) && last.chars().all(|c| c.is_ascii_alphabetic() || c == '/') {
            return (
                trimmed[..prev_off].trim_end(),
                Some(format!("{prev}{}", last.to_ascii_lowercase())),
            );
        }
    }
    (trimmed, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    pub birth_date: NaiveDate,
    pub sex: Sex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death_date: Option<NaiveDate>,
    pub events: Vec<ClinicalEvent>,
}

impl PatientRecord {
    /// Age in completed years on `date`.
    pub fn age_on(&self, date: NaiveDate) -> i64 {
        use chrono::Datelike;
        let mut age = i64::from(date.year() - self.birth_date.year());
        if (date.month(), date.day()) < (self.birth_date.month(), self.birth_date.day()) {
            age -= 1;
        }
        age
    }

    /// Age in fractional years (365.25-day years), the Cox covariate.
    pub fn age_years(&self, date: NaiveDate) -> f64 {
        (date - self.birth_date).num_days() as f64 / 365.25
    }

    pub fn first_admission(&self) -> Option<&ClinicalEvent> {
        self.events
            .iter()
            .find(|e| e.encounter_kind.is_admission())
            .or_else(|| self.events.first())
    }

    pub fn last_activity(&self) -> Option<NaiveDate> {
        self.events.iter().map(ClinicalEvent::date).max()
    }

    /// Events belonging to one encounter, in time order.
    pub fn encounter<'a>(&'a self, encounter_id: &'a str) -> impl Iterator<Item = &'a ClinicalEvent> {
        self.events.iter().filter(move |e| e.encounter_id == encounter_id)
    }

    /// Span of an encounter in hours, measured from its first to last event.
    pub fn encounter_hours(&self, encounter_id: &str) -> f64 {
        let mut iter = self.encounter(encounter_id).map(|e| e.timestamp);
        let Some(first) = iter.next() else {
            return 0.0;
        };
        let (lo, hi) = iter.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t)));
        (hi - lo).num_minutes() as f64 / 60.0
    }

    pub fn encounter_start(&self, encounter_id: &str) -> Option<NaiveDateTime> {
        self.encounter(encounter_id).map(|e| e.timestamp).min()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventStore {
    pub records: BTreeMap<PatientId, PatientRecord>,
}

impl EventStore {
    pub fn get(&self, id: &PatientId) -> Option<&PatientRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientRecord> {
        self.records.values()
    }
}
