use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codes::any_match;
use super::{split_dose, ClinicalEvent, CodePattern, Domain, EhrError, EventStore, PatientId, PatientRecord, Position};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRequirement {
    #[default]
    Primary,
    Secondary,
    Any,
}

impl PositionRequirement {
    pub fn admits(self, position: Position) -> bool {
        match self {
            PositionRequirement::Primary => position == Position::Primary,
            PositionRequirement::Secondary => position == Position::Secondary,
            PositionRequirement::Any => true,
        }
    }
}

fn diagnosis() -> Domain {
    Domain::Diagnosis
}

fn procedure() -> Domain {
    Domain::Procedure
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexCriterion {
    pub patterns: Vec<CodePattern>,
    #[serde(default)]
    pub position: PositionRequirement,
    #[serde(default = "diagnosis")]
    pub domain: Domain,
}

impl IndexCriterion {
    pub fn matches(&self, event: &ClinicalEvent) -> bool {
        event.domain == self.domain && self.position.admits(event.position) && any_match(&self.patterns, &event.code)
    }
}

/// Drug name with the doses that trigger the rule; no doses means any dose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicationMatcher {
    pub name: String,
    #[serde(default)]
    pub doses: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MedicationMatch {
    None,
    Dose,
    NameOnly,
}

impl MedicationMatcher {
    fn check(&self, code: &str) -> MedicationMatch {
        let (name, dose) = split_dose(code);
        if !name.eq_ignore_ascii_case(self.name.trim()) {
            return MedicationMatch::None;
        }
        if self.doses.is_empty() {
            return MedicationMatch::Dose;
        }
        match dose {
            Some(d) => {
                let wanted = self.doses.iter().any(|w| w.replace(' ', "").eq_ignore_ascii_case(&d));
                if wanted {
                    MedicationMatch::Dose
                } else {
                    MedicationMatch::None
                }
            }
            None => MedicationMatch::NameOnly,
        }
    }
}

/// Declarative exclusion rules. "Prior" means before the index event and
/// outside the index encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ExclusionRule {
    /// A matching code recorded before the index admission.
    PriorCode {
        patterns: Vec<CodePattern>,
        #[serde(default = "any_position")]
        position: PositionRequirement,
        #[serde(default = "diagnosis")]
        domain: Domain,
    },
    /// A matching procedure within `days` after the index date.
    ProcedureWithinWindow { patterns: Vec<CodePattern>, days: i64 },
    /// Any listed medication prescribed before the index admission.
    MedicationPrior { medications: Vec<MedicationMatcher> },
    /// Index admission shorter than `max_hours` with a matching procedure in
    /// the `window_days` following admission start.
    ShortAdmissionWithProcedure {
        patterns: Vec<CodePattern>,
        #[serde(default = "default_max_hours")]
        max_hours: f64,
        #[serde(default = "default_window_days")]
        window_days: i64,
    },
    /// A prior measurement of a named quantity, optionally only when below a
    /// threshold (e.g. ejection fraction under 40).
    PriorMeasurement {
        names: Vec<String>,
        #[serde(default)]
        below: Option<f64>,
    },
}

fn any_position() -> PositionRequirement {
    PositionRequirement::Any
}

fn default_max_hours() -> f64 {
    48.0
}

fn default_window_days() -> i64 {
    30
}

impl ExclusionRule {
    pub fn name(&self) -> &'static str {
        match self {
            ExclusionRule::PriorCode { .. } => "prior_code",
            ExclusionRule::ProcedureWithinWindow { .. } => "procedure_within_window",
            ExclusionRule::MedicationPrior { .. } => "medication_prior",
            ExclusionRule::ShortAdmissionWithProcedure { .. } => "short_admission_with_procedure",
            ExclusionRule::PriorMeasurement { .. } => "prior_measurement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub label: String,
    pub index: Vec<IndexCriterion>,
    #[serde(default)]
    pub min_lookback_days: i64,
    #[serde(default)]
    pub exclusions: Vec<ExclusionRule>,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), EhrError> {
        if self.index.iter().all(|c| c.patterns.is_empty()) {
            return Err(EhrError::InvalidCohortSpec(format!(
                "cohort '{}' needs at least one index code pattern",
                self.label
            )));
        }
        if self.min_lookback_days < 0 {
            return Err(EhrError::InvalidCohortSpec("min_lookback_days must be >= 0".into()));
        }
        for rule in &self.exclusions {
            if let ExclusionRule::ProcedureWithinWindow { days, .. }
            | ExclusionRule::ShortAdmissionWithProcedure { window_days: days, .. } = rule
            {
                if *days < 0 {
                    return Err(EhrError::InvalidCohortSpec(format!("{}: negative window", rule.name())));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, EhrError> {
        let spec: CohortSpec = toml::from_str(text).map_err(|e| EhrError::InvalidCohortSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn heart_failure() -> Self {
        Self::from_toml(include_str!("../../config/cohort_heart_failure.toml")).expect("bundled cohort parses")
    }

    pub fn stroke() -> Self {
        Self::from_toml(include_str!("../../config/cohort_stroke.toml")).expect("bundled cohort parses")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortOptions {
    /// Patients to leave out, typically those flagged by quality checks.
    #[serde(default)]
    pub excluded_patients: BTreeSet<PatientId>,
    /// Minimum age in completed years at index.
    #[serde(default)]
    pub min_age_at_index: Option<i64>,
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self {
            excluded_patients: BTreeSet::new(),
            min_age_at_index: Some(18),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMember {
    pub patient_id: PatientId,
    pub index_date: NaiveDate,
    pub index_timestamp: NaiveDateTime,
    pub index_encounter: String,
    pub index_code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum CohortDecision {
    Admitted,
    NoIndexEvent,
    QcFlagged,
    UnderAge { age: i64 },
    InsufficientLookback { available_days: i64 },
    Excluded { rule: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceNote {
    pub patient_id: PatientId,
    #[serde(flatten)]
    pub decision: CohortDecision,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub label: String,
    pub members: Vec<CohortMember>,
    pub provenance: Vec<ProvenanceNote>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Cohort {
    pub fn member(&self, id: &PatientId) -> Option<&CohortMember> {
        self.members
            .binary_search_by(|m| m.patient_id.cmp(id))
            .ok()
            .map(|i| &self.members[i])
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = &PatientId> {
        self.members.iter().map(|m| &m.patient_id)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Drops members, keeping provenance and recording the reason.
    pub fn without(&self, removed: &BTreeSet<PatientId>, reason: &str) -> Cohort {
        let mut out = self.clone();
        out.members.retain(|m| !removed.contains(&m.patient_id));
        for id in removed {
            if self.member(id).is_some() {
                out.provenance.push(ProvenanceNote {
                    patient_id: id.clone(),
                    decision: CohortDecision::Excluded {
                        rule: "curation".into(),
                    },
                    detail: reason.to_string(),
                });
            }
        }
        out
    }
}

struct Evaluation {
    member: Option<CohortMember>,
    note: ProvenanceNote,
    warnings: Vec<String>,
}

/// Finds each patient's first index event and applies lookback, age and
/// exclusion rules. Every candidate gets a provenance note.
pub fn assemble_cohort(store: &EventStore, spec: &CohortSpec, options: &CohortOptions) -> Result<Cohort, EhrError> {
    spec.validate()?;
    let evaluations: Vec<Evaluation> = store
        .records
        .par_iter()
        .map(|(_, record)| evaluate(record, spec, options))
        .collect();
    let mut members = Vec::new();
    let mut provenance = Vec::with_capacity(evaluations.len());
    let mut warnings = Vec::new();
    for ev in evaluations {
        members.extend(ev.member);
        provenance.push(ev.note);
        warnings.extend(ev.warnings);
    }
    members.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(Cohort {
        label: spec.label.clone(),
        members,
        provenance,
        warnings,
    })
}

fn evaluate(record: &PatientRecord, spec: &CohortSpec, options: &CohortOptions) -> Evaluation {
    let note = |decision, detail: String| ProvenanceNote {
        patient_id: record.patient_id.clone(),
        decision,
        detail,
    };
    let reject = |decision, detail| Evaluation {
        member: None,
        note: note(decision, detail),
        warnings: Vec::new(),
    };

    let Some(index_event) = record.events.iter().find(|e| spec.index.iter().any(|c| c.matches(e))) else {
        return reject(CohortDecision::NoIndexEvent, "no matching index code".into());
    };
    let index_date = index_event.date();
    if options.excluded_patients.contains(&record.patient_id) {
        return reject(CohortDecision::QcFlagged, "patient flagged by quality checks".into());
    }
    if let Some(min_age) = options.min_age_at_index {
        let age = record.age_on(index_date);
        if age < min_age {
            return reject(
                CohortDecision::UnderAge { age },
                format!("age {age} at index {index_date}"),
            );
        }
    }
    let earliest = record.events.first().map(|e| e.date()).unwrap_or(index_date);
    let available_days = (index_date - earliest).num_days();
    if available_days < spec.min_lookback_days {
        return reject(
            CohortDecision::InsufficientLookback { available_days },
            format!("{available_days} days of prior data, need {}", spec.min_lookback_days),
        );
    }

    let mut warnings = Vec::new();
    for rule in &spec.exclusions {
        if let Some(detail) = apply_rule(record, index_event, rule, &mut warnings) {
            return Evaluation {
                member: None,
                note: note(
                    CohortDecision::Excluded {
                        rule: rule.name().to_string(),
                    },
                    detail,
                ),
                warnings,
            };
        }
    }

    Evaluation {
        member: Some(CohortMember {
            patient_id: record.patient_id.clone(),
            index_date,
            index_timestamp: index_event.timestamp,
            index_encounter: index_event.encounter_id.clone(),
            index_code: index_event.code.clone(),
        }),
        note: note(
            CohortDecision::Admitted,
            format!("index {} on {index_date}", index_event.code),
        ),
        warnings,
    }
}

fn is_prior(event: &ClinicalEvent, index: &ClinicalEvent) -> bool {
    event.timestamp < index.timestamp && event.encounter_id != index.encounter_id
}

/// Returns a description of the triggering event when the rule excludes.
fn apply_rule(
    record: &PatientRecord,
    index: &ClinicalEvent,
    rule: &ExclusionRule,
    warnings: &mut Vec<String>,
) -> Option<String> {
    match rule {
        ExclusionRule::PriorCode {
            patterns,
            position,
            domain,
        } => record
            .events
            .iter()
            .find(|e| {
                is_prior(e, index) && e.domain == *domain && position.admits(e.position) && any_match(patterns, &e.code)
            })
            .map(|e| format!("prior {} {} on {}", e.position.as_str(), e.code, e.date())),
        ExclusionRule::ProcedureWithinWindow { patterns, days } => {
            let end = index.date() + Duration::days(*days);
            record
                .events
                .iter()
                .find(|e| {
                    e.domain == Domain::Procedure
                        && e.timestamp >= index.timestamp
                        && e.date() <= end
                        && any_match(patterns, &e.code)
                })
                .map(|e| format!("procedure {} on {}", e.code, e.date()))
        }
        ExclusionRule::MedicationPrior { medications } => {
            for e in record
                .events
                .iter()
                .filter(|e| e.domain == Domain::Medication && is_prior(e, index))
            {
                for m in medications {
                    match m.check(&e.code) {
                        MedicationMatch::Dose => return Some(format!("prior medication {} on {}", e.code, e.date())),
                        MedicationMatch::NameOnly => {
                            warnings.push(format!(
                                "{}: medication '{}' has no dose, matched on name only",
                                record.patient_id, e.code
                            ));
                            return Some(format!("prior medication {} on {} (name only)", e.code, e.date()));
                        }
                        MedicationMatch::None => {}
                    }
                }
            }
            None
        }
        ExclusionRule::ShortAdmissionWithProcedure {
            patterns,
            max_hours,
            window_days,
        } => {
            let hours = record.encounter_hours(&index.encounter_id);
            if hours >= *max_hours {
                return None;
            }
            let start = record.encounter_start(&index.encounter_id).unwrap_or(index.timestamp);
            let end = start + Duration::days(*window_days);
            record
                .events
                .iter()
                .find(|e| {
                    e.domain == procedure()
                        && e.timestamp >= start
                        && e.timestamp <= end
                        && any_match(patterns, &e.code)
                })
                .map(|e| format!("admission of {hours:.1}h with procedure {} on {}", e.code, e.date()))
        }
        ExclusionRule::PriorMeasurement { names, below } => record
            .events
            .iter()
            .filter(|e| is_prior(e, index) && e.domain.carries_values())
            .find(|e| {
                names.iter().any(|n| n.trim().eq_ignore_ascii_case(e.code.trim()))
                    && match (below, &e.value) {
                        (None, _) => true,
                        (Some(t), Some(m)) => m.value < *t,
                        (Some(_), None) => false,
                    }
            })
            .map(|e| format!("prior measurement {} on {}", e.code, e.date())),
    }
}
