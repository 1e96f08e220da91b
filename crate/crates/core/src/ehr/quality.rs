use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{Domain, EhrError, EventFlag, EventStore, PatientId, PatientRecord};

/// Plausible bounds for one laboratory or demographic measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysRange {
    pub min: f64,
    pub max: f64,
    /// When set, the range only applies to values recorded in this unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

/// Range table keyed by measurement name (case-insensitive).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RangeTable {
    #[serde(default)]
    pub ranges: BTreeMap<String, PhysRange>,
}

impl RangeTable {
    pub fn from_toml(text: &str) -> Result<Self, EhrError> {
        let table: RangeTable = toml::from_str(text).map_err(|e| EhrError::Config(e.to_string()))?;
        for (name, r) in &table.ranges {
            if !(r.min <= r.max) {
                return Err(EhrError::Config(format!("range for '{name}' has min > max")));
            }
        }
        Ok(table.normalized())
    }

    /// Placeholder ranges shipped with the crate; override per site.
    pub fn default_ranges() -> Self {
        Self::from_toml(include_str!("../../config/physiological_ranges.toml")).expect("bundled range table parses")
    }

    pub fn insert(&mut self, name: &str, range: PhysRange) {
        self.ranges.insert(name.trim().to_lowercase(), range);
    }

    pub fn get(&self, name: &str) -> Option<&PhysRange> {
        self.ranges.get(&name.trim().to_lowercase())
    }

    fn normalized(self) -> Self {
        Self {
            ranges: self
                .ranges
                .into_iter()
                .map(|(k, v)| (k.trim().to_lowercase(), v))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcPolicy {
    pub min_age: i64,
    /// Remove events with out-of-range, empty or mistyped values.
    pub drop_offending_events: bool,
    /// Flag patients failing the age or death checks.
    pub flag_patients: bool,
}

impl Default for QcPolicy {
    fn default() -> Self {
        Self {
            min_age: 18,
            drop_offending_events: true,
            flag_patients: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Violation {
    UnderAge {
        age: i64,
        min_age: i64,
        reference_date: NaiveDate,
    },
    DeathPrecedesAdmission {
        death_date: NaiveDate,
        first_admission: NaiveDate,
    },
    OutOfRange {
        code: String,
        value: f64,
        min: f64,
        max: f64,
        timestamp: NaiveDateTime,
    },
    EmptyValue {
        code: String,
        timestamp: NaiveDateTime,
    },
    MistypedValue {
        code: String,
        timestamp: NaiveDateTime,
    },
}

impl Violation {
    /// Short label used in reports, e.g. `under-18`.
    pub fn label(&self) -> String {
        match self {
            Violation::UnderAge { min_age, .. } => format!("under-{min_age}"),
            Violation::DeathPrecedesAdmission { .. } => "death precedes admission".into(),
            Violation::OutOfRange { .. } => "out of physiological range".into(),
            Violation::EmptyValue { .. } => "empty value".into(),
            Violation::MistypedValue { .. } => "mistyped value".into(),
        }
    }

    pub fn is_patient_level(&self) -> bool {
        matches!(
            self,
            Violation::UnderAge { .. } | Violation::DeathPrecedesAdmission { .. }
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnderAge {
                age, reference_date, ..
            } => {
                write!(f, "{}: age {age} on {reference_date}", self.label())
            }
            Violation::DeathPrecedesAdmission {
                death_date,
                first_admission,
            } => {
                write!(
                    f,
                    "{}: died {death_date}, first admission {first_admission}",
                    self.label()
                )
            }
            Violation::OutOfRange {
                code, value, min, max, ..
            } => {
                write!(f, "{}: {code}={value} not in [{min}, {max}]", self.label())
            }
            Violation::EmptyValue { code, .. } | Violation::MistypedValue { code, .. } => {
                write!(f, "{}: {code}", self.label())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcOutcome {
    pub record: PatientRecord,
    pub violations: Vec<Violation>,
    pub flagged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub violations: BTreeMap<PatientId, Vec<Violation>>,
    pub flagged: BTreeSet<PatientId>,
    pub dropped_events: usize,
}

/// Runs the record-level checks.
///
/// Age is checked at `reference_date` (normally the index date) or, when
/// absent, at the first admission.
pub fn quality_check(
    record: &PatientRecord,
    ranges: &RangeTable,
    policy: &QcPolicy,
    reference_date: Option<NaiveDate>,
) -> QcOutcome {
    let mut violations = Vec::new();
    let first_admission = record.first_admission().map(|e| e.date());

    if let Some(reference_date) = reference_date.or(first_admission) {
        let age = record.age_on(reference_date);
        if age < policy.min_age {
            violations.push(Violation::UnderAge {
                age,
                min_age: policy.min_age,
                reference_date,
            });
        }
    }
    if let (Some(death_date), Some(first_admission)) = (record.death_date, first_admission) {
        if death_date < first_admission {
            violations.push(Violation::DeathPrecedesAdmission {
                death_date,
                first_admission,
            });
        }
    }

    let mut kept = Vec::with_capacity(record.events.len());
    for event in &record.events {
        let mut offending = false;
        if matches!(event.domain, Domain::Laboratory | Domain::Demographic) {
            if event.flags.contains(&EventFlag::EmptyValue) {
                violations.push(Violation::EmptyValue {
                    code: event.code.clone(),
                    timestamp: event.timestamp,
                });
                offending = true;
            } else if event.flags.contains(&EventFlag::MistypedValue) {
                violations.push(Violation::MistypedValue {
                    code: event.code.clone(),
                    timestamp: event.timestamp,
                });
                offending = true;
            } else if let (Some(m), Some(range)) = (&event.value, ranges.get(&event.code)) {
                let unit_applies = match &range.unit {
                    Some(u) => m.unit.is_empty() || m.unit.eq_ignore_ascii_case(u),
                    None => true,
                };
                if unit_applies && (m.value < range.min || m.value > range.max) {
                    violations.push(Violation::OutOfRange {
                        code: event.code.clone(),
                        value: m.value,
                        min: range.min,
                        max: range.max,
                        timestamp: event.timestamp,
                    });
                    offending = true;
                }
            }
        }
        if !(offending && policy.drop_offending_events) {
            kept.push(event.clone());
        }
    }

    let flagged = policy.flag_patients && violations.iter().any(Violation::is_patient_level);
    QcOutcome {
        record: PatientRecord {
            events: kept,
            ..record.clone()
        },
        violations,
        flagged,
    }
}

/// Applies [`quality_check`] to every record, using first admission as the
/// age reference. Flagged patients stay in the store and are listed in the report.
pub fn quality_check_store(store: &EventStore, ranges: &RangeTable, policy: &QcPolicy) -> (EventStore, QcReport) {
    let mut report = QcReport::default();
    let mut records = BTreeMap::new();
    for (id, record) in &store.records {
        let outcome = quality_check(record, ranges, policy, None);
        report.dropped_events += record.events.len() - outcome.record.events.len();
        if outcome.flagged {
            report.flagged.insert(id.clone());
        }
        if !outcome.violations.is_empty() {
            report.violations.insert(id.clone(), outcome.violations);
        }
        records.insert(id.clone(), outcome.record);
    }
    (EventStore { records }, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{ClinicalEvent, EncounterKind, Measurement, Position, Sex};

    fn event(code: &str, domain: Domain, date: &str, value: Option<f64>) -> ClinicalEvent {
        ClinicalEvent {
            patient_id: "p".into(),
            domain,
            code: code.into(),
            position: Position::Primary,
            timestamp: NaiveDate::parse_from_str(date, "%Y-%m-%d")
                .unwrap()
                .and_hms_opt(9, 0, 0)
                .unwrap(),
            value: value.map(|v| Measurement {
                value: v,
                unit: "mmol/l".into(),
            }),
            encounter_id: "e1".into(),
            encounter_kind: EncounterKind::Inpatient,
            admission_code: None,
            flags: BTreeSet::new(),
        }
    }

    fn record(birth: &str, death: Option<&str>, events: Vec<ClinicalEvent>) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            birth_date: NaiveDate::parse_from_str(birth, "%Y-%m-%d").unwrap(),
            sex: Sex::Male,
            death_date: death.map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").unwrap()),
            events,
        }
    }

    fn sodium_table() -> RangeTable {
        let mut t = RangeTable::default();
        t.insert(
            "Sodium",
            PhysRange {
                min: 100.0,
                max: 180.0,
                unit: None,
            },
        );
        t
    }

    #[test]
    fn seventeen_at_index_is_flagged() {
        let rec = record(
            "2002-06-01",
            None,
            vec![event("I50.1", Domain::Diagnosis, "2019-05-01", None)],
        );
        let index = NaiveDate::from_ymd_opt(2019, 5, 1).unwrap();
        let out = quality_check(&rec, &RangeTable::default(), &QcPolicy::default(), Some(index));
        assert_eq!(out.violations.len(), 1);
        assert_eq!(out.violations[0].label(), "under-18");
        assert!(out.flagged);
    }

    #[test]
    fn death_one_day_before_admission() {
        let rec = record(
            "1940-01-01",
            Some("2019-04-30"),
            vec![event("I50.1", Domain::Diagnosis, "2019-05-01", None)],
        );
        let out = quality_check(&rec, &RangeTable::default(), &QcPolicy::default(), None);
        assert_eq!(out.violations[0].label(), "death precedes admission");
        assert!(out.flagged);
    }

    #[test]
    fn in_range_record_unchanged() {
        let rec = record(
            "1940-01-01",
            None,
            vec![
                event("I50.1", Domain::Diagnosis, "2019-05-01", None),
                event("Sodium", Domain::Laboratory, "2019-05-01", Some(139.0)),
            ],
        );
        let out = quality_check(&rec, &sodium_table(), &QcPolicy::default(), None);
        assert!(out.violations.is_empty());
        assert!(!out.flagged);
        assert_eq!(out.record, rec);
    }

    #[test]
    fn out_of_range_and_empty_values_dropped() {
        let mut empty = event("Sodium", Domain::Laboratory, "2019-05-02", None);
        empty.flags.insert(EventFlag::EmptyValue);
        let rec = record(
            "1940-01-01",
            None,
            vec![event("SODIUM", Domain::Laboratory, "2019-05-01", Some(1390.0)), empty],
        );
        let out = quality_check(&rec, &sodium_table(), &QcPolicy::default(), None);
        assert_eq!(out.violations.len(), 2);
        assert!(out.record.events.is_empty());
        assert!(!out.flagged);

        let keep = QcPolicy {
            drop_offending_events: false,
            ..QcPolicy::default()
        };
        let out = quality_check(&rec, &sodium_table(), &keep, None);
        assert_eq!(out.record.events.len(), 2);
    }

    #[test]
    fn bundled_ranges_parse() {
        let t = RangeTable::default_ranges();
        assert!(t.get("sodium").is_some());
        assert!(RangeTable::from_toml("[ranges.x]\nmin = 3.0\nmax = 1.0\n").is_err());
    }
}
