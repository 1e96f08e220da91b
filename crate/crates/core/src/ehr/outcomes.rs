use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use super::codes::any_match;
use super::{
    split_dose, ClinicalEvent, CodePattern, Cohort, Domain, EhrError, EncounterKind, EventStore, PatientId,
    PatientRecord, PositionRequirement,
};

/// A medication that must accompany a diagnosis: given during the admission
/// or within `days_after` of its end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicationWithin {
    pub names: Vec<String>,
    #[serde(default)]
    pub days_after: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeCriterion {
    Death,
    Diagnosis {
        patterns: Vec<CodePattern>,
        #[serde(default)]
        position: PositionRequirement,
        /// Admission types that count; empty means any.
        #[serde(default)]
        encounter_kinds: Vec<EncounterKind>,
        /// Minimum span of the admission holding the diagnosis.
        #[serde(default)]
        min_admission_hours: Option<f64>,
        #[serde(default)]
        with_medication: Option<MedicationWithin>,
    },
    Medication {
        names: Vec<String>,
    },
    Procedure {
        patterns: Vec<CodePattern>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum OutcomeExclusion {
    /// Ignore admissions carrying any of these admission codes.
    AdmissionCode { codes: Vec<String> },
    /// Ignore admissions shorter than `max_hours` containing a matching procedure.
    ShortAdmissionWithProcedure {
        patterns: Vec<CodePattern>,
        #[serde(default = "default_max_hours")]
        max_hours: f64,
    },
}

fn default_max_hours() -> f64 {
    48.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDefinition {
    pub name: String,
    pub criteria: Vec<OutcomeCriterion>,
    #[serde(default)]
    pub exclusions: Vec<OutcomeExclusion>,
}

impl OutcomeDefinition {
    pub fn validate(&self) -> Result<(), EhrError> {
        if self.name.trim().is_empty() {
            return Err(EhrError::InvalidOutcome("outcome name is empty".into()));
        }
        if self.criteria.is_empty() {
            return Err(EhrError::InvalidOutcome(format!(
                "outcome '{}' has no criteria",
                self.name
            )));
        }
        Ok(())
    }

    pub fn is_mortality(&self) -> bool {
        self.criteria.iter().any(|c| matches!(c, OutcomeCriterion::Death))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSet {
    #[serde(default)]
    pub outcomes: Vec<OutcomeDefinition>,
}

impl OutcomeSet {
    pub fn from_toml(text: &str) -> Result<Self, EhrError> {
        let set: OutcomeSet = toml::from_str(text).map_err(|e| EhrError::InvalidOutcome(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), EhrError> {
        let mut seen = BTreeSet::new();
        for def in &self.outcomes {
            def.validate()?;
            if !seen.insert(def.name.as_str()) {
                return Err(EhrError::InvalidOutcome(format!("duplicate outcome '{}'", def.name)));
            }
        }
        Ok(())
    }

    /// Mortality, recurrent stroke, bleeding and heart-failure readmission.
    pub fn defaults() -> Self {
        Self::from_toml(include_str!("../../config/outcomes.toml")).expect("bundled outcomes parse")
    }

    pub fn get(&self, name: &str) -> Option<&OutcomeDefinition> {
        self.outcomes.iter().find(|d| d.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEvent {
    pub patient_id: PatientId,
    pub outcome: String,
    pub index_date: NaiveDate,
    #[serde(default)]
    pub event_date: Option<NaiveDate>,
    pub censor_date: NaiveDate,
}

impl OutcomeEvent {
    pub fn observed(&self) -> bool {
        self.event_date.is_some()
    }

    /// Follow-up in days from index to event or censoring. Same-day
    /// durations are reported as half a day so every subject has positive time.
    pub fn duration_days(&self) -> f64 {
        let end = self.event_date.unwrap_or(self.censor_date);
        let days = (end - self.index_date).num_days() as f64;
        if days <= 0.0 {
            0.5
        } else {
            days
        }
    }
}

/// First qualifying event strictly after each member's index date, else
/// censoring at the last recorded activity.
pub fn derive_outcomes(cohort: &Cohort, store: &EventStore, def: &OutcomeDefinition) -> Vec<OutcomeEvent> {
    cohort
        .members
        .iter()
        .filter_map(|m| {
            let record = store.get(&m.patient_id)?;
            Some(derive_one(record, m.index_date, def))
        })
        .collect()
}

fn derive_one(record: &PatientRecord, index_date: NaiveDate, def: &OutcomeDefinition) -> OutcomeEvent {
    let mut last_activity = record.last_activity().unwrap_or(index_date).max(index_date);
    if def.is_mortality() {
        if let Some(d) = record.death_date {
            last_activity = last_activity.max(d);
        }
    }

    let coded = record
        .events
        .iter()
        .filter(|e| e.date() > index_date)
        .find(|e| {
            def.criteria.iter().any(|c| event_qualifies(record, e, c))
                && !def.exclusions.iter().any(|x| excluded(record, e, x))
        })
        .map(|e| e.date());
    let death = if def.is_mortality() {
        record.death_date.filter(|d| *d > index_date)
    } else {
        None
    };
    let event_date = match (coded, death) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let censor_date = match event_date {
        Some(d) => last_activity.max(d),
        None => last_activity,
    };
    OutcomeEvent {
        patient_id: record.patient_id.clone(),
        outcome: def.name.clone(),
        index_date,
        event_date,
        censor_date,
    }
}

fn medication_named(event: &ClinicalEvent, names: &[String]) -> bool {
    event.domain == Domain::Medication && {
        let (name, _) = split_dose(&event.code);
        names.iter().any(|n| n.trim().eq_ignore_ascii_case(name))
    }
}

fn event_qualifies(record: &PatientRecord, event: &ClinicalEvent, criterion: &OutcomeCriterion) -> bool {
    match criterion {
        OutcomeCriterion::Death => false,
        OutcomeCriterion::Diagnosis {
            patterns,
            position,
            encounter_kinds,
            min_admission_hours,
            with_medication,
        } => {
            if event.domain != Domain::Diagnosis
                || !position.admits(event.position)
                || !any_match(patterns, &event.code)
            {
                return false;
            }
            if !encounter_kinds.is_empty() && !encounter_kinds.contains(&event.encounter_kind) {
                return false;
            }
            if let Some(min) = min_admission_hours {
                if record.encounter_hours(&event.encounter_id) < *min {
                    return false;
                }
            }
            match with_medication {
                None => true,
                Some(w) => {
                    let start = record.encounter_start(&event.encounter_id).unwrap_or(event.timestamp);
                    let end = record
                        .encounter(&event.encounter_id)
                        .map(|e| e.timestamp)
                        .max()
                        .unwrap_or(event.timestamp)
                        + Duration::days(w.days_after);
                    record
                        .events
                        .iter()
                        .any(|m| m.timestamp >= start && m.timestamp <= end && medication_named(m, &w.names))
                }
            }
        }
        OutcomeCriterion::Medication { names } => medication_named(event, names),
        OutcomeCriterion::Procedure { patterns } => {
            event.domain == Domain::Procedure && any_match(patterns, &event.code)
        }
    }
}

fn excluded(record: &PatientRecord, event: &ClinicalEvent, exclusion: &OutcomeExclusion) -> bool {
    match exclusion {
        OutcomeExclusion::AdmissionCode { codes } => record.encounter(&event.encounter_id).any(|e| {
            e.admission_code
                .as_deref()
                .is_some_and(|a| codes.iter().any(|c| c.trim() == a.trim()))
        }),
        OutcomeExclusion::ShortAdmissionWithProcedure { patterns, max_hours } => {
            record.encounter_hours(&event.encounter_id) < *max_hours
                && record
                    .encounter(&event.encounter_id)
                    .any(|e| e.domain == Domain::Procedure && any_match(patterns, &e.code))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{CohortMember, Position, Sex};
    use chrono::NaiveDateTime;
    use std::collections::BTreeMap;

    fn ev(code: &str, domain: Domain, pos: Position, ts: &str, enc: &str) -> ClinicalEvent {
        ClinicalEvent {
            patient_id: "p".into(),
            domain,
            code: code.into(),
            position: pos,
            timestamp: NaiveDateTime::parse_from_str(ts, "%Y-%m-%d %H:%M").unwrap(),
            value: None,
            encounter_id: enc.into(),
            encounter_kind: EncounterKind::Inpatient,
            admission_code: None,
            flags: Default::default(),
        }
    }

    fn setup(events: Vec<ClinicalEvent>, death: Option<NaiveDate>) -> (Cohort, EventStore) {
        let index = events[0].clone();
        let mut records = BTreeMap::new();
        records.insert(
            PatientId::from("p"),
            PatientRecord {
                patient_id: "p".into(),
                birth_date: NaiveDate::from_ymd_opt(1940, 1, 1).unwrap(),
                sex: Sex::Male,
                death_date: death,
                events,
            },
        );
        let cohort = Cohort {
            label: "t".into(),
            members: vec![CohortMember {
                patient_id: "p".into(),
                index_date: index.date(),
                index_timestamp: index.timestamp,
                index_encounter: index.encounter_id.clone(),
                index_code: index.code.clone(),
            }],
            provenance: vec![],
            warnings: vec![],
        };
        (cohort, EventStore { records })
    }

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn recurrent_stroke_event() {
        let defs = OutcomeSet::defaults();
        let def = defs.get("recurrent_stroke").unwrap();
        let (c, s) = setup(
            vec![
                ev("I63.4", Domain::Diagnosis, Position::Primary, "2019-01-01 10:00", "a"),
                ev("I63.9", Domain::Diagnosis, Position::Primary, "2019-03-01 10:00", "b"),
                ev("Z00", Domain::Diagnosis, Position::Primary, "2019-06-01 10:00", "c"),
            ],
            None,
        );
        let out = derive_outcomes(&c, &s, def);
        assert_eq!(out[0].event_date, Some(date("2019-03-01")));
        assert_eq!(out[0].censor_date, date("2019-06-01"));
    }

    #[test]
    fn transfer_admission_ignored() {
        let defs = OutcomeSet::defaults();
        let def = defs.get("recurrent_stroke").unwrap();
        let mut transfer = ev("I63.9", Domain::Diagnosis, Position::Primary, "2019-03-01 10:00", "b");
        transfer.admission_code = Some("81".into());
        let (c, s) = setup(
            vec![
                ev("I63.4", Domain::Diagnosis, Position::Primary, "2019-01-01 10:00", "a"),
                transfer,
            ],
            None,
        );
        let out = derive_outcomes(&c, &s, def);
        assert_eq!(out[0].event_date, None);
        assert_eq!(out[0].censor_date, date("2019-03-01"));
    }

    #[test]
    fn bleeding_from_k920() {
        let defs = OutcomeSet::defaults();
        let (c, s) = setup(
            vec![
                ev("I63.4", Domain::Diagnosis, Position::Primary, "2019-01-01 10:00", "a"),
                ev("K92.0", Domain::Diagnosis, Position::Primary, "2019-02-01 10:00", "b"),
            ],
            None,
        );
        let out = derive_outcomes(&c, &s, defs.get("bleeding").unwrap());
        assert_eq!(out[0].event_date, Some(date("2019-02-01")));
        let (c, s) = setup(
            vec![
                ev("I63.4", Domain::Diagnosis, Position::Primary, "2019-01-01 10:00", "a"),
                ev(
                    "Fresh frozen plasma",
                    Domain::Medication,
                    Position::NotApplicable,
                    "2019-02-03 10:00",
                    "b",
                ),
            ],
            None,
        );
        let out = derive_outcomes(&c, &s, defs.get("bleeding").unwrap());
        assert_eq!(out[0].event_date, Some(date("2019-02-03")));
    }

    #[test]
    fn censored_without_events_and_mortality() {
        let defs = OutcomeSet::defaults();
        let events = vec![
            ev("I50.1", Domain::Diagnosis, Position::Primary, "2019-01-01 10:00", "a"),
            ev("E11", Domain::Diagnosis, Position::Primary, "2019-04-01 10:00", "b"),
        ];
        let (c, s) = setup(events.clone(), None);
        let out = derive_outcomes(&c, &s, defs.get("mortality").unwrap());
        assert!(!out[0].observed());
        assert_eq!(out[0].censor_date, date("2019-04-01"));
        assert_eq!(out[0].duration_days(), 90.0);

        let (c, s) = setup(events, Some(date("2019-05-01")));
        let out = derive_outcomes(&c, &s, defs.get("mortality").unwrap());
        assert_eq!(out[0].event_date, Some(date("2019-05-01")));
        assert_eq!(out[0].censor_date, date("2019-05-01"));
    }

    #[test]
    fn hf_readmission_rules() {
        let defs = OutcomeSet::defaults();
        let def = defs.get("hf_readmission").unwrap();
        // one-day admission does not count
        let (c, s) = setup(
            vec![
                ev("I50.1", Domain::Diagnosis, Position::Primary, "2019-01-01 10:00", "a"),
                ev("I50.1", Domain::Diagnosis, Position::Primary, "2019-03-01 10:00", "b"),
                ev("R06", Domain::Diagnosis, Position::Secondary, "2019-03-02 09:00", "b"),
            ],
            None,
        );
        assert_eq!(derive_outcomes(&c, &s, def)[0].event_date, None);
        // secondary HF with IV furosemide in a 3-day admission counts
        let (c, s) = setup(
            vec![
                ev("I50.1", Domain::Diagnosis, Position::Primary, "2019-01-01 10:00", "a"),
                ev("J18", Domain::Diagnosis, Position::Primary, "2019-03-01 10:00", "b"),
                ev("I50.0", Domain::Diagnosis, Position::Secondary, "2019-03-01 11:00", "b"),
                ev(
                    "Furosemide IV",
                    Domain::Medication,
                    Position::NotApplicable,
                    "2019-03-02 09:00",
                    "b",
                ),
                ev("R06", Domain::Diagnosis, Position::Secondary, "2019-03-04 09:00", "b"),
            ],
            None,
        );
        assert_eq!(derive_outcomes(&c, &s, def)[0].event_date, Some(date("2019-03-01")));
    }

    #[test]
    fn duplicate_names_rejected() {
        let text = "[[outcomes]]\nname = \"a\"\ncriteria = [{kind = \"death\"}]\n[[outcomes]]\nname = \"a\"\ncriteria = [{kind = \"death\"}]\n";
        assert!(OutcomeSet::from_toml(text).is_err());
        assert!(OutcomeSet::from_toml(
            "[[outcomes]]\nname = \"b\"\ncriteria = [{kind = \"procedure\", patterns = [\"K*5*\"]}]\n"
        )
        .is_err());
    }
}
