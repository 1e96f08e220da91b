use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{split_dose, ClinicalEvent, Domain, EhrError, EventFlag, EventStore, PatientRecord};

/// Name variants keyed by canonical name, e.g. `Amikacin = ["AMIK", "ARM"]`.
///
/// Lookups are case-insensitive and canonical names map to themselves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, Vec<String>>", into = "BTreeMap<String, Vec<String>>")]
pub struct SynonymMap {
    canonical: BTreeMap<String, Vec<String>>,
    lookup: BTreeMap<String, String>,
}

impl SynonymMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, canonical: &str, variants: &[&str]) {
        let canonical = canonical.trim().to_string();
        let entry = self.canonical.entry(canonical.clone()).or_default();
        self.lookup.insert(canonical.to_lowercase(), canonical.clone());
        for v in variants {
            entry.push(v.to_string());
            self.lookup.insert(v.trim().to_lowercase(), canonical.clone());
        }
    }

    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.lookup.get(&name.trim().to_lowercase()).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }
}

impl From<BTreeMap<String, Vec<String>>> for SynonymMap {
    fn from(value: BTreeMap<String, Vec<String>>) -> Self {
        let mut map = SynonymMap::new();
        for (canonical, variants) in &value {
            let refs: Vec<&str> = variants.iter().map(String::as_str).collect();
            map.add(canonical, &refs);
        }
        map
    }
}

impl From<SynonymMap> for BTreeMap<String, Vec<String>> {
    fn from(value: SynonymMap) -> Self {
        value.canonical
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitConversion {
    pub from: String,
    pub to: String,
    pub factor: f64,
}

/// Canonical unit per measurement name plus scale factors between units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitMap {
    #[serde(default)]
    pub canonical: BTreeMap<String, String>,
    #[serde(default)]
    pub conversions: Vec<UnitConversion>,
}

impl UnitMap {
    pub fn canonical_unit(&self, name: &str) -> Option<&str> {
        let key = name.trim().to_lowercase();
        self.canonical
            .iter()
            .find(|(k, _)| k.to_lowercase() == key)
            .map(|(_, v)| v.as_str())
    }

    /// Scale factor taking a value in `from` to `to`; identical units give 1.
    pub fn factor(&self, from: &str, to: &str) -> Option<f64> {
        if from.trim().eq_ignore_ascii_case(to.trim()) {
            return Some(1.0);
        }
        self.conversions.iter().find_map(|c| {
            if c.from.eq_ignore_ascii_case(from.trim()) && c.to.eq_ignore_ascii_case(to.trim()) {
                Some(c.factor)
            } else if c.to.eq_ignore_ascii_case(from.trim()) && c.from.eq_ignore_ascii_case(to.trim()) {
                Some(1.0 / c.factor)
            } else {
                None
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardizationConfig {
    #[serde(default)]
    pub synonyms: SynonymMap,
    #[serde(default)]
    pub units: UnitMap,
}

impl StandardizationConfig {
    pub fn from_toml(text: &str) -> Result<Self, EhrError> {
        let cfg: StandardizationConfig = toml::from_str(text).map_err(|e| EhrError::Config(e.to_string()))?;
        if let Some(c) = cfg
            .units
            .conversions
            .iter()
            .find(|c| !(c.factor.is_finite() && c.factor > 0.0))
        {
            return Err(EhrError::Config(format!(
                "conversion {} -> {} needs a positive factor",
                c.from, c.to
            )));
        }
        Ok(cfg)
    }

    pub fn default_config() -> Self {
        Self::from_toml(include_str!("../../config/standardization.toml"))
            .expect("bundled standardization config parses")
    }
}

/// Canonicalizes the name of laboratory, demographic and medication events
/// and rescales measured values into the canonical unit.
///
/// Diagnosis, procedure and administrative codes pass through untouched.
pub fn standardize(event: &ClinicalEvent, synonyms: &SynonymMap, units: &UnitMap) -> ClinicalEvent {
    let mut out = event.clone();
    match event.domain {
        Domain::Medication => {
            let (name, dose) = split_dose(&event.code);
            match synonyms.canonical(name) {
                Some(canonical) => {
                    out.code = match dose {
                        Some(d) => format!("{canonical} {d}"),
                        None => canonical.to_string(),
                    };
                }
                None => {
                    out.flags.insert(EventFlag::NonCanonical);
                }
            }
        }
        Domain::Laboratory | Domain::Demographic => {
            match synonyms.canonical(&event.code) {
                Some(canonical) => out.code = canonical.to_string(),
                None => {
                    out.flags.insert(EventFlag::NonCanonical);
                }
            }
            if let (Some(m), Some(target)) = (out.value.as_mut(), units.canonical_unit(&out.code)) {
                match units.factor(&m.unit, target) {
                    Some(f) => {
                        m.value *= f;
                        m.unit = target.to_string();
                    }
                    None => {
                        out.flags.insert(EventFlag::UnitUnconvertible);
                    }
                }
            }
        }
        Domain::Diagnosis | Domain::Procedure | Domain::Administrative => {}
    }
    out
}

pub fn standardize_store(store: &EventStore, config: &StandardizationConfig) -> EventStore {
    let records = store
        .records
        .iter()
        .map(|(id, rec)| {
            let events = rec
                .events
                .iter()
                .map(|e| standardize(e, &config.synonyms, &config.units))
                .collect();
            (id.clone(), PatientRecord { events, ..rec.clone() })
        })
        .collect();
    EventStore { records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{EncounterKind, Measurement, Position};
    use std::collections::BTreeSet;

    fn lab(code: &str, value: f64, unit: &str) -> ClinicalEvent {
        ClinicalEvent {
            patient_id: "p".into(),
            domain: Domain::Laboratory,
            code: code.into(),
            position: Position::NotApplicable,
            timestamp: chrono::NaiveDate::from_ymd_opt(2019, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            value: Some(Measurement {
                value,
                unit: unit.into(),
            }),
            encounter_id: "e".into(),
            encounter_kind: EncounterKind::Inpatient,
            admission_code: None,
            flags: BTreeSet::new(),
        }
    }

    fn maps() -> (SynonymMap, UnitMap) {
        let mut s = SynonymMap::new();
        s.add("Amikacin", &["AMIKACIN", "AMIK", "ARM", "AMIKCAIN LEVEL"]);
        s.add("Albumin", &["ALB"]);
        s.add("Spironolactone", &["SPIRO"]);
        let mut u = UnitMap::default();
        u.canonical.insert("Albumin".into(), "mg/dl".into());
        u.conversions.push(UnitConversion {
            from: "g/l".into(),
            to: "mg/dl".into(),
            factor: 100.0,
        });
        (s, u)
    }

    #[test]
    fn synonym_canonicalized() {
        let (s, u) = maps();
        let out = standardize(&lab("AMIK", 3.0, "mg/l"), &s, &u);
        assert_eq!(out.code, "Amikacin");
        assert!(out.flags.is_empty());
    }

    #[test]
    fn unit_rescaled() {
        let (s, u) = maps();
        let out = standardize(&lab("ALB", 1.0, "g/l"), &s, &u);
        let m = out.value.unwrap();
        assert_eq!(m.value, 100.0);
        assert_eq!(m.unit, "mg/dl");
    }

    #[test]
    fn canonical_event_unchanged() {
        let (s, u) = maps();
        let e = lab("Albumin", 3.5, "mg/dl");
        assert_eq!(standardize(&e, &s, &u), e);
    }

    #[test]
    fn flags_unknown_name_and_unit() {
        let (s, u) = maps();
        let out = standardize(&lab("Mystery", 1.0, "x"), &s, &u);
        assert!(out.flags.contains(&EventFlag::NonCanonical));
        let out = standardize(&lab("Albumin", 1.0, "furlong"), &s, &u);
        assert!(out.flags.contains(&EventFlag::UnitUnconvertible));
        assert_eq!(out.value.unwrap().value, 1.0);
    }

    #[test]
    fn medication_dose_kept() {
        let (s, u) = maps();
        let mut e = lab("SPIRO 25 MG", 0.0, "");
        e.domain = Domain::Medication;
        e.value = None;
        let out = standardize(&e, &s, &u);
        assert_eq!(out.code, "Spironolactone 25mg");
        assert_eq!(standardize(&out, &s, &u), out);
    }

    #[test]
    fn bundled_config_parses() {
        let cfg = StandardizationConfig::default_config();
        assert_eq!(cfg.synonyms.canonical("amik"), Some("Amikacin"));
        assert_eq!(cfg.units.factor("g/l", "mg/dl"), Some(100.0));
    }
}
