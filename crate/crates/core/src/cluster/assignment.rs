use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ClusterError;
use crate::ehr::PatientId;

/// Cluster membership of one patient. Clusters are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClusterLabel {
    Cluster(u32),
    Unclustered,
}

impl ClusterLabel {
    pub fn cluster(self) -> Option<u32> {
        match self {
            ClusterLabel::Cluster(c) => Some(c),
            ClusterLabel::Unclustered => None,
        }
    }

    pub fn is_clustered(self) -> bool {
        matches!(self, ClusterLabel::Cluster(_))
    }
}

impl fmt::Display for ClusterLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterLabel::Cluster(c) => write!(f, "{c}"),
            ClusterLabel::Unclustered => f.write_str("unclustered"),
        }
    }
}

impl FromStr for ClusterLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("unclustered") {
            return Ok(ClusterLabel::Unclustered);
        }
        match t.parse::<u32>() {
            Ok(c) if c >= 1 => Ok(ClusterLabel::Cluster(c)),
            _ => Err(t.to_string()),
        }
    }
}

impl Serialize for ClusterLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ClusterLabel::Cluster(c) => s.serialize_u32(*c),
            ClusterLabel::Unclustered => s.serialize_str("unclustered"),
        }
    }
}

impl<'de> Deserialize<'de> for ClusterLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            N(u32),
            S(String),
        }
        match Wire::deserialize(d)? {
            Wire::N(0) => Err(serde::de::Error::custom("cluster labels start at 1")),
            Wire::N(c) => Ok(ClusterLabel::Cluster(c)),
            Wire::S(s) => s
                .parse()
                .map_err(|v| serde::de::Error::custom(format!("invalid cluster label '{v}'"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub algorithm: String,
    #[serde(default)]
    pub preprocessing: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

/// One experiment's partition of the cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub experiment_id: String,
    pub labels: BTreeMap<PatientId, ClusterLabel>,
    pub k: u32,
    pub provenance: Provenance,
}

impl ClusterAssignment {
    /// Validated assignment: labels must be exactly `1..=k` for some k >= 1.
    pub fn new(
        experiment_id: impl Into<String>,
        labels: BTreeMap<PatientId, ClusterLabel>,
        provenance: Provenance,
    ) -> Result<Self, ClusterError> {
        let used: BTreeSet<u32> = labels.values().filter_map(|l| l.cluster()).collect();
        if used.is_empty() {
            return Err(ClusterError::NoClusters);
        }
        let k = used.len();
        if used.iter().copied().ne(1..=k as u32) {
            return Err(ClusterError::NonContiguous {
                found: used.into_iter().collect(),
                expected: k,
            });
        }
        Ok(Self {
            experiment_id: experiment_id.into(),
            labels,
            k: k as u32,
            provenance,
        })
    }

    /// Assignment over a fixed label space `1..=k` in which some clusters
    /// may be empty, e.g. labels predicted by a model of another assignment.
    pub fn within(
        experiment_id: impl Into<String>,
        labels: BTreeMap<PatientId, ClusterLabel>,
        k: u32,
        provenance: Provenance,
    ) -> Result<Self, ClusterError> {
        if k == 0 {
            return Err(ClusterError::ZeroClusters);
        }
        if let Some(bad) = labels.values().filter_map(|l| l.cluster()).find(|c| *c == 0 || *c > k) {
            return Err(ClusterError::NonContiguous {
                found: vec![bad],
                expected: k as usize,
            });
        }
        Ok(Self {
            experiment_id: experiment_id.into(),
            labels,
            k,
            provenance,
        })
    }

    /// Renumbers clusters to `1..=k` preserving their relative order.
    pub fn compacted(
        experiment_id: impl Into<String>,
        labels: BTreeMap<PatientId, ClusterLabel>,
        provenance: Provenance,
    ) -> Result<Self, ClusterError> {
        let used: BTreeSet<u32> = labels.values().filter_map(|l| l.cluster()).collect();
        let map: BTreeMap<u32, u32> = used.iter().enumerate().map(|(i, c)| (*c, i as u32 + 1)).collect();
        let labels = labels
            .into_iter()
            .map(|(p, l)| {
                let l = match l {
                    ClusterLabel::Cluster(c) => ClusterLabel::Cluster(map[&c]),
                    ClusterLabel::Unclustered => ClusterLabel::Unclustered,
                };
                (p, l)
            })
            .collect();
        Self::new(experiment_id, labels, provenance)
    }

    /// Builds an assignment from zero-based labels aligned with `ids`.
    pub fn from_indices(
        experiment_id: impl Into<String>,
        ids: &[PatientId],
        labels: &[usize],
        provenance: Provenance,
    ) -> Result<Self, ClusterError> {
        let map = ids
            .iter()
            .zip(labels)
            .map(|(p, l)| (p.clone(), ClusterLabel::Cluster(*l as u32 + 1)))
            .collect();
        Self::compacted(experiment_id, map, provenance)
    }

    pub fn label(&self, id: &PatientId) -> Option<ClusterLabel> {
        self.labels.get(id).copied()
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = &PatientId> {
        self.labels.keys()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Members of each cluster, by label.
    pub fn clusters(&self) -> BTreeMap<u32, Vec<PatientId>> {
        let mut out: BTreeMap<u32, Vec<PatientId>> = (1..=self.k).map(|c| (c, Vec::new())).collect();
        for (p, l) in &self.labels {
            if let ClusterLabel::Cluster(c) = l {
                out.entry(*c).or_default().push(p.clone());
            }
        }
        out
    }

    pub fn sizes(&self) -> BTreeMap<u32, usize> {
        self.clusters().into_iter().map(|(c, m)| (c, m.len())).collect()
    }

    pub fn unclustered(&self) -> Vec<PatientId> {
        self.labels
            .iter()
            .filter(|(_, l)| !l.is_clustered())
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Same labels restricted to `ids`; clusters left empty are dropped and
    /// the rest renumbered.
    pub fn restrict(&self, ids: &BTreeSet<PatientId>) -> Result<Self, ClusterError> {
        let labels = self
            .labels
            .iter()
            .filter(|(p, _)| ids.contains(*p))
            .map(|(p, l)| (p.clone(), *l))
            .collect();
        Self::compacted(self.experiment_id.clone(), labels, self.provenance.clone())
    }

    /// Relabels clusters; `mapping` sends each old label to its new one.
    pub fn relabel(&self, mapping: &BTreeMap<u32, ClusterLabel>) -> Result<Self, ClusterError> {
        let labels = self
            .labels
            .iter()
            .map(|(p, l)| {
                let l = match l {
                    ClusterLabel::Cluster(c) => mapping.get(c).copied().unwrap_or(*l),
                    ClusterLabel::Unclustered => ClusterLabel::Unclustered,
                };
                (p.clone(), l)
            })
            .collect();
        Self::compacted(self.experiment_id.clone(), labels, self.provenance.clone())
    }
}

/// Reads `patient_id,<experiment_id>` rows. When `cohort` is given every
/// member must appear. Non-contiguous labels are an error unless `compact`.
pub fn read_assignment_csv<R: Read>(
    reader: R,
    cohort: Option<&[PatientId]>,
    compact: bool,
) -> Result<ClusterAssignment, ClusterError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| ClusterError::Format(e.to_string()))?.clone();
    if header.len() != 2 || header.get(0) != Some("patient_id") {
        return Err(ClusterError::Format(
            "expected header 'patient_id,<experiment_id>'".into(),
        ));
    }
    let experiment_id = header.get(1).unwrap_or_default().to_string();
    let mut labels = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ClusterError::Format(e.to_string()))?;
        let line = i + 2;
        let pid = PatientId::new(rec.get(0).unwrap_or_default());
        let raw = rec.get(1).unwrap_or_default();
        let label: ClusterLabel = raw
            .parse()
            .map_err(|value| ClusterError::InvalidLabel { value, line })?;
        if labels.insert(pid.clone(), label).is_some() {
            return Err(ClusterError::DuplicatePatient(pid.0));
        }
    }
    if let Some(cohort) = cohort {
        let missing: Vec<String> = cohort
            .iter()
            .filter(|p| !labels.contains_key(*p))
            .map(|p| p.0.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ClusterError::MissingPatients(missing));
        }
        let members: BTreeSet<&PatientId> = cohort.iter().collect();
        labels.retain(|p, _| members.contains(p));
    }
    let provenance = Provenance {
        algorithm: "imported".into(),
        ..Provenance::default()
    };
    if compact {
        ClusterAssignment::compacted(experiment_id, labels, provenance)
    } else {
        ClusterAssignment::new(experiment_id, labels, provenance)
    }
}

pub fn write_assignment_csv<W: Write>(assignment: &ClusterAssignment, writer: W) -> Result<(), ClusterError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["patient_id", assignment.experiment_id.as_str()])
        .map_err(|e| ClusterError::Format(e.to_string()))?;
    for (p, l) in &assignment.labels {
        w.write_record([p.as_str(), &l.to_string()])
            .map_err(|e| ClusterError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
