use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use stratify_core::cluster::{ClusterAssignment, KSelectionReport};
use stratify_core::enrichment::EnrichmentReport;
use stratify_core::metacluster::MetaClusterResult;
use stratify_core::screening::{ScatterTable, ScoreVariant, ScreeningMatrix, ScreeningScore};
use stratify_core::survival::KmByCluster;

use crate::config::RunConfig;
use crate::pipeline::{CohortArtifact, CoxTable, SurrogateArtifact};
use crate::store::{ExperimentEntry, Manifest, Store};
use crate::Result;

/// Artifact names served per experiment.
pub const EXPERIMENT_ARTIFACTS: [&str; 6] = ["assignment", "km", "cox", "enrichment", "surrogate", "screening"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentBundle {
    pub entry: ExperimentEntry,
    pub assignment: Option<ClusterAssignment>,
    pub evaluated_assignment: Option<ClusterAssignment>,
    pub k_selection: Option<KSelectionReport>,
    pub km: Option<BTreeMap<String, KmByCluster>>,
    pub cox: Option<CoxTable>,
    pub enrichment: Option<EnrichmentReport>,
    pub surrogate: Option<SurrogateArtifact>,
    pub screening: Option<Vec<ScreeningScore>>,
}

impl ExperimentBundle {
    /// Best score of this experiment for `outcome`, if screened.
    pub fn top_score(&self, outcome: &str, variant: ScoreVariant) -> Option<f64> {
        self.screening
            .as_ref()?
            .iter()
            .filter(|s| s.outcome == outcome)
            .filter_map(|s| s.value(variant))
            .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
    }
}

/// A stored run with every artifact loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub manifest: Manifest,
    pub config: RunConfig,
    pub cohort: Option<CohortArtifact>,
    pub experiments: Vec<ExperimentBundle>,
    pub meta: Option<MetaClusterResult>,
    pub screening: Option<ScreeningMatrix>,
    pub scatter: Option<ScatterTable>,
}

fn load<T: serde::de::DeserializeOwned>(
    store: &Store,
    map: &BTreeMap<String, String>,
    name: &str,
) -> Result<Option<T>> {
    map.get(name).map(|h| store.get_json(h)).transpose()
}

impl ReportBundle {
    pub fn load(store: &Store, run_id: &str) -> Result<Self> {
        let manifest = store.manifest(run_id)?;
        let config = store.get_json(&manifest.config)?;
        let mut experiments = Vec::new();
        for e in &manifest.experiments {
            let a = &e.artifacts;
            experiments.push(ExperimentBundle {
                entry: e.clone(),
                assignment: load(store, a, "assignment")?,
                evaluated_assignment: load(store, a, "evaluated_assignment")?,
                k_selection: load(store, a, "k_selection")?,
                km: load(store, a, "km")?,
                cox: load(store, a, "cox")?,
                enrichment: load(store, a, "enrichment")?,
                surrogate: load(store, a, "surrogate")?,
                screening: load(store, a, "screening")?,
            });
        }
        let a = &manifest.artifacts;
        Ok(Self {
            cohort: load(store, a, "cohort")?,
            meta: load(store, a, "meta")?,
            screening: load(store, a, "screening")?,
            scatter: load(store, a, "scatter")?,
            experiments,
            config,
            manifest,
        })
    }

    pub fn experiment(&self, id: &str) -> Option<&ExperimentBundle> {
        self.experiments.iter().find(|e| e.entry.experiment_id == id)
    }

    pub fn primary_outcome(&self) -> Option<String> {
        self.config
            .screening
            .primary_outcome
            .clone()
            .or_else(|| self.screening.as_ref().and_then(|s| s.outcomes.first().cloned()))
    }

    /// Experiments by best screening score on the primary outcome, highest
    /// first; unscreened experiments last, in manifest order.
    pub fn experiments_by_score(&self) -> Vec<&ExperimentBundle> {
        let variant = self.config.screening.variant;
        let outcome = self.primary_outcome();
        let score = |e: &ExperimentBundle| outcome.as_deref().and_then(|o| e.top_score(o, variant));
        let mut out: Vec<&ExperimentBundle> = self.experiments.iter().collect();
        out.sort_by(|a, b| match (score(a), score(b)) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
        out
    }
}
