//! Run configuration: data source, featurization, the experiment grid and
//! every evaluation setting, hashed over its canonical JSON form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stratify_core::cluster::{BootstrapOptions, KMeansOptions};
use stratify_core::curation::{CurationAction, FeatureRule};
use stratify_core::ehr::{CohortOptions, OutcomeSet};
use stratify_core::enrichment::EnrichmentOptions;
use stratify_core::featurize::{Encoding, FeaturizeConfig};
use stratify_core::metacluster::MetaOptions;
use stratify_core::screening::{rules_hash, ScoreVariant, ScreeningOptions};
use stratify_core::surrogate::TreeOptions;
use stratify_core::survival::CoxOptions;
use stratify_core::synthgen::SynthSpec;

use crate::{Result, WorkbenchError, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
    },
    Files {
        events: PathBuf,
        demographics: PathBuf,
        /// Cohort spec TOML.
        cohort: PathBuf,
        /// Outcome definitions TOML; the bundled definitions when absent.
        #[serde(default)]
        outcomes: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Algorithm {
    Kmeans(KMeansOptions),
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::Kmeans(_) => "kmeans",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum KPolicy {
    Fixed {
        values: Vec<usize>,
    },
    /// One experiment per selected k (best and, when close, runner-up).
    Bootstrap(BootstrapOptions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub encodings: Vec<Encoding>,
    pub algorithms: Vec<Algorithm>,
    pub k: KPolicy,
    /// Externally produced assignment files (`patient_id,label`).
    pub imports: Vec<PathBuf>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            encodings: vec![Encoding::OneHot],
            algorithms: vec![Algorithm::Kmeans(KMeansOptions::default())],
            k: KPolicy::Fixed { values: vec![3] },
            imports: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub enabled: bool,
    /// Evaluate each selected consensus partition as its own experiment.
    pub evaluate_consensus: bool,
    #[serde(flatten)]
    pub options: MetaOptions,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            evaluate_consensus: true,
            options: MetaOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurvivalConfig {
    pub cox: CoxOptions,
    /// Clusters with fewer survival records get no KM curve.
    pub km_min_size: usize,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            cox: CoxOptions::default(),
            km_min_size: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub folds: usize,
    pub tree: TreeOptions,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            tree: TreeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreeningConfig {
    pub surrogate_scoring: bool,
    /// Ranking used by reports; defaults to the first outcome.
    pub primary_outcome: Option<String>,
    pub variant: ScoreVariant,
    /// Outcomes on the axes of the scatter table.
    pub scatter: Option<(String, String)>,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            surrogate_scoring: true,
            primary_outcome: None,
            variant: ScoreVariant::Average,
            scatter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub data: DataSource,
    pub cohort_options: CohortOptions,
    pub featurize: FeaturizeConfig,
    pub grid: ExperimentGrid,
    pub meta: MetaConfig,
    pub enrichment: EnrichmentOptions,
    pub survival: SurvivalConfig,
    pub surrogate: SurrogateConfig,
    pub screening: ScreeningConfig,
    /// Inline outcome definitions; override the data source's.
    pub outcomes: Option<OutcomeSet>,
    /// Derived boolean columns added to every matrix.
    pub feature_rules: Vec<FeatureRule>,
    /// Curation actions applied so far, oldest first.
    pub curation: Vec<CurationAction>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "run".into(),
            seed: 1,
            data: DataSource::Synthetic {
                spec: SynthSpec::default(),
            },
            cohort_options: CohortOptions::default(),
            featurize: FeaturizeConfig::default(),
            grid: ExperimentGrid::default(),
            meta: MetaConfig::default(),
            enrichment: EnrichmentOptions::default(),
            survival: SurvivalConfig::default(),
            surrogate: SurrogateConfig::default(),
            screening: ScreeningConfig::default(),
            outcomes: None,
            feature_rules: Vec::new(),
            curation: Vec::new(),
        }
    }
}

/// What the screening-rule hash covers.
#[derive(Serialize)]
struct ScreeningRules<'a> {
    outcomes: &'a OutcomeSet,
    options: &'a ScreeningOptions,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses TOML; relative paths are taken from `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))?;
        if let DataSource::Files {
            events,
            demographics,
            cohort,
            outcomes,
        } = &mut cfg.data
        {
            resolve(base, events);
            resolve(base, demographics);
            resolve(base, cohort);
            if let Some(o) = outcomes {
                resolve(base, o);
            }
        }
        for p in &mut cfg.grid.imports {
            resolve(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| WorkbenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| WorkbenchError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorkbenchError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.grid.encodings.is_empty() {
            return bad("grid.encodings is empty".into());
        }
        if self.grid.algorithms.is_empty() && self.grid.imports.is_empty() {
            return bad("grid has neither algorithms nor imports".into());
        }
        if let KPolicy::Fixed { values } = &self.grid.k {
            if values.is_empty() || values.iter().any(|k| *k < 2) {
                return bad("grid.k.values needs at least one k >= 2".into());
            }
        }
        if self.surrogate.folds < 2 {
            return bad("surrogate.folds must be at least 2".into());
        }
        let mut files: Vec<&PathBuf> = self.grid.imports.iter().collect();
        match &self.data {
            DataSource::Synthetic { spec } => spec.validate()?,
            DataSource::Files {
                events,
                demographics,
                cohort,
                outcomes,
            } => files.extend([events, demographics, cohort].into_iter().chain(outcomes)),
        }
        if let Some(missing) = files.iter().find(|p| !p.exists()) {
            return bad(format!("referenced file {} does not exist", missing.display()));
        }
        for a in &self.curation {
            a.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
    }

    pub fn screening_options(&self) -> ScreeningOptions {
        ScreeningOptions {
            cox: self.survival.cox.clone(),
            surrogate_scoring: self.screening.surrogate_scoring,
        }
    }

    /// Hash of the outcome definitions and scoring options fixed for screening.
    pub fn rules_hash(&self, outcomes: &OutcomeSet) -> Result<String> {
        Ok(rules_hash(&ScreeningRules {
            outcomes,
            options: &self.screening_options(),
        })?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DataSource::Synthetic { spec } = &mut self.data {
            spec.seed = seed;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text, Path::new(".")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.clone().with_seed(2);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn minimal_toml() {
        let cfg = RunConfig::from_toml(
            r#"
name = "toy"
[data]
kind = "synthetic"
[data.spec]
n_patients = 60
[grid]
encodings = ["one_hot", "counts"]
[grid.k]
policy = "bootstrap"
k_values = [2, 3]
[[grid.algorithms]]
name = "kmeans"
n_init = 2
"#,
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.grid.encodings.len(), 2);
        assert!(matches!(&cfg.grid.k, KPolicy::Bootstrap(b) if b.k_values == [2, 3] && b.subsets == 10));
        assert!(matches!(&cfg.grid.algorithms[0], Algorithm::Kmeans(k) if k.n_init == 2));
        let DataSource::Synthetic { spec } = &cfg.data else {
            panic!()
        };
        assert_eq!(spec.n_patients, 60);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new("/nonexistent");
        assert!(RunConfig::from_toml("schema_version = 9", base).is_err());
        let files = "[data]\nkind = \"files\"\nevents = \"e.csv\"\ndemographics = \"d.csv\"\ncohort = \"c.toml\"\n";
        let err = RunConfig::from_toml(files, base).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
        assert!(RunConfig::from_toml("[grid.k]\npolicy = \"fixed\"\nvalues = [1]\n", base).is_err());
    }
}
