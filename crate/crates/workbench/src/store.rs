//! On-disk report store.
//!
//! ```text
//! <root>/objects/<sha256>.json     immutable artifacts, named by content
//! <root>/runs/<run_id>/manifest.json
//! <root>/runs/<run_id>/curation.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stratify_core::curation::{CurationLog, RerunScope};

use crate::{Result, WorkbenchError, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    /// Some experiments or stages failed; the rest were kept.
    Partial,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Grid,
    Imported,
    Consensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub experiment_id: String,
    pub kind: ExperimentKind,
    /// Encoding of the matrix used for clustering and explanation.
    pub encoding: String,
    pub algorithm: String,
    pub k: Option<usize>,
    /// Artifact name to object hash.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub errors: Vec<String>,
}

impl ExperimentEntry {
    pub fn failed(&self) -> bool {
        !self.errors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub run_id: String,
    pub parent: Option<String>,
    pub status: RunStatus,
    pub created_at: DateTime<Utc>,
    pub config_hash: String,
    pub rules_hash: Option<String>,
    /// Set on curation children.
    pub scope: Option<RerunScope>,
    /// Object hash of the run configuration.
    pub config: String,
    /// Run-level artifacts (cohort, features, meta, screening) to object hash.
    pub artifacts: BTreeMap<String, String>,
    pub experiments: Vec<ExperimentEntry>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
}

impl Manifest {
    pub fn experiment(&self, id: &str) -> Option<&ExperimentEntry> {
        self.experiments.iter().find(|e| e.experiment_id == id)
    }

    /// Every artifact hash; what determinism is judged on.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self.artifacts.clone();
        out.insert("config".into(), self.config.clone());
        for e in &self.experiments {
            for (name, h) in &e.artifacts {
                out.insert(format!("{}/{name}", e.experiment_id), h.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub parent: Option<String>,
    pub status: RunStatus,
    pub created_at: DateTime<Utc>,
    pub config_hash: String,
    pub scope: Option<RerunScope>,
}

impl From<&Manifest> for RunSummary {
    fn from(m: &Manifest) -> Self {
        Self {
            run_id: m.run_id.clone(),
            parent: m.parent.clone(),
            status: m.status,
            created_at: m.created_at,
            config_hash: m.config_hash.clone(),
            scope: m.scope,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Writes through a temporary file so readers never see a partial object.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        fs::create_dir_all(root.join("runs"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(format!("{hash}.json"))
    }

    fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        if !valid_name(run_id) {
            return Err(WorkbenchError::NotFound(format!("run '{run_id}'")));
        }
        Ok(self.root.join("runs").join(run_id))
    }

    pub fn put_bytes(&self, bytes: &[u8]) -> Result<String> {
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.object_path(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn put_json<T: Serialize>(&self, value: &T) -> Result<String> {
        self.put_bytes(&serde_json::to_vec(value)?)
    }

    pub fn get_bytes(&self, hash: &str) -> Result<Vec<u8>> {
        if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(WorkbenchError::NotFound(format!("object '{hash}'")));
        }
        fs::read(self.object_path(hash)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => WorkbenchError::NotFound(format!("object '{hash}'")),
            _ => e.into(),
        })
    }

    pub fn get_json<T: DeserializeOwned>(&self, hash: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.get_bytes(hash)?)?)
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.run_dir(run_id)
            .map(|d| d.join("manifest.json").exists())
            .unwrap_or(false)
    }

    /// First free id of the form `<stem>`, `<stem>-2`, `<stem>-3`, ...
    /// Reserves it by creating the run directory.
    pub fn allocate_run_id(&self, stem: &str) -> Result<String> {
        for n in 1.. {
            let id = if n == 1 {
                stem.to_string()
            } else {
                format!("{stem}-{n}")
            };
            let dir = self.run_dir(&id)?;
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(id),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!()
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let dir = self.run_dir(&m.run_id)?;
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(m)?)
    }

    pub fn manifest(&self, run_id: &str) -> Result<Manifest> {
        let path = self.run_dir(run_id)?.join("manifest.json");
        let bytes = fs::read(&path).map_err(|_| WorkbenchError::NotFound(format!("run '{run_id}'")))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(WorkbenchError::Format(format!(
                "run '{run_id}' has schema_version {}",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn write_log(&self, run_id: &str, log: &CurationLog) -> Result<()> {
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf)?;
        write_atomic(&self.run_dir(run_id)?.join("curation.jsonl"), &buf)
    }

    /// The run's curation log; empty for runs without curation.
    pub fn log(&self, run_id: &str) -> Result<CurationLog> {
        let path = self.run_dir(run_id)?.join("curation.jsonl");
        match fs::File::open(&path) {
            Ok(f) => Ok(CurationLog::read_jsonl(BufReader::new(f))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(CurationLog::default()),
            Err(e) => Err(e.into()),
        }
    }

    /// Runs with a manifest, ordered by creation time then id.
    pub fn list_runs(&self) -> Result<Vec<RunSummary>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("runs"))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Ok(m) = self.manifest(&name) {
                out.push(RunSummary::from(&m));
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.run_id.cmp(&b.run_id)));
        Ok(out)
    }

    /// Ancestors of a run, root first, ending with the run itself.
    pub fn lineage(&self, run_id: &str) -> Result<Vec<RunSummary>> {
        let mut chain = Vec::new();
        let mut seen = BTreeSet::new();
        let mut next = Some(run_id.to_string());
        while let Some(id) = next {
            if !seen.insert(id.clone()) {
                return Err(WorkbenchError::LineageCycle(id));
            }
            let m = self.manifest(&id)?;
            next = m.parent.clone();
            chain.push(RunSummary::from(&m));
        }
        chain.reverse();
        Ok(chain)
    }
}
