//! The pipeline: inputs, analysis cohort and matrices, the cluster grid,
//! consensus clustering, per-experiment evaluation, screening, and
//! persistence of every artifact into the store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;

use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use stratify_core::cluster::{
    bootstrap_select_k, kmeans_cluster, read_assignment_csv, BootstrapOptions, ClusterAssignment, KSelectionReport,
};
use stratify_core::curation::{
    apply_cluster_curation, apply_cohort_curation, apply_feature_curation, ActionKind, CurationAction, RerunScope,
};
use stratify_core::ehr::{
    assemble_cohort, derive_outcomes, ingest, read_demographics, read_events, Cohort, CohortSpec, EventStore,
    IngestOptions, IngestReport, OutcomeSet, PatientId,
};
use stratify_core::enrichment::{build_enrichment_table, EnrichmentReport};
use stratify_core::featurize::{
    build_vocabulary, encode, filter_sparse_patients, summarize_cohort, Encoding, FeatureMatrix, PatientSummary,
};
use stratify_core::metacluster::{meta_cluster, MetaClusterResult};
use stratify_core::screening::{
    export_scatter_heatmap, screen_all, ScatterTable, ScreeningInput, ScreeningMatrix, ScreeningScore,
};
use stratify_core::seed;
use stratify_core::surrogate::{
    cross_validate, extract_rules, render_text, surrogate_assignment, to_dot, CvReport, Rule,
};
use stratify_core::survival::{
    cluster_vs_rest, km_by_cluster, records_from_outcomes, ClusterVsRest, KmByCluster, SurvivalRecord,
};
use stratify_core::synthgen::{generate, GroundTruth};

use crate::config::{Algorithm, DataSource, KPolicy, RunConfig};
use crate::store::{ExperimentEntry, ExperimentKind, Manifest, RunStatus, Store};
use crate::{Result, SCHEMA_VERSION};

/// Loaded records, the assembled cohort and the outcome definitions.
pub struct Inputs {
    pub events: EventStore,
    pub ingest: IngestReport,
    pub cohort: Cohort,
    pub outcomes: OutcomeSet,
    pub truth: Option<GroundTruth>,
    pub warnings: Vec<String>,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    match &cfg.data {
        DataSource::Synthetic { spec } => {
            let out = generate(spec)?;
            let (events, report) = ingest(out.events, out.demographics, &IngestOptions::default());
            let cohort = assemble_cohort(&events, &out.cohort_spec, &cfg.cohort_options)?;
            Ok(Inputs {
                events,
                ingest: report,
                cohort,
                outcomes: cfg.outcomes.clone().unwrap_or(out.outcomes),
                truth: Some(out.truth),
                warnings: out.warnings,
            })
        }
        DataSource::Files {
            events,
            demographics,
            cohort,
            outcomes,
        } => {
            let (rows, mut rejected) = read_events(events)?;
            let (demo, rejected_demo) = read_demographics(demographics)?;
            let (store, mut report) = ingest(rows, demo, &IngestOptions::default());
            rejected.extend(rejected_demo);
            rejected.append(&mut report.rejections);
            report.rejections = rejected;
            let spec = CohortSpec::from_toml(&std::fs::read_to_string(cohort)?)?;
            let cohort = assemble_cohort(&store, &spec, &cfg.cohort_options)?;
            let outcomes = match (&cfg.outcomes, outcomes) {
                (Some(o), _) => o.clone(),
                (None, Some(path)) => OutcomeSet::from_toml(&std::fs::read_to_string(path)?)?,
                (None, None) => OutcomeSet::defaults(),
            };
            Ok(Inputs {
                events: store,
                ingest: report,
                cohort,
                outcomes,
                truth: None,
                warnings: Vec::new(),
            })
        }
    }
}

/// Cohort after curation and the sparsity filter, with one matrix per
/// encoding over exactly those patients.
pub struct Analysis {
    pub cohort: Cohort,
    pub matrices: BTreeMap<Encoding, FeatureMatrix>,
    pub records: BTreeMap<String, Vec<SurvivalRecord>>,
    pub artifact: CohortArtifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortArtifact {
    pub label: String,
    pub assembled: usize,
    pub analysed: Vec<PatientId>,
    pub curated_out: Vec<PatientId>,
    pub sparse_out: Vec<PatientId>,
    pub ingest_rejections: usize,
    pub outcome_events: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

/// Configured feature rules run as combine actions that keep their inputs.
fn feature_actions(cfg: &RunConfig) -> Vec<CurationAction> {
    let rules = cfg.feature_rules.iter().map(|r| {
        CurationAction::new(
            ActionKind::CombineFeatures {
                name: r.name.clone(),
                expression: r.expression.to_string(),
                keep_components: true,
            },
            "configured feature rule",
        )
    });
    rules.chain(cfg.curation.iter().cloned()).collect()
}

pub fn prepare(cfg: &RunConfig, inputs: &Inputs) -> Result<Analysis> {
    let fc = &cfg.featurize;
    let summaries = summarize_cohort(&inputs.cohort, &inputs.events, fc)?;
    let vocab = build_vocabulary(&summaries, fc.min_prevalence);
    let (one_hot, _) = encode(&summaries, &vocab, Encoding::OneHot, fc.quantisation_bins)?;
    let curated = apply_cohort_curation(&inputs.cohort, &one_hot, &cfg.curation)?;
    let members: BTreeSet<&PatientId> = curated.cohort.members.iter().map(|m| &m.patient_id).collect();
    let sparse = filter_sparse_patients(&one_hot.retain_rows(|p| members.contains(p)), fc.sparsity_threshold);
    let keep: BTreeSet<PatientId> = sparse.matrix.patient_ids().iter().cloned().collect();

    let mut cohort = curated.cohort.clone();
    cohort.members.retain(|m| keep.contains(&m.patient_id));
    let kept: Vec<PatientSummary> = summaries.into_iter().filter(|s| keep.contains(&s.patient_id)).collect();
    let vocab = build_vocabulary(&kept, fc.min_prevalence);
    let actions = feature_actions(cfg);
    let mut matrices = BTreeMap::new();
    for &enc in &cfg.grid.encodings {
        let (m, _) = encode(&kept, &vocab, enc, fc.quantisation_bins)?;
        matrices.insert(enc, apply_feature_curation(&m, &actions)?);
    }

    let mut records = BTreeMap::new();
    let mut outcome_events = BTreeMap::new();
    let mut warnings = inputs.warnings.clone();
    warnings.extend(curated.warnings.iter().cloned());
    for def in &inputs.outcomes.outcomes {
        let events = derive_outcomes(&cohort, &inputs.events, def);
        let (recs, skipped) = records_from_outcomes(&events, &inputs.events);
        if !skipped.is_empty() {
            warnings.push(format!(
                "{}: {} patients without survival data",
                def.name,
                skipped.len()
            ));
        }
        outcome_events.insert(def.name.clone(), recs.iter().filter(|r| r.event).count());
        records.insert(def.name.clone(), recs);
    }
    let artifact = CohortArtifact {
        label: cohort.label.clone(),
        assembled: inputs.cohort.members.len(),
        analysed: cohort.members.iter().map(|m| m.patient_id.clone()).collect(),
        curated_out: curated.removed.iter().map(|r| r.patient_id.clone()).collect(),
        sparse_out: sparse.removed.clone(),
        ingest_rejections: inputs.ingest.rejections.len(),
        outcome_events,
        warnings,
    };
    Ok(Analysis {
        cohort,
        matrices,
        records,
        artifact,
    })
}

/// One experiment's clustering, before evaluation.
#[derive(Debug, Clone)]
pub struct Planned {
    pub entry: ExperimentEntry,
    pub assignment: Option<ClusterAssignment>,
    pub k_selection: Option<KSelectionReport>,
}

impl Planned {
    fn new(id: String, kind: ExperimentKind, encoding: Encoding, algorithm: &str, k: Option<usize>) -> Self {
        Self {
            entry: ExperimentEntry {
                experiment_id: id,
                kind,
                encoding: encoding.as_str().into(),
                algorithm: algorithm.into(),
                k,
                artifacts: BTreeMap::new(),
                errors: Vec::new(),
            },
            assignment: None,
            k_selection: None,
        }
    }

    /// An externally produced assignment, evaluated as-is.
    pub fn imported(cfg: &RunConfig, a: ClusterAssignment) -> Self {
        let mut p = Self::new(
            a.experiment_id.clone(),
            ExperimentKind::Imported,
            primary_encoding(cfg),
            "imported",
            Some(a.k as usize),
        );
        p.assignment = Some(a);
        p
    }

    fn fail(mut self, e: impl ToString) -> Self {
        self.entry.errors.push(e.to_string());
        self
    }
}

pub struct Clustering {
    pub experiments: Vec<Planned>,
    pub meta: Option<MetaClusterResult>,
    pub warnings: Vec<String>,
}

pub fn primary_encoding(cfg: &RunConfig) -> Encoding {
    cfg.grid.encodings[0]
}

/// Runs algorithms × encodings × k, then the imports, numbering grid
/// experiments `E01`, `E02`, ... in that order.
pub fn cluster_grid(cfg: &RunConfig, analysis: &Analysis) -> Vec<Planned> {
    let mut jobs = Vec::new();
    for &enc in &cfg.grid.encodings {
        for alg in &cfg.grid.algorithms {
            jobs.push((enc, alg));
        }
    }
    // k policy per (encoding, algorithm); bootstrap runs are independent
    let ks: Vec<std::result::Result<(Vec<usize>, Option<KSelectionReport>), String>> = jobs
        .par_iter()
        .map(|(enc, alg)| {
            let Algorithm::Kmeans(km) = alg;
            match &cfg.grid.k {
                KPolicy::Fixed { values } => Ok((values.clone(), None)),
                KPolicy::Bootstrap(b) => {
                    let opts = BootstrapOptions {
                        kmeans: km.clone(),
                        ..b.clone()
                    };
                    let s = seed::derive_str(cfg.seed, &format!("bootstrap/{}/{}", enc.as_str(), alg.label()));
                    let r = bootstrap_select_k(&analysis.matrices[enc], &opts, s).map_err(|e| e.to_string())?;
                    if r.selected().is_empty() {
                        return Err(format!("bootstrap selected no k: {}", r.warnings.join("; ")));
                    }
                    Ok((r.selected(), Some(r)))
                }
            }
        })
        .collect();

    let mut plans = Vec::new();
    for ((enc, alg), ks) in jobs.iter().zip(ks) {
        match ks {
            Ok((values, report)) => {
                for k in values {
                    let id = format!("E{:02}", plans.len() + 1);
                    let mut p = Planned::new(id, ExperimentKind::Grid, *enc, alg.label(), Some(k));
                    p.k_selection = report.clone();
                    plans.push(p);
                }
            }
            Err(e) => {
                let id = format!("E{:02}", plans.len() + 1);
                plans.push(Planned::new(id, ExperimentKind::Grid, *enc, alg.label(), None).fail(e));
            }
        }
    }
    let algs: BTreeMap<&str, &Algorithm> = cfg.grid.algorithms.iter().map(|a| (a.label(), a)).collect();
    plans.par_iter_mut().filter(|p| !p.entry.failed()).for_each(|p| {
        let enc = cfg
            .grid
            .encodings
            .iter()
            .copied()
            .find(|e| e.as_str() == p.entry.encoding)
            .expect("grid encoding");
        let Algorithm::Kmeans(km) = algs[p.entry.algorithm.as_str()];
        let k = p.entry.k.expect("grid k");
        let s = seed::derive_str(cfg.seed, &p.entry.experiment_id);
        match kmeans_cluster(&analysis.matrices[&enc], k, s, &p.entry.experiment_id, enc.as_str(), km) {
            Ok(a) => p.assignment = Some(a),
            Err(e) => p.entry.errors.push(e.to_string()),
        }
    });

    let ids: Vec<PatientId> = analysis.cohort.members.iter().map(|m| m.patient_id.clone()).collect();
    for path in &cfg.grid.imports {
        let read = File::open(path)
            .map_err(|e| e.to_string())
            .and_then(|f| read_assignment_csv(f, Some(&ids), true).map_err(|e| e.to_string()));
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match read {
            Ok(a) => plans.push(Planned::imported(cfg, a)),
            Err(e) => plans
                .push(Planned::new(name, ExperimentKind::Imported, primary_encoding(cfg), "imported", None).fail(e)),
        }
    }
    plans
}

/// Consensus over every successful experiment, plus one consensus
/// experiment per selected k when configured.
pub fn consensus(cfg: &RunConfig, plans: &mut Vec<Planned>) -> (Option<MetaClusterResult>, Vec<String>) {
    let mut warnings = Vec::new();
    if !cfg.meta.enabled {
        return (None, warnings);
    }
    let inputs: Vec<ClusterAssignment> = plans.iter().filter_map(|p| p.assignment.clone()).collect();
    if inputs.len() < 2 {
        warnings.push(format!(
            "meta clustering skipped: {} successful experiment(s)",
            inputs.len()
        ));
        return (None, warnings);
    }
    let meta = match meta_cluster(&inputs, &cfg.meta.options) {
        Ok(m) => m,
        Err(e) => {
            warnings.push(format!("meta clustering failed: {e}"));
            return (None, warnings);
        }
    };
    if cfg.meta.evaluate_consensus {
        for a in &meta.assignments {
            let mut p = Planned::new(
                a.assignment.experiment_id.clone(),
                ExperimentKind::Consensus,
                primary_encoding(cfg),
                &a.assignment.provenance.algorithm,
                Some(a.k),
            );
            p.assignment = Some(a.assignment.clone());
            plans.push(p);
        }
    }
    (Some(meta), warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateArtifact {
    pub cv: CvReport,
    pub rules: Vec<Rule>,
    pub text: String,
    pub dot: String,
    /// Labels predicted by the final tree.
    pub assignment: ClusterAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxRow {
    pub cluster: u32,
    pub result: Option<ClusterVsRest>,
    pub error: Option<String>,
}

/// Outcome name to one cluster-vs-rest model per cluster.
pub type CoxTable = BTreeMap<String, Vec<CoxRow>>;

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    /// Present when cluster curation changed the labels.
    pub evaluated: Option<ClusterAssignment>,
    pub km: Option<BTreeMap<String, KmByCluster>>,
    pub cox: Option<CoxTable>,
    pub enrichment: Option<EnrichmentReport>,
    pub surrogate: Option<SurrogateArtifact>,
    pub errors: Vec<String>,
}

pub fn evaluate(
    cfg: &RunConfig,
    analysis: &Analysis,
    entry: &ExperimentEntry,
    assignment: &ClusterAssignment,
) -> Evaluation {
    let mut ev = Evaluation::default();
    let id = &entry.experiment_id;
    let curated = cfg.curation.iter().any(|a| match &a.kind {
        ActionKind::MergeClusters { experiment_id, .. } | ActionKind::DropCluster { experiment_id, .. } => {
            experiment_id == id
        }
        _ => false,
    });
    let labels = if curated {
        match apply_cluster_curation(assignment, &cfg.curation) {
            Ok(a) => {
                ev.evaluated = Some(a.clone());
                a
            }
            Err(e) => {
                ev.errors.push(format!("cluster curation: {e}"));
                return ev;
            }
        }
    } else {
        assignment.clone()
    };
    let enc = cfg
        .grid
        .encodings
        .iter()
        .copied()
        .find(|e| e.as_str() == entry.encoding)
        .unwrap_or(primary_encoding(cfg));
    let matrix = &analysis.matrices[&enc];

    let s = seed::derive_str(cfg.seed, &format!("surrogate/{id}"));
    match cross_validate(matrix, &labels, cfg.surrogate.folds, &cfg.surrogate.tree, s) {
        Ok(cv) => match surrogate_assignment(&cv.final_tree, matrix, &labels) {
            Ok(sa) => {
                ev.surrogate = Some(SurrogateArtifact {
                    rules: extract_rules(&cv.final_tree),
                    text: render_text(&cv.final_tree),
                    dot: to_dot(&cv.final_tree),
                    assignment: sa,
                    cv,
                })
            }
            Err(e) => ev.errors.push(format!("surrogate: {e}")),
        },
        Err(e) => ev.errors.push(format!("surrogate: {e}")),
    }

    let mut km = BTreeMap::new();
    let mut cox = BTreeMap::new();
    for (outcome, recs) in &analysis.records {
        match km_by_cluster(&labels, recs, cfg.survival.km_min_size) {
            Ok(k) => {
                km.insert(outcome.clone(), k);
            }
            Err(e) => ev.errors.push(format!("km {outcome}: {e}")),
        }
        let rows = labels
            .clusters()
            .keys()
            .map(|&c| match cluster_vs_rest(&labels, c, recs, &cfg.survival.cox) {
                Ok(r) => CoxRow {
                    cluster: c,
                    result: Some(r),
                    error: None,
                },
                Err(e) => CoxRow {
                    cluster: c,
                    result: None,
                    error: Some(e.to_string()),
                },
            })
            .collect();
        cox.insert(outcome.clone(), rows);
    }
    ev.km = Some(km);
    ev.cox = Some(cox);

    match build_enrichment_table(matrix, &labels, &cfg.enrichment) {
        Ok(r) => ev.enrichment = Some(r),
        Err(e) => ev.errors.push(format!("enrichment: {e}")),
    }
    ev
}

/// Pipeline output before persistence.
pub struct RunResult {
    pub analysis: Analysis,
    pub truth: Option<GroundTruth>,
    pub experiments: Vec<(Planned, Evaluation)>,
    pub meta: Option<MetaClusterResult>,
    pub screening: Option<ScreeningMatrix>,
    pub scatter: Option<ScatterTable>,
    pub rules_hash: String,
    pub warnings: Vec<String>,
}

impl RunResult {
    pub fn experiment(&self, id: &str) -> Option<&(Planned, Evaluation)> {
        self.experiments.iter().find(|(p, _)| p.entry.experiment_id == id)
    }
}

/// Assignments and consensus carried over from a parent run.
pub struct Reuse {
    pub experiments: Vec<Planned>,
    pub meta: Option<MetaClusterResult>,
}

pub fn compute(cfg: &RunConfig, reuse: Option<Reuse>) -> Result<RunResult> {
    cfg.validate()?;
    let inputs = load_inputs(cfg)?;
    let analysis = prepare(cfg, &inputs)?;
    let rules_hash = cfg.rules_hash(&inputs.outcomes)?;
    let mut warnings = Vec::new();

    let (mut plans, meta) = match reuse {
        Some(r) => (r.experiments, r.meta),
        None => {
            let mut plans = cluster_grid(cfg, &analysis);
            let (meta, w) = consensus(cfg, &mut plans);
            warnings.extend(w);
            (plans, meta)
        }
    };

    let evaluations: Vec<Evaluation> = plans
        .par_iter()
        .map(|p| match &p.assignment {
            Some(a) => evaluate(cfg, &analysis, &p.entry, a),
            None => Evaluation::default(),
        })
        .collect();
    for (p, e) in plans.iter_mut().zip(&evaluations) {
        p.entry.errors.extend(e.errors.iter().cloned());
    }

    let screened: Vec<ScreeningInput<'_>> = plans
        .iter()
        .zip(&evaluations)
        .filter(|(p, e)| p.assignment.is_some() && (e.surrogate.is_some() || !cfg.screening.surrogate_scoring))
        .map(|(p, e)| ScreeningInput {
            assignment: e
                .evaluated
                .as_ref()
                .or(p.assignment.as_ref())
                .expect("assignment present"),
            surrogate: e.surrogate.as_ref().map(|s| &s.assignment),
        })
        .collect();
    let mut screening = None;
    let mut scatter = None;
    if screened.is_empty() {
        warnings.push("screening skipped: no evaluable experiments".into());
    } else {
        match screen_all(&screened, &analysis.records, &cfg.screening_options(), &rules_hash) {
            Ok(m) => {
                if let Some((x, y)) = &cfg.screening.scatter {
                    let primary = cfg
                        .screening
                        .primary_outcome
                        .clone()
                        .unwrap_or_else(|| m.outcomes[0].clone());
                    match export_scatter_heatmap(&m, &primary, x, y, cfg.screening.variant) {
                        Ok(t) => scatter = Some(t),
                        Err(e) => warnings.push(format!("scatter table: {e}")),
                    }
                }
                screening = Some(m);
            }
            Err(e) => warnings.push(format!("screening failed: {e}")),
        }
    }

    Ok(RunResult {
        analysis,
        truth: inputs.truth,
        experiments: plans.into_iter().zip(evaluations).collect(),
        meta,
        screening,
        scatter,
        rules_hash,
        warnings,
    })
}

/// Screening cells of one experiment.
pub fn experiment_scores(m: &ScreeningMatrix, experiment_id: &str) -> Vec<ScreeningScore> {
    m.rows
        .iter()
        .zip(&m.cells)
        .filter(|(r, _)| r.experiment_id == experiment_id)
        .flat_map(|(_, cells)| cells.iter().cloned())
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Explicit id; otherwise derived from the config hash.
    pub run_id: Option<String>,
    pub parent: Option<String>,
    pub scope: Option<RerunScope>,
}

/// Writes every artifact and the manifest.
pub fn persist(
    store: &Store,
    cfg: &RunConfig,
    result: &RunResult,
    run_id: &str,
    opts: &RunOptions,
) -> Result<Manifest> {
    let mut artifacts = BTreeMap::new();
    artifacts.insert("cohort".to_string(), store.put_json(&result.analysis.artifact)?);
    for (enc, m) in &result.analysis.matrices {
        artifacts.insert(format!("features/{}", enc.as_str()), store.put_json(m)?);
    }
    if let Some(t) = &result.truth {
        artifacts.insert("truth".into(), store.put_json(t)?);
    }
    if let Some(m) = &result.meta {
        artifacts.insert("meta".into(), store.put_json(m)?);
    }
    if let Some(s) = &result.screening {
        artifacts.insert("screening".into(), store.put_json(s)?);
    }
    if let Some(s) = &result.scatter {
        artifacts.insert("scatter".into(), store.put_json(s)?);
    }

    let mut experiments = Vec::new();
    for (p, e) in &result.experiments {
        let mut entry = p.entry.clone();
        let mut put = |name: &str, hash: Result<String>| -> Result<()> {
            entry.artifacts.insert(name.to_string(), hash?);
            Ok(())
        };
        if let Some(h) = p.entry.artifacts.get("assignment") {
            // carried over from the parent: keep the parent's object
            put("assignment", Ok(h.clone()))?;
        } else if let Some(a) = &p.assignment {
            put("assignment", store.put_json(a))?;
        }
        if let Some(k) = &p.k_selection {
            put("k_selection", store.put_json(k))?;
        }
        if let Some(a) = &e.evaluated {
            put("evaluated_assignment", store.put_json(a))?;
        }
        if let Some(k) = &e.km {
            put("km", store.put_json(k))?;
        }
        if let Some(c) = &e.cox {
            put("cox", store.put_json(c))?;
        }
        if let Some(r) = &e.enrichment {
            put("enrichment", store.put_json(r))?;
        }
        if let Some(s) = &e.surrogate {
            put("surrogate", store.put_json(s))?;
        }
        if let Some(m) = &result.screening {
            let scores = experiment_scores(m, &entry.experiment_id);
            if !scores.is_empty() {
                put("screening", store.put_json(&scores))?;
            }
        }
        experiments.push(entry);
    }

    let partial = experiments.iter().any(ExperimentEntry::failed) || result.screening.is_none();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        run_id: run_id.to_string(),
        parent: opts.parent.clone(),
        status: if partial {
            RunStatus::Partial
        } else {
            RunStatus::Complete
        },
        created_at: Utc::now(),
        config_hash: cfg.hash(),
        rules_hash: Some(result.rules_hash.clone()),
        scope: opts.scope,
        config: store.put_json(cfg)?,
        artifacts,
        experiments,
        warnings: result.warnings.clone(),
        error: None,
    };
    store.write_manifest(&manifest)?;
    Ok(manifest)
}

/// Manifest for a run that could not produce a bundle.
pub fn failed_manifest(
    store: &Store,
    cfg: &RunConfig,
    run_id: &str,
    opts: &RunOptions,
    error: String,
) -> Result<Manifest> {
    let m = Manifest {
        schema_version: SCHEMA_VERSION,
        run_id: run_id.to_string(),
        parent: opts.parent.clone(),
        status: RunStatus::Failed,
        created_at: Utc::now(),
        config_hash: cfg.hash(),
        rules_hash: None,
        scope: opts.scope,
        config: store.put_json(cfg)?,
        artifacts: BTreeMap::new(),
        experiments: Vec::new(),
        warnings: Vec::new(),
        error: Some(error),
    };
    store.write_manifest(&m)?;
    Ok(m)
}

pub fn reserve_run(store: &Store, cfg: &RunConfig, opts: &RunOptions) -> Result<String> {
    match &opts.run_id {
        Some(id) => {
            if store.run_exists(id) {
                return Err(crate::WorkbenchError::Config(format!("run '{id}' already exists")));
            }
            Ok(id.clone())
        }
        None => store.allocate_run_id(&cfg.hash()[..12]),
    }
}

/// Runs every stage and persists the bundle. Stage errors inside an
/// experiment mark the run partial; errors before clustering mark it failed.
pub fn run_pipeline(cfg: &RunConfig, store: &Store, opts: &RunOptions) -> Result<Manifest> {
    let run_id = reserve_run(store, cfg, opts)?;
    run_reserved(cfg, store, &run_id, opts, None)
}

pub(crate) fn run_reserved(
    cfg: &RunConfig,
    store: &Store,
    run_id: &str,
    opts: &RunOptions,
    reuse: Option<Reuse>,
) -> Result<Manifest> {
    match compute(cfg, reuse) {
        Ok(result) => persist(store, cfg, &result, run_id, opts),
        Err(e) => failed_manifest(store, cfg, run_id, opts, e.to_string()),
    }
}
