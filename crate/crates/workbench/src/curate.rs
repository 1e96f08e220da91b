//! Curation children: a parent run plus a batch of actions gives a new,
//! immutable run whose log extends the parent's.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use stratify_core::cluster::ClusterAssignment;
use stratify_core::curation::{
    apply_cluster_curation, apply_feature_curation, plan_rerun, ActionKind, CurationAction, CurationLog, RerunScope,
};
use stratify_core::featurize::FeatureMatrix;

use crate::config::RunConfig;
use crate::pipeline::{run_reserved, Planned, Reuse, RunOptions};
use crate::store::{Manifest, RunStatus, Store};
use crate::{Result, WorkbenchError, SCHEMA_VERSION};

/// Body of `POST /runs/{id}/curations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRequest {
    pub actions: Vec<CurationAction>,
    /// Screening-rule hash the client saw; a mismatch with the parent is a conflict.
    #[serde(default)]
    pub rules_hash: Option<String>,
}

/// A validated child run, reserved but not yet computed.
#[derive(Debug, Clone)]
pub struct ChildPlan {
    pub run_id: String,
    pub parent: Manifest,
    pub config: RunConfig,
    pub scope: RerunScope,
    pub log: CurationLog,
}

impl ChildPlan {
    pub fn options(&self) -> RunOptions {
        RunOptions {
            run_id: Some(self.run_id.clone()),
            parent: Some(self.parent.run_id.clone()),
            scope: Some(self.scope),
        }
    }
}

fn invalid(e: impl ToString) -> WorkbenchError {
    WorkbenchError::InvalidAction(e.to_string())
}

/// Checks the actions against the parent's stored artifacts.
fn check_against_parent(store: &Store, parent: &Manifest, actions: &[CurationAction]) -> Result<()> {
    for a in actions {
        a.validate().map_err(invalid)?;
    }
    let feature_actions: Vec<CurationAction> = actions
        .iter()
        .filter(|a| {
            matches!(
                a.kind,
                ActionKind::ExcludeFeature { .. }
                    | ActionKind::GeneralizeCode { .. }
                    | ActionKind::CombineFeatures { .. }
            )
        })
        .cloned()
        .collect();
    if !feature_actions.is_empty() {
        for (name, hash) in parent.artifacts.iter().filter(|(n, _)| n.starts_with("features/")) {
            let m: FeatureMatrix = store.get_json(hash)?;
            apply_feature_curation(&m, &feature_actions).map_err(|e| invalid(format!("{name}: {e}")))?;
        }
    }
    for a in actions {
        let (ActionKind::MergeClusters { experiment_id, .. } | ActionKind::DropCluster { experiment_id, .. }) = &a.kind
        else {
            continue;
        };
        let entry = parent
            .experiment(experiment_id)
            .ok_or_else(|| invalid(format!("run '{}' has no experiment '{experiment_id}'", parent.run_id)))?;
        let hash = entry
            .artifacts
            .get("evaluated_assignment")
            .or_else(|| entry.artifacts.get("assignment"))
            .ok_or_else(|| invalid(format!("experiment '{experiment_id}' has no assignment")))?;
        let current: ClusterAssignment = store.get_json(hash)?;
        let same: Vec<CurationAction> = actions
            .iter()
            .filter(|b| matches!(&b.kind, ActionKind::MergeClusters { experiment_id: e, .. } | ActionKind::DropCluster { experiment_id: e, .. } if e == experiment_id))
            .cloned()
            .collect();
        apply_cluster_curation(&current, &same).map_err(invalid)?;
    }
    Ok(())
}

/// Validates the request, reserves the child id and writes its log.
/// Nothing is created when validation fails.
pub fn plan_child(store: &Store, parent_id: &str, req: &CurationRequest, now: DateTime<Utc>) -> Result<ChildPlan> {
    let parent = store.manifest(parent_id)?;
    if matches!(parent.status, RunStatus::Running | RunStatus::Failed) {
        return Err(invalid(
            format!("run '{parent_id}' is {:?}", parent.status).to_lowercase(),
        ));
    }
    if let Some(h) = &req.rules_hash {
        let recorded = parent.rules_hash.clone().unwrap_or_default();
        if *h != recorded {
            return Err(WorkbenchError::RulesConflict {
                recorded,
                current: h.clone(),
            });
        }
    }
    let scope = plan_rerun(&req.actions).ok_or_else(|| invalid("no actions"))?;
    check_against_parent(store, &parent, &req.actions)?;

    let mut config: RunConfig = store.get_json(&parent.config)?;
    let mut log = store.log(parent_id)?;
    for a in &req.actions {
        let before = config.hash();
        config.curation.push(a.clone());
        log.append(a.clone(), &before, &config.hash(), now)?;
    }
    let run_id = store.allocate_run_id(&config.hash()[..12])?;
    store.write_log(&run_id, &log)?;
    Ok(ChildPlan {
        run_id,
        parent,
        config,
        scope,
        log,
    })
}

/// Placeholder manifest shown while the child computes.
pub fn running_manifest(store: &Store, plan: &ChildPlan) -> Result<Manifest> {
    let m = Manifest {
        schema_version: SCHEMA_VERSION,
        run_id: plan.run_id.clone(),
        parent: Some(plan.parent.run_id.clone()),
        status: RunStatus::Running,
        created_at: Utc::now(),
        config_hash: plan.config.hash(),
        rules_hash: plan.parent.rules_hash.clone(),
        scope: Some(plan.scope),
        config: store.put_json(&plan.config)?,
        artifacts: Default::default(),
        experiments: Vec::new(),
        warnings: Vec::new(),
        error: None,
    };
    store.write_manifest(&m)?;
    Ok(m)
}

/// The parent's clustering, for evaluation-only children.
fn reuse_parent(store: &Store, parent: &Manifest) -> Result<Reuse> {
    let mut experiments = Vec::new();
    for e in &parent.experiments {
        let mut entry = e.clone();
        entry
            .artifacts
            .retain(|name, _| name == "assignment" || name == "k_selection");
        let assignment = entry
            .artifacts
            .get("assignment")
            .map(|h| store.get_json(h))
            .transpose()?;
        if assignment.is_some() {
            entry.errors.clear();
        }
        let k_selection = entry
            .artifacts
            .get("k_selection")
            .map(|h| store.get_json(h))
            .transpose()?;
        // k_selection is re-written from the loaded report; same bytes
        experiments.push(Planned {
            entry,
            assignment,
            k_selection,
        });
    }
    let meta = parent.artifacts.get("meta").map(|h| store.get_json(h)).transpose()?;
    Ok(Reuse { experiments, meta })
}

pub fn execute_child(store: &Store, plan: &ChildPlan) -> Result<Manifest> {
    let reuse = match plan.scope {
        RerunScope::EvaluationOnly => Some(reuse_parent(store, &plan.parent)?),
        RerunScope::ClusteringAndEvaluation => None,
    };
    let m = run_reserved(&plan.config, store, &plan.run_id, &plan.options(), reuse)?;
    if let (Some(recorded), Some(current)) = (&plan.parent.rules_hash, &m.rules_hash) {
        if recorded != current {
            return Err(WorkbenchError::RulesConflict {
                recorded: recorded.clone(),
                current: current.clone(),
            });
        }
    }
    Ok(m)
}

/// Validates, then computes the child synchronously.
pub fn apply_curation_and_rerun(store: &Store, parent_id: &str, req: &CurationRequest) -> Result<Manifest> {
    let plan = plan_child(store, parent_id, req, Utc::now())?;
    execute_child(store, &plan)
}
