use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::rule::{leaf_columns, parse_expr, parse_rule, present, rule_column, Expr, Pattern};
use super::CurationError;
use crate::cluster::{ClusterAssignment, ClusterLabel};
use crate::ehr::{Cohort, CohortDecision, PatientId, ProvenanceNote};
use crate::featurize::{FeatureDescriptor, FeatureKind, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionKind {
    /// Removes cohort members for whom `predicate` holds.
    ExcludePatients {
        predicate: String,
    },
    ExcludeFeature {
        feature_id: String,
    },
    /// Replaces every binary column whose code starts with `prefix` by one
    /// column holding their OR.
    GeneralizeCode {
        prefix: String,
    },
    /// Adds the rule as a NOVEL column. Binary columns its leaves match are
    /// removed unless `keep_components`.
    CombineFeatures {
        name: String,
        expression: String,
        #[serde(default)]
        keep_components: bool,
    },
    MergeClusters {
        experiment_id: String,
        clusters: Vec<u32>,
    },
    DropCluster {
        experiment_id: String,
        cluster: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationAction {
    #[serde(flatten)]
    pub kind: ActionKind,
    pub justification: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerunScope {
    EvaluationOnly,
    ClusteringAndEvaluation,
}

impl RerunScope {
    pub fn as_str(self) -> &'static str {
        match self {
            RerunScope::EvaluationOnly => "evaluation_only",
            RerunScope::ClusteringAndEvaluation => "clustering+evaluation",
        }
    }
}

impl CurationAction {
    pub fn new(kind: ActionKind, justification: &str) -> Self {
        Self {
            kind,
            justification: justification.to_string(),
        }
    }

    pub fn scope(&self) -> RerunScope {
        match self.kind {
            ActionKind::MergeClusters { .. } | ActionKind::DropCluster { .. } => RerunScope::EvaluationOnly,
            _ => RerunScope::ClusteringAndEvaluation,
        }
    }

    /// Checks that do not need data: justification and rule syntax.
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.justification.trim().is_empty() {
            return Err(CurationError::MissingJustification(self.describe()));
        }
        match &self.kind {
            ActionKind::ExcludePatients { predicate } => {
                parse_expr(predicate)?;
            }
            ActionKind::CombineFeatures { name, expression, .. } => {
                parse_rule(name, expression)?;
            }
            ActionKind::GeneralizeCode { prefix } if prefix.trim().is_empty() => {
                return Err(CurationError::Invalid(
                    "generalize_code needs a non-empty prefix".into(),
                ));
            }
            ActionKind::MergeClusters { clusters, .. } if clusters.iter().collect::<BTreeSet<_>>().len() < 2 => {
                return Err(CurationError::Invalid(
                    "merge_clusters needs at least two distinct labels".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            ActionKind::ExcludePatients { predicate } => format!("exclude patients where {predicate}"),
            ActionKind::ExcludeFeature { feature_id } => format!("exclude feature {feature_id}"),
            ActionKind::GeneralizeCode { prefix } => format!("generalize {prefix}*"),
            ActionKind::CombineFeatures { name, .. } => format!("combine features into NOVEL: {name}"),
            ActionKind::MergeClusters {
                experiment_id,
                clusters,
            } => format!("merge clusters {clusters:?} of {experiment_id}"),
            ActionKind::DropCluster { experiment_id, cluster } => format!("drop cluster {cluster} of {experiment_id}"),
        }
    }
}

/// Widest scope over a batch; an empty batch needs nothing re-run.
pub fn plan_rerun(actions: &[CurationAction]) -> Option<RerunScope> {
    actions.iter().map(CurationAction::scope).max()
}

#[derive(Debug, Clone, Deserialize)]
struct ActionFile {
    #[serde(default)]
    action: Vec<CurationAction>,
}

/// Reads a TOML file of `[[action]]` tables and validates each entry.
pub fn parse_actions_toml(text: &str) -> Result<Vec<CurationAction>, CurationError> {
    let f: ActionFile = toml::from_str(text).map_err(|e| CurationError::Format(e.to_string()))?;
    for a in &f.action {
        a.validate()?;
    }
    Ok(f.action)
}

fn binary_matches(matrix: &FeatureMatrix, p: &Pattern) -> Vec<usize> {
    (0..matrix.ncols())
        .filter(|&c| matrix.features()[c].kind == FeatureKind::Binary && p.matches_feature(&matrix.features()[c]))
        .collect()
}

fn or_column(matrix: &FeatureMatrix, cols: &[usize]) -> Vec<f64> {
    (0..matrix.nrows())
        .map(|r| {
            let any = cols
                .iter()
                .any(|&c| present(matrix.features()[c].kind, matrix.get(r, c), matrix.is_missing(r, c)));
            f64::from(u8::from(any))
        })
        .collect()
}

fn add_column(
    matrix: &FeatureMatrix,
    descriptor: FeatureDescriptor,
    values: Vec<f64>,
    remove: &[usize],
) -> Result<FeatureMatrix, CurationError> {
    if matrix.column_index(&descriptor.feature_id).is_some()
        && !remove
            .iter()
            .any(|&c| matrix.features()[c].feature_id == descriptor.feature_id)
    {
        return Err(CurationError::DuplicateFeature(descriptor.feature_id));
    }
    let drop: BTreeSet<String> = remove
        .iter()
        .map(|&c| matrix.features()[c].feature_id.clone())
        .collect();
    Ok(matrix.drop_columns(&drop).with_columns(vec![(descriptor, values)])?)
}

/// Applies the feature actions in order; other actions are skipped. Rows
/// are never touched. Columns come back sorted by feature id.
pub fn apply_feature_curation(
    matrix: &FeatureMatrix,
    actions: &[CurationAction],
) -> Result<FeatureMatrix, CurationError> {
    let mut m = matrix.clone();
    let mut touched = false;
    for a in actions {
        a.validate()?;
        match &a.kind {
            ActionKind::ExcludeFeature { feature_id } => {
                // a code's id also names its per-encoding columns (`dx:I50#count`, `lab:Na#q2`)
                let variant = format!("{feature_id}#");
                let drop: BTreeSet<String> = m
                    .features()
                    .iter()
                    .filter(|f| f.feature_id == *feature_id || f.feature_id.starts_with(&variant))
                    .map(|f| f.feature_id.clone())
                    .collect();
                if drop.is_empty() {
                    return Err(CurationError::AbsentFeature(feature_id.clone()));
                }
                m = m.drop_columns(&drop);
            }
            ActionKind::GeneralizeCode { prefix } => {
                let p = match parse_expr(&format!("{}*", prefix.trim().trim_end_matches('*')))? {
                    Expr::Leaf(p) => p,
                    _ => return Err(CurationError::Invalid(format!("'{prefix}' is not a code prefix"))),
                };
                let cols = binary_matches(&m, &p);
                if cols.is_empty() {
                    return Err(CurationError::AbsentFeature(format!("{prefix}*")));
                }
                let values = or_column(&m, &cols);
                let id = format!(
                    "novel:{}",
                    p.to_string().trim_end_matches('*').replace(':', "_").to_lowercase()
                );
                let d = FeatureDescriptor::derived(
                    &id,
                    &format!("NOVEL: All {} subcodes combined", p.code),
                    &p.to_string(),
                );
                m = add_column(&m, d, values, &cols)?;
            }
            ActionKind::CombineFeatures {
                name,
                expression,
                keep_components,
            } => {
                let rule = parse_rule(name, expression)?;
                let leaves = leaf_columns(&rule.expression, &m);
                if let Some((p, _)) = leaves.iter().find(|(_, cols)| cols.is_empty()) {
                    return Err(CurationError::AbsentFeature(p.to_string()));
                }
                let values = rule_column(&rule.expression, &m)
                    .into_iter()
                    .map(|b| f64::from(u8::from(b)))
                    .collect();
                let remove: Vec<usize> = if *keep_components {
                    Vec::new()
                } else {
                    let set: BTreeSet<usize> = leaves
                        .iter()
                        .flat_map(|(_, cols)| cols.iter().copied())
                        .filter(|&c| m.features()[c].kind == FeatureKind::Binary)
                        .collect();
                    set.into_iter().collect()
                };
                m = add_column(&m, rule.descriptor(), values, &remove)?;
            }
            _ => continue,
        }
        touched = true;
    }
    Ok(if touched { m.sorted_columns() } else { m })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub patient_id: PatientId,
    pub predicate: String,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCuration {
    pub cohort: Cohort,
    pub removed: Vec<Removal>,
    pub warnings: Vec<String>,
}

/// Removes members matching any exclude_patients predicate, evaluated over
/// their feature row. Members without a row have no features present.
pub fn apply_cohort_curation(
    cohort: &Cohort,
    matrix: &FeatureMatrix,
    actions: &[CurationAction],
) -> Result<CohortCuration, CurationError> {
    let mut cohort = cohort.clone();
    let mut removed = Vec::new();
    let mut warnings = Vec::new();
    for a in actions {
        a.validate()?;
        let ActionKind::ExcludePatients { predicate } = &a.kind else {
            continue;
        };
        let expr = parse_expr(predicate)?;
        let column = rule_column(&expr, matrix);
        let absent_value = expr.eval(&|_| false);
        let hit = |p: &PatientId| match matrix.row_index(p) {
            Some(r) => column[r],
            None => absent_value,
        };
        let before = cohort.members.len();
        let mut gone = Vec::new();
        cohort.members.retain(|m| {
            let h = hit(&m.patient_id);
            if h {
                gone.push(m.patient_id.clone());
            }
            !h
        });
        if gone.is_empty() {
            warnings.push(format!("predicate '{predicate}' matched no patients"));
            continue;
        }
        if gone.len() == before {
            return Err(CurationError::EmptyCohort(predicate.clone()));
        }
        for p in gone {
            cohort.provenance.push(ProvenanceNote {
                patient_id: p.clone(),
                decision: CohortDecision::Excluded {
                    rule: format!("curation: {predicate}"),
                },
                detail: a.justification.clone(),
            });
            removed.push(Removal {
                patient_id: p,
                predicate: predicate.clone(),
                justification: a.justification.clone(),
            });
        }
    }
    Ok(CohortCuration {
        cohort,
        removed,
        warnings,
    })
}

/// Applies the merges and drops addressed to this experiment. Merged labels
/// take the smallest label of the group; dropped clusters become
/// unclustered; the result is renumbered to `1..=k`.
pub fn apply_cluster_curation(
    assignment: &ClusterAssignment,
    actions: &[CurationAction],
) -> Result<ClusterAssignment, CurationError> {
    let mut map: BTreeMap<u32, ClusterLabel> = (1..=assignment.k).map(|c| (c, ClusterLabel::Cluster(c))).collect();
    let mut notes = Vec::new();
    let check = |c: u32| {
        if c == 0 || c > assignment.k {
            Err(CurationError::UnknownCluster {
                experiment_id: assignment.experiment_id.clone(),
                cluster: c,
            })
        } else {
            Ok(())
        }
    };
    for a in actions {
        a.validate()?;
        match &a.kind {
            ActionKind::MergeClusters {
                experiment_id,
                clusters,
            } if *experiment_id == assignment.experiment_id => {
                clusters.iter().try_for_each(|c| check(*c))?;
                // resolve through earlier actions so merges compose
                let targets: BTreeSet<u32> = clusters.iter().filter_map(|c| map[c].cluster()).collect();
                let Some(&to) = targets.iter().next() else { continue };
                for v in map.values_mut() {
                    if v.cluster().is_some_and(|c| targets.contains(&c)) {
                        *v = ClusterLabel::Cluster(to);
                    }
                }
                notes.push(a.describe());
            }
            ActionKind::DropCluster { experiment_id, cluster } if *experiment_id == assignment.experiment_id => {
                check(*cluster)?;
                if let Some(target) = map[cluster].cluster() {
                    for v in map.values_mut() {
                        if v.cluster() == Some(target) {
                            *v = ClusterLabel::Unclustered;
                        }
                    }
                }
                notes.push(a.describe());
            }
            _ => {}
        }
    }
    if notes.is_empty() {
        return Ok(assignment.clone());
    }
    let remaining: BTreeSet<u32> = assignment
        .labels
        .values()
        .filter_map(|l| l.cluster())
        .filter_map(|c| map[&c].cluster())
        .collect();
    if remaining.len() < 2 {
        return Err(CurationError::NothingToCompare);
    }
    let mut curated = assignment.relabel(&map)?;
    curated.provenance.notes.insert("curation".into(), notes.join("; "));
    Ok(curated)
}
