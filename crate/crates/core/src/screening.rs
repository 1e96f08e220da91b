//! Outcome-based screening: score every (experiment, cluster, outcome) by how
//! strongly cluster membership separates survival, for both the base
//! assignment and its surrogate-tree reproduction.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::ClusterAssignment;
use crate::survival::{cluster_vs_rest, ClusterVsRest, CoxOptions, SurvivalError, SurvivalRecord};

#[derive(Debug, Error)]
pub enum ScreeningError {
    #[error("outcome '{0}' was not scored")]
    MissingOutcome(String),
    #[error("scatter heatmap needs at least 3 scored outcomes (got {0})")]
    TooFewOutcomes(usize),
    #[error("experiment '{0}' has no surrogate assignment and surrogate scoring is enabled")]
    MissingSurrogate(String),
    #[error("screening rules changed: report was produced under {recorded}, current rules hash to {current}; start a new run")]
    RulesChanged { recorded: String, current: String },
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const UNTESTABLE: &str = "untestable";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HazardDirection {
    Higher,
    Lower,
    Undetermined,
}

impl HazardDirection {
    pub fn of(hr: Option<f64>) -> Self {
        match hr {
            Some(h) if h > 1.0 => Self::Higher,
            Some(h) if h < 1.0 => Self::Lower,
            _ => Self::Undetermined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    Base,
    Surrogate,
    #[default]
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningScore {
    pub experiment_id: String,
    pub cluster: u32,
    pub outcome: String,
    pub r_base: f64,
    /// `None` when surrogate scoring is disabled.
    pub r_surrogate: Option<f64>,
    /// Equals `r_base` when surrogate scoring is disabled.
    pub r_average: f64,
    pub p_base: f64,
    pub p_surrogate: Option<f64>,
    pub hazard_ratio: Option<f64>,
    pub direction: HazardDirection,
    /// The base model had no testable contrast.
    pub untestable: bool,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl ScreeningScore {
    pub fn value(&self, variant: ScoreVariant) -> Option<f64> {
        match variant {
            ScoreVariant::Base => Some(self.r_base),
            ScoreVariant::Surrogate => self.r_surrogate,
            ScoreVariant::Average => Some(self.r_average),
        }
    }
}

/// `−ln p`, from the log p-value so it stays finite for tiny p.
pub fn score_from_ln_p(ln_p: f64) -> f64 {
    if ln_p >= 0.0 {
        0.0
    } else {
        -ln_p
    }
}

fn untestable(r: &ClusterVsRest) -> bool {
    r.events_cluster + r.events_rest == 0
}

fn contrast(
    assignment: &ClusterAssignment,
    cluster: u32,
    records: &[SurvivalRecord],
    options: &CoxOptions,
    what: &str,
    flags: &mut Vec<String>,
) -> Result<Option<ClusterVsRest>, ScreeningError> {
    match cluster_vs_rest(assignment, cluster, records, options) {
        Ok(r) => {
            flags.extend(r.flags.iter().map(|f| format!("{what}: {f}")));
            if untestable(&r) {
                flags.push(format!("{what}: {UNTESTABLE}"));
                return Ok(None);
            }
            Ok(Some(r))
        }
        Err(SurvivalError::EmptyGroup(msg)) => {
            flags.push(format!("{what}: {UNTESTABLE} ({msg})"));
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Scores one cluster against one outcome. `surrogate` is the assignment
/// predicted by the surrogate tree over the same patients.
pub fn score_cluster(
    assignment: &ClusterAssignment,
    cluster: u32,
    outcome: &str,
    records: &[SurvivalRecord],
    surrogate: Option<&ClusterAssignment>,
    options: &CoxOptions,
) -> Result<ScreeningScore, ScreeningError> {
    let mut flags = Vec::new();
    let base = contrast(assignment, cluster, records, options, "base", &mut flags)?;
    let (r_base, p_base, hazard_ratio) = match &base {
        Some(r) => (score_from_ln_p(r.ln_p_value), r.p_value, r.hazard_ratio),
        None => (0.0, 1.0, None),
    };
    let (r_surrogate, p_surrogate) = match surrogate {
        None => (None, None),
        Some(s) => match contrast(s, cluster, records, options, "surrogate", &mut flags)? {
            Some(r) => (Some(score_from_ln_p(r.ln_p_value)), Some(r.p_value)),
            None => (Some(0.0), Some(1.0)),
        },
    };
    let r_average = match r_surrogate {
        Some(s) => (r_base + s) / 2.0,
        None => r_base,
    };
    Ok(ScreeningScore {
        experiment_id: assignment.experiment_id.clone(),
        cluster,
        outcome: outcome.to_string(),
        r_base,
        r_surrogate,
        r_average,
        p_base,
        p_surrogate,
        hazard_ratio,
        direction: HazardDirection::of(hazard_ratio),
        untestable: base.is_none(),
        flags,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ScreeningInput<'a> {
    pub assignment: &'a ClusterAssignment,
    pub surrogate: Option<&'a ClusterAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningOptions {
    pub cox: CoxOptions,
    pub surrogate_scoring: bool,
}

impl Default for ScreeningOptions {
    fn default() -> Self {
        Self {
            cox: CoxOptions::default(),
            surrogate_scoring: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningRow {
    pub experiment_id: String,
    pub k: u32,
    pub cluster: u32,
}

impl ScreeningRow {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.experiment_id, self.k, self.cluster)
    }
}

/// Row indices, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rankings {
    pub base: Vec<usize>,
    pub surrogate: Vec<usize>,
    pub average: Vec<usize>,
}

impl Rankings {
    pub fn get(&self, variant: ScoreVariant) -> &[usize] {
        match variant {
            ScoreVariant::Base => &self.base,
            ScoreVariant::Surrogate => &self.surrogate,
            ScoreVariant::Average => &self.average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningMatrix {
    pub rules_hash: String,
    pub outcomes: Vec<String>,
    pub rows: Vec<ScreeningRow>,
    /// `cells[row][outcome]`.
    pub cells: Vec<Vec<ScreeningScore>>,
    pub rankings: BTreeMap<String, Rankings>,
}

impl ScreeningMatrix {
    pub fn outcome_index(&self, outcome: &str) -> Result<usize, ScreeningError> {
        self.outcomes
            .iter()
            .position(|o| o == outcome)
            .ok_or_else(|| ScreeningError::MissingOutcome(outcome.to_string()))
    }

    pub fn cell(&self, row: usize, outcome: &str) -> Result<&ScreeningScore, ScreeningError> {
        Ok(&self.cells[row][self.outcome_index(outcome)?])
    }

    /// Refuses reuse of this matrix under rules that hash differently.
    pub fn check_rules(&self, current: &str) -> Result<(), ScreeningError> {
        if self.rules_hash == current {
            Ok(())
        } else {
            Err(ScreeningError::RulesChanged {
                recorded: self.rules_hash.clone(),
                current: current.to_string(),
            })
        }
    }

    /// Rows whose experiment matches, ranked for one outcome and variant.
    pub fn ranked(&self, outcome: &str, variant: ScoreVariant) -> Result<Vec<&ScreeningScore>, ScreeningError> {
        let o = self.outcome_index(outcome)?;
        Ok(self.rankings[outcome]
            .get(variant)
            .iter()
            .map(|&r| &self.cells[r][o])
            .collect())
    }
}

/// SHA-256 over the canonical JSON of the screening rules.
pub fn rules_hash<T: Serialize>(rules: &T) -> Result<String, ScreeningError> {
    let v = serde_json::to_value(rules).map_err(|e| ScreeningError::Format(e.to_string()))?;
    // serde_json::Value maps are ordered, so this serialization is canonical
    let bytes = serde_json::to_vec(&v).map_err(|e| ScreeningError::Format(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn rank(rows: &[ScreeningRow], scores: &[Option<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match (scores[a], scores[b]) {
            (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        by_score
            .then_with(|| rows[a].experiment_id.cmp(&rows[b].experiment_id))
            .then_with(|| rows[a].cluster.cmp(&rows[b].cluster))
    });
    order
}

/// Scores every cluster of every experiment against every outcome.
pub fn screen_all(
    experiments: &[ScreeningInput<'_>],
    outcomes: &BTreeMap<String, Vec<SurvivalRecord>>,
    options: &ScreeningOptions,
    rules_hash: &str,
) -> Result<ScreeningMatrix, ScreeningError> {
    let mut rows = Vec::new();
    let mut jobs = Vec::new();
    for e in experiments {
        let surrogate = if options.surrogate_scoring {
            Some(
                e.surrogate
                    .ok_or_else(|| ScreeningError::MissingSurrogate(e.assignment.experiment_id.clone()))?,
            )
        } else {
            None
        };
        for c in 1..=e.assignment.k {
            rows.push(ScreeningRow {
                experiment_id: e.assignment.experiment_id.clone(),
                k: e.assignment.k,
                cluster: c,
            });
            jobs.push((e.assignment, surrogate, c));
        }
    }
    let names: Vec<String> = outcomes.keys().cloned().collect();
    let cells: Vec<Vec<ScreeningScore>> = jobs
        .par_iter()
        .map(|(a, s, c)| {
            names
                .iter()
                .map(|o| score_cluster(a, *c, o, &outcomes[o], *s, &options.cox))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let mut rankings = BTreeMap::new();
    for (o, name) in names.iter().enumerate() {
        let col = |v: ScoreVariant| -> Vec<Option<f64>> { cells.iter().map(|r| r[o].value(v)).collect() };
        rankings.insert(
            name.clone(),
            Rankings {
                base: rank(&rows, &col(ScoreVariant::Base)),
                surrogate: rank(&rows, &col(ScoreVariant::Surrogate)),
                average: rank(&rows, &col(ScoreVariant::Average)),
            },
        );
    }
    Ok(ScreeningMatrix {
        rules_hash: rules_hash.to_string(),
        outcomes: names,
        rows,
        cells,
        rankings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub experiment_id: String,
    pub k: u32,
    pub cluster: u32,
    pub label: String,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub color: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterTable {
    pub variant: ScoreVariant,
    pub x_outcome: String,
    pub y_outcome: String,
    pub color_outcome: String,
    pub rows: Vec<ScatterRow>,
}

/// One point per (experiment, cluster): two outcomes on the axes and a third
/// as colour. Untestable cells are `None`.
pub fn export_scatter_heatmap(
    matrix: &ScreeningMatrix,
    primary: &str,
    x_outcome: &str,
    y_outcome: &str,
    variant: ScoreVariant,
) -> Result<ScatterTable, ScreeningError> {
    let (c, x, y) = (
        matrix.outcome_index(primary)?,
        matrix.outcome_index(x_outcome)?,
        matrix.outcome_index(y_outcome)?,
    );
    if matrix.outcomes.len() < 3 {
        return Err(ScreeningError::TooFewOutcomes(matrix.outcomes.len()));
    }
    let pick = |row: &[ScreeningScore], o: usize| {
        let s = &row[o];
        if s.untestable {
            None
        } else {
            s.value(variant)
        }
    };
    let rows = matrix
        .rows
        .iter()
        .zip(&matrix.cells)
        .map(|(r, cells)| ScatterRow {
            experiment_id: r.experiment_id.clone(),
            k: r.k,
            cluster: r.cluster,
            label: r.label(),
            x: pick(cells, x),
            y: pick(cells, y),
            color: pick(cells, c),
        })
        .collect();
    Ok(ScatterTable {
        variant,
        x_outcome: x_outcome.to_string(),
        y_outcome: y_outcome.to_string(),
        color_outcome: primary.to_string(),
        rows,
    })
}

/// Delimited form of the scatter table; nulls are empty fields.
pub fn write_scatter_csv<W: Write>(writer: W, table: &ScatterTable) -> Result<(), ScreeningError> {
    let mut w = csv::Writer::from_writer(writer);
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        "label",
        "experiment_id",
        "k",
        "cluster",
        &table.x_outcome,
        &table.y_outcome,
        &table.color_outcome,
    ])
    .map_err(|e| ScreeningError::Format(e.to_string()))?;
    for r in &table.rows {
        w.write_record([
            r.label.clone(),
            r.experiment_id.clone(),
            r.k.to_string(),
            r.cluster.to_string(),
            fmt(r.x),
            fmt(r.y),
            fmt(r.color),
        ])
        .map_err(|e| ScreeningError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
