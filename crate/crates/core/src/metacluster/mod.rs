//! Consensus ("meta") clustering over many cluster assignments of one cohort.

mod linkage;
mod membership;
mod silhouette;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterAssignment, ClusterError, ClusterLabel, Provenance};
use crate::ehr::PatientId;

pub use linkage::{agglomerate, Dendrogram, Merge};
pub use membership::{build_membership_matrix, hamming_distance, DistanceMatrix, MembershipColumn, MembershipMatrix};
pub use silhouette::{local_maxima, select_meta_k, silhouette, KSelection, SilhouettePoint};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("meta clustering requires ≥ 2 experiments (got {0})")]
    TooFewExperiments(usize),
    #[error("experiments '{first}' and '{other}' cover different patients")]
    CohortMismatch { first: String, other: String },
    #[error("rows have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("agglomeration needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("cannot cut {leaves} leaves into {k} clusters")]
    InvalidCut { k: usize, leaves: usize },
    #[error("silhouette undefined for fewer than two clusters")]
    SilhouetteUndefined,
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaOptions {
    pub k_min: usize,
    pub k_max: usize,
    /// Consensus clusters smaller than this become unclustered.
    pub min_cluster_size: usize,
    pub max_selected: usize,
}

impl Default for MetaOptions {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 12,
            min_cluster_size: 5,
            max_selected: 2,
        }
    }
}

/// Row and column order of the membership matrix for one selected k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapLayout {
    pub k: usize,
    /// Patient row indices in dendrogram leaf order.
    pub row_order: Vec<usize>,
    /// Column indices grouped by dominant meta cluster.
    pub column_order: Vec<usize>,
    /// Dominant meta cluster per column (by original column index).
    pub dominant: Vec<Option<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaAssignment {
    pub k: usize,
    pub assignment: ClusterAssignment,
    pub unclustered: Vec<PatientId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaClusterResult {
    pub source_experiments: Vec<String>,
    pub columns: Vec<MembershipColumn>,
    pub patient_ids: Vec<PatientId>,
    pub dendrogram: Dendrogram,
    pub silhouette_trace: Vec<SilhouettePoint>,
    pub selected_k: Vec<usize>,
    pub assignments: Vec<MetaAssignment>,
    pub heatmaps: Vec<HeatmapLayout>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl MetaClusterResult {
    pub fn assignment(&self, k: usize) -> Option<&MetaAssignment> {
        self.assignments.iter().find(|a| a.k == k)
    }

    /// Consensus assignment at the first selected k.
    pub fn primary(&self) -> Option<&MetaAssignment> {
        self.selected_k.first().and_then(|k| self.assignment(*k))
    }
}

/// Turns a cut into an assignment, dropping clusters below `min_size`.
/// Surviving clusters are numbered 1.. by their smallest patient.
fn consensus_assignment(
    patient_ids: &[PatientId],
    cut: &[usize],
    k: usize,
    min_size: usize,
    sources: &[String],
) -> Result<MetaAssignment, MetaError> {
    let mut sizes = vec![0usize; k];
    for &c in cut {
        sizes[c] += 1;
    }
    // cut labels already follow smallest-member order
    let mut relabel = vec![None; k];
    let mut next = 1u32;
    for c in 0..k {
        if sizes[c] >= min_size {
            relabel[c] = Some(next);
            next += 1;
        }
    }
    let mut labels = BTreeMap::new();
    let mut unclustered = Vec::new();
    for (p, &c) in patient_ids.iter().zip(cut) {
        let label = match relabel[c] {
            Some(l) => ClusterLabel::Cluster(l),
            None => {
                unclustered.push(p.clone());
                ClusterLabel::Unclustered
            }
        };
        labels.insert(p.clone(), label);
    }
    let mut provenance = Provenance {
        algorithm: "meta-average-linkage".into(),
        preprocessing: "membership-hamming".into(),
        seed: None,
        ..Provenance::default()
    };
    provenance.notes.insert("k".into(), k.to_string());
    provenance.notes.insert("sources".into(), sources.join(","));
    let assignment = ClusterAssignment::new(format!("meta-k{k}"), labels, provenance)?;
    Ok(MetaAssignment {
        k,
        assignment,
        unclustered,
    })
}

fn heatmap(dendrogram: &Dendrogram, matrix: &MembershipMatrix, assignment: &MetaAssignment) -> HeatmapLayout {
    let row_order = dendrogram.leaf_order();
    let meta: Vec<Option<u32>> = matrix
        .patient_ids
        .iter()
        .map(|p| assignment.assignment.label(p).and_then(ClusterLabel::cluster))
        .collect();
    let k = assignment.assignment.k as usize;
    let dominant: Vec<Option<u32>> = (0..matrix.ncols())
        .map(|c| {
            let mut counts = vec![0usize; k + 1];
            for (r, m) in meta.iter().enumerate() {
                if let (Some(m), true) = (m, matrix.get(r, c)) {
                    counts[*m as usize] += 1;
                }
            }
            let mut best: Option<u32> = None;
            for m in 1..=k {
                if counts[m] > 0 && best.is_none_or(|b| counts[m] > counts[b as usize]) {
                    best = Some(m as u32);
                }
            }
            best
        })
        .collect();
    let mut column_order: Vec<usize> = (0..matrix.ncols()).collect();
    column_order.sort_by_key(|&c| (dominant[c].unwrap_or(u32::MAX), c));
    HeatmapLayout {
        k: assignment.k,
        row_order,
        column_order,
        dominant,
    }
}

/// Membership matrix, Hamming distances, average-linkage dendrogram,
/// silhouette-based choice of k and a consensus assignment per chosen k.
pub fn meta_cluster(experiments: &[ClusterAssignment], options: &MetaOptions) -> Result<MetaClusterResult, MetaError> {
    let matrix = build_membership_matrix(experiments)?;
    let dist = DistanceMatrix::hamming(&matrix);
    let dendrogram = agglomerate(&dist)?;
    let selection = select_meta_k(
        &dendrogram,
        |i, j| f64::from(dist.get(i, j)),
        options.k_min,
        options.k_max,
        options.max_selected.max(1),
    )?;
    let sources: Vec<String> = experiments.iter().map(|e| e.experiment_id.clone()).collect();
    let mut warnings = selection.warnings;
    let mut assignments = Vec::new();
    let mut heatmaps = Vec::new();
    for &k in &selection.selected {
        let cut = dendrogram.cut(k)?;
        let a = consensus_assignment(&matrix.patient_ids, &cut, k, options.min_cluster_size, &sources)?;
        if !a.unclustered.is_empty() {
            warnings.push(format!(
                "k = {k}: {} patients in clusters smaller than {} marked unclustered",
                a.unclustered.len(),
                options.min_cluster_size
            ));
        }
        heatmaps.push(heatmap(&dendrogram, &matrix, &a));
        assignments.push(a);
    }
    Ok(MetaClusterResult {
        source_experiments: sources,
        columns: matrix.columns.clone(),
        patient_ids: matrix.patient_ids.clone(),
        dendrogram,
        silhouette_trace: selection.trace,
        selected_k: selection.selected,
        assignments,
        heatmaps,
        warnings,
    })
}

/// Writes the reordered membership matrix for the layout at `k`, with a
/// trailing `meta_cluster` column.
pub fn write_heatmap_csv<W: Write>(
    writer: W,
    experiments: &[ClusterAssignment],
    result: &MetaClusterResult,
    k: usize,
) -> Result<(), MetaError> {
    let matrix = build_membership_matrix(experiments)?;
    let layout = result
        .heatmaps
        .iter()
        .find(|h| h.k == k)
        .ok_or_else(|| MetaError::InvalidOptions(format!("no layout for k = {k}")))?;
    let meta = &result
        .assignment(k)
        .ok_or_else(|| MetaError::InvalidOptions(format!("no assignment for k = {k}")))?
        .assignment;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id".to_string()];
    header.extend(layout.column_order.iter().map(|&c| matrix.columns[c].label.clone()));
    header.push("meta_cluster".into());
    w.write_record(&header).map_err(|e| MetaError::Format(e.to_string()))?;
    for &r in &layout.row_order {
        let p = &matrix.patient_ids[r];
        let mut rec = vec![p.to_string()];
        rec.extend(
            layout
                .column_order
                .iter()
                .map(|&c| if matrix.get(r, c) { "1" } else { "0" }.to_string()),
        );
        rec.push(meta.label(p).map_or_else(String::new, |l| l.to_string()));
        w.write_record(&rec).map_err(|e| MetaError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
