use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetaError;
use crate::cluster::ClusterAssignment;
use crate::ehr::PatientId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipColumn {
    /// `E<j>-C<i>`, with `j` the 1-based experiment position.
    pub label: String,
    pub experiment_id: String,
    pub experiment: usize,
    pub cluster: u32,
}

/// Patients x (experiment, cluster) indicator matrix, rows packed as bits.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    pub patient_ids: Vec<PatientId>,
    pub columns: Vec<MembershipColumn>,
    bits: Vec<Vec<u64>>,
}

impl MembershipMatrix {
    pub fn nrows(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row][col / 64] >> (col % 64) & 1 == 1
    }

    pub fn row(&self, row: usize) -> Vec<u8> {
        (0..self.ncols()).map(|c| u8::from(self.get(row, c))).collect()
    }

    pub fn row_bits(&self, row: usize) -> &[u64] {
        &self.bits[row]
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.label == label)
    }

    pub fn write_csv<W: Write>(&self, writer: W, row_order: &[usize], column_order: &[usize]) -> Result<(), MetaError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["patient_id".to_string()];
        header.extend(column_order.iter().map(|&c| self.columns[c].label.clone()));
        w.write_record(&header).map_err(|e| MetaError::Format(e.to_string()))?;
        for &r in row_order {
            let mut rec = vec![self.patient_ids[r].to_string()];
            rec.extend(
                column_order
                    .iter()
                    .map(|&c| if self.get(r, c) { "1" } else { "0" }.to_string()),
            );
            w.write_record(&rec).map_err(|e| MetaError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One indicator column per (experiment, cluster), in experiment order then
/// cluster label. Patients unclustered in an experiment get zeros there.
pub fn build_membership_matrix(experiments: &[ClusterAssignment]) -> Result<MembershipMatrix, MetaError> {
    if experiments.len() < 2 {
        return Err(MetaError::TooFewExperiments(experiments.len()));
    }
    let reference: BTreeSet<&PatientId> = experiments[0].labels.keys().collect();
    for e in &experiments[1..] {
        if e.labels.len() != reference.len() || e.labels.keys().any(|p| !reference.contains(p)) {
            return Err(MetaError::CohortMismatch {
                first: experiments[0].experiment_id.clone(),
                other: e.experiment_id.clone(),
            });
        }
    }
    let patient_ids: Vec<PatientId> = reference.into_iter().cloned().collect();
    let mut columns = Vec::new();
    let mut offsets = Vec::with_capacity(experiments.len());
    for (j, e) in experiments.iter().enumerate() {
        offsets.push(columns.len());
        for c in 1..=e.k {
            columns.push(MembershipColumn {
                label: format!("E{}-C{}", j + 1, c),
                experiment_id: e.experiment_id.clone(),
                experiment: j,
                cluster: c,
            });
        }
    }
    let words = columns.len().div_ceil(64).max(1);
    let bits = patient_ids
        .iter()
        .map(|p| {
            let mut row = vec![0u64; words];
            for (j, e) in experiments.iter().enumerate() {
                if let Some(c) = e.labels[p].cluster() {
                    let col = offsets[j] + c as usize - 1;
                    row[col / 64] |= 1 << (col % 64);
                }
            }
            row
        })
        .collect();
    Ok(MembershipMatrix {
        patient_ids,
        columns,
        bits,
    })
}

pub fn hamming_distance(a: &[u8], b: &[u8]) -> Result<u32, MetaError> {
    if a.len() != b.len() {
        return Err(MetaError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as u32)
}

/// Symmetric matrix of integer distances, stored in full.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<u32>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> u32 + Sync) -> Self {
        let d: Vec<u32> = (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                if i == j {
                    0
                } else {
                    f(i.min(j), i.max(j))
                }
            })
            .collect();
        Self { n, d }
    }

    pub fn hamming(m: &MembershipMatrix) -> Self {
        Self::from_fn(m.nrows(), |i, j| {
            m.row_bits(i)
                .iter()
                .zip(m.row_bits(j))
                .map(|(a, b)| (a ^ b).count_ones())
                .sum()
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }
}
