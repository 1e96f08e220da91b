use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{FeatureDescriptor, FeatureKind, FeaturizeError};
use crate::ehr::PatientId;

/// Dense patients x features matrix, row-major.
///
/// Missing cells hold NaN and are marked in `missing`; every other cell is
/// finite, and binary columns hold only 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    patient_ids: Vec<PatientId>,
    features: Vec<FeatureDescriptor>,
    values: Vec<f64>,
    missing: Vec<bool>,
    column_lookup: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    patient_ids: Vec<PatientId>,
    features: Vec<FeatureDescriptor>,
    rows: Vec<Vec<Option<f64>>>,
}

impl Serialize for FeatureMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows = (0..self.nrows())
            .map(|r| {
                (0..self.ncols())
                    .map(|c| (!self.is_missing(r, c)).then(|| self.get(r, c)))
                    .collect()
            })
            .collect();
        MatrixWire {
            patient_ids: self.patient_ids.clone(),
            features: self.features.clone(),
            rows,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = MatrixWire::deserialize(d)?;
        let ncols = wire.features.len();
        let mut values = Vec::with_capacity(wire.rows.len() * ncols);
        let mut missing = Vec::with_capacity(wire.rows.len() * ncols);
        for row in &wire.rows {
            if row.len() != ncols {
                return Err(serde::de::Error::custom("row length differs from feature count"));
            }
            for cell in row {
                values.push(cell.unwrap_or(f64::NAN));
                missing.push(cell.is_none());
            }
        }
        FeatureMatrix::new(wire.patient_ids, wire.features, values, missing).map_err(serde::de::Error::custom)
    }
}

impl FeatureMatrix {
    pub fn new(
        patient_ids: Vec<PatientId>,
        features: Vec<FeatureDescriptor>,
        values: Vec<f64>,
        missing: Vec<bool>,
    ) -> Result<Self, FeaturizeError> {
        let n = patient_ids.len() * features.len();
        if values.len() != n || missing.len() != n {
            return Err(FeaturizeError::Shape(format!(
                "{} rows x {} columns needs {n} cells, got {} values / {} mask",
                patient_ids.len(),
                features.len(),
                values.len(),
                missing.len()
            )));
        }
        let unique: BTreeSet<&PatientId> = patient_ids.iter().collect();
        if unique.len() != patient_ids.len() {
            return Err(FeaturizeError::Shape("duplicate patient ids".into()));
        }
        let mut column_lookup = HashMap::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            if column_lookup.insert(f.feature_id.clone(), i).is_some() {
                return Err(FeaturizeError::Shape(format!(
                    "duplicate feature id '{}'",
                    f.feature_id
                )));
            }
        }
        let ncols = features.len();
        for (i, (v, m)) in values.iter().zip(&missing).enumerate() {
            let f = &features[i % ncols.max(1)];
            if *m {
                if !v.is_nan() {
                    return Err(FeaturizeError::Shape(format!(
                        "masked cell in '{}' is not NaN",
                        f.feature_id
                    )));
                }
            } else if !v.is_finite() {
                return Err(FeaturizeError::Shape(format!("non-finite value in '{}'", f.feature_id)));
            } else if matches!(f.kind, FeatureKind::Binary | FeatureKind::Quantised) && *v != 0.0 && *v != 1.0 {
                return Err(FeaturizeError::Shape(format!(
                    "binary column '{}' holds {v}",
                    f.feature_id
                )));
            }
        }
        Ok(Self {
            patient_ids,
            features,
            values,
            missing,
            column_lookup,
        })
    }

    /// Matrix without missing cells.
    pub fn dense(
        patient_ids: Vec<PatientId>,
        features: Vec<FeatureDescriptor>,
        values: Vec<f64>,
    ) -> Result<Self, FeaturizeError> {
        let missing = vec![false; values.len()];
        Self::new(patient_ids, features, values, missing)
    }

    pub fn nrows(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn ncols(&self) -> usize {
        self.features.len()
    }

    pub fn patient_ids(&self) -> &[PatientId] {
        &self.patient_ids
    }

    pub fn features(&self) -> &[FeatureDescriptor] {
        &self.features
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols() + col]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.ncols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.ncols();
        &self.values[row * n..(row + 1) * n]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.nrows()).map(|r| self.get(r, col)).collect()
    }

    pub fn column_index(&self, feature_id: &str) -> Option<usize> {
        self.column_lookup.get(feature_id).copied()
    }

    pub fn row_index(&self, id: &PatientId) -> Option<usize> {
        self.patient_ids.iter().position(|p| p == id)
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|m| *m)
    }

    /// Fraction of cells in the row that are present and nonzero.
    pub fn density(&self, row: usize) -> f64 {
        if self.ncols() == 0 {
            return 0.0;
        }
        let n = self.ncols();
        let start = row * n;
        let filled = (start..start + n)
            .filter(|&i| !self.missing[i] && self.values[i] != 0.0)
            .count();
        filled as f64 / n as f64
    }

    /// Keeps the given rows in the given order.
    pub fn select_rows(&self, ids: &[PatientId]) -> Result<Self, FeaturizeError> {
        let lookup: HashMap<&PatientId, usize> = self.patient_ids.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let n = self.ncols();
        let mut values = Vec::with_capacity(ids.len() * n);
        let mut missing = Vec::with_capacity(ids.len() * n);
        for id in ids {
            let r = *lookup
                .get(id)
                .ok_or_else(|| FeaturizeError::UnknownPatient(id.to_string()))?;
            values.extend_from_slice(&self.values[r * n..(r + 1) * n]);
            missing.extend_from_slice(&self.missing[r * n..(r + 1) * n]);
        }
        Self::new(ids.to_vec(), self.features.clone(), values, missing)
    }

    pub fn retain_rows(&self, keep: impl Fn(&PatientId) -> bool) -> Self {
        let ids: Vec<PatientId> = self.patient_ids.iter().filter(|p| keep(p)).cloned().collect();
        self.select_rows(&ids).expect("subset of existing rows")
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Self, FeaturizeError> {
        if let Some(c) = cols.iter().find(|c| **c >= self.ncols()) {
            return Err(FeaturizeError::Shape(format!("column {c} out of range")));
        }
        let features = cols.iter().map(|&c| self.features[c].clone()).collect();
        let mut values = Vec::with_capacity(self.nrows() * cols.len());
        let mut missing = Vec::with_capacity(self.nrows() * cols.len());
        for r in 0..self.nrows() {
            for &c in cols {
                values.push(self.get(r, c));
                missing.push(self.is_missing(r, c));
            }
        }
        Self::new(self.patient_ids.clone(), features, values, missing)
    }

    pub fn drop_columns(&self, feature_ids: &BTreeSet<String>) -> Self {
        let keep: Vec<usize> = (0..self.ncols())
            .filter(|&c| !feature_ids.contains(&self.features[c].feature_id))
            .collect();
        self.select_columns(&keep).expect("indices in range")
    }

    /// Appends columns; `columns[i]` holds one value per row.
    pub fn with_columns(&self, added: Vec<(FeatureDescriptor, Vec<f64>)>) -> Result<Self, FeaturizeError> {
        let ncols = self.ncols() + added.len();
        let mut values = Vec::with_capacity(self.nrows() * ncols);
        let mut missing = Vec::with_capacity(self.nrows() * ncols);
        for (_, col) in &added {
            if col.len() != self.nrows() {
                return Err(FeaturizeError::Shape(
                    "added column length differs from row count".into(),
                ));
            }
        }
        for r in 0..self.nrows() {
            values.extend_from_slice(self.row(r));
            missing.extend_from_slice(&self.missing[r * self.ncols()..(r + 1) * self.ncols()]);
            for (_, col) in &added {
                values.push(col[r]);
                missing.push(col[r].is_nan());
            }
        }
        let mut features = self.features.clone();
        features.extend(added.into_iter().map(|(d, _)| d));
        Self::new(self.patient_ids.clone(), features, values, missing)
    }

    /// Reorders columns by feature id.
    pub fn sorted_columns(&self) -> Self {
        let mut order: Vec<usize> = (0..self.ncols()).collect();
        order.sort_by(|a, b| self.features[*a].feature_id.cmp(&self.features[*b].feature_id));
        self.select_columns(&order).expect("indices in range")
    }

    /// Dense delimited text: header `patient_id,<feature ids>`, empty cell for missing.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FeaturizeError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["patient_id".to_string()];
        header.extend(self.features.iter().map(|f| f.feature_id.clone()));
        w.write_record(&header)
            .map_err(|e| FeaturizeError::Format(e.to_string()))?;
        for r in 0..self.nrows() {
            let mut rec = vec![self.patient_ids[r].to_string()];
            for c in 0..self.ncols() {
                rec.push(if self.is_missing(r, c) {
                    String::new()
                } else {
                    format_cell(self.get(r, c))
                });
            }
            w.write_record(&rec)
                .map_err(|e| FeaturizeError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a matrix written by [`write_csv`](Self::write_csv) with its
    /// descriptor sidecar; header order must match the descriptors.
    pub fn read_csv<R: Read>(reader: R, features: Vec<FeatureDescriptor>) -> Result<Self, FeaturizeError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| FeaturizeError::Format(e.to_string()))?
            .clone();
        let names: Vec<&str> = header.iter().skip(1).collect();
        let expected: Vec<&str> = features.iter().map(|f| f.feature_id.as_str()).collect();
        if names != expected {
            return Err(FeaturizeError::Format("header does not match descriptors".into()));
        }
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut missing = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| FeaturizeError::Format(e.to_string()))?;
            ids.push(PatientId::new(rec.get(0).unwrap_or_default()));
            for cell in rec.iter().skip(1) {
                if cell.is_empty() {
                    values.push(f64::NAN);
                    missing.push(true);
                } else {
                    values.push(
                        cell.parse()
                            .map_err(|_| FeaturizeError::Format(format!("bad number '{cell}'")))?,
                    );
                    missing.push(false);
                }
            }
        }
        Self::new(ids, features, values, missing)
    }
}

fn format_cell(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityFilter {
    pub matrix: FeatureMatrix,
    pub removed: Vec<PatientId>,
    pub threshold: f64,
}

/// Removes rows whose density (present, nonzero cells over all columns) is
/// below `threshold`.
pub fn filter_sparse_patients(matrix: &FeatureMatrix, threshold: f64) -> SparsityFilter {
    let mut removed = Vec::new();
    let mut kept = Vec::new();
    for (r, id) in matrix.patient_ids().iter().enumerate() {
        if matrix.density(r) < threshold {
            removed.push(id.clone());
        } else {
            kept.push(id.clone());
        }
    }
    SparsityFilter {
        matrix: matrix.select_rows(&kept).expect("subset of rows"),
        removed,
        threshold,
    }
}
