//! Cluster-vs-rest feature enrichment tables.

mod contingency;
mod rank;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterAssignment;
use crate::featurize::{FeatureKind, FeatureMatrix};

pub use contingency::{
    categorical_test, chi_squared, fisher_exact, odds_ratio, ContingencyTable, Direction, OddsRatio, OddsValue,
    SpecialOdds, TestKind, TestResult,
};
pub use rank::{kruskal_wallis, KruskalWallis};

#[derive(Debug, Error)]
pub enum EnrichmentError {
    #[error("contingency table has an empty {0} margin")]
    EmptyMargin(&'static str),
    #[error("untestable: {0}")]
    Untestable(String),
    #[error("p-value {0} outside [0, 1]")]
    InvalidP(f64),
    #[error("patient '{0}' is assigned but has no feature row")]
    MissingPatient(String),
    #[error("assignment has fewer than two clusters")]
    TooFewClusters,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p: &[f64]) -> Result<Vec<f64>, EnrichmentError> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(EnrichmentError::InvalidP(*bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        // multiply by a ratio >= 1 so rounding never pushes q below p
        running = running.min(p[i] * (m as f64 / (rank + 1) as f64));
        out[i] = running.min(1.0);
    }
    Ok(out)
}

/// `count (pct%)`, percent rounded to a whole number.
pub fn format_frequency(count: usize, total: usize) -> String {
    if total == 0 {
        return format!("{count} (-)");
    }
    format!("{count} ({:.0}%)", 100.0 * count as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousMode {
    /// One cluster against everyone else.
    #[default]
    ClusterVsRest,
    /// One test across all clusters at once, shared by that feature's rows.
    AllClusters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionFamily {
    /// Every row of the report.
    #[default]
    Report,
    /// Rows of one cluster at a time.
    PerCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrichmentOptions {
    pub significance: f64,
    pub continuous_mode: ContinuousMode,
    pub family: CorrectionFamily,
}

impl Default for EnrichmentOptions {
    fn default() -> Self {
        Self {
            significance: 0.05,
            continuous_mode: ContinuousMode::ClusterVsRest,
            family: CorrectionFamily::Report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSummary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub sd: f64,
}

impl ContinuousSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n: v.len(),
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
            mean,
            sd,
        })
    }

    pub fn render(&self) -> String {
        format!("{:.1} ({:.1}-{:.1})", self.median, self.q1, self.q3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentRow {
    pub cluster: u32,
    pub feature_id: String,
    pub display_name: String,
    pub categorical: bool,
    pub cluster_size: usize,
    pub rest_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<ContingencyTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_summary: Option<ContinuousSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_summary: Option<ContinuousSummary>,
    pub test: Option<TestKind>,
    pub statistic: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odds_ratio: Option<OddsRatio>,
    pub direction: Direction,
    pub significant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub untestable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterHeader {
    pub cluster: u32,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentReport {
    pub experiment_id: String,
    pub patients: usize,
    pub clusters: Vec<ClusterHeader>,
    pub options: EnrichmentOptions,
    /// Sorted by adjusted p, untestable rows last.
    pub rows: Vec<EnrichmentRow>,
}

struct Columns {
    /// Matrix row index per clustered patient, and that patient's cluster.
    rows: Vec<(usize, u32)>,
    clusters: Vec<u32>,
}

fn clustered_rows(matrix: &FeatureMatrix, assignment: &ClusterAssignment) -> Result<Columns, EnrichmentError> {
    let mut rows = Vec::new();
    for (p, label) in &assignment.labels {
        if let Some(c) = label.cluster() {
            let r = matrix
                .row_index(p)
                .ok_or_else(|| EnrichmentError::MissingPatient(p.to_string()))?;
            rows.push((r, c));
        }
    }
    let mut clusters: Vec<u32> = rows.iter().map(|(_, c)| *c).collect();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(EnrichmentError::TooFewClusters);
    }
    Ok(Columns { rows, clusters })
}

fn is_categorical(kind: FeatureKind) -> bool {
    matches!(kind, FeatureKind::Binary | FeatureKind::Quantised)
}

fn row_for(
    matrix: &FeatureMatrix,
    cols: &Columns,
    col: usize,
    cluster: u32,
    options: &EnrichmentOptions,
) -> EnrichmentRow {
    let f = &matrix.features()[col];
    let categorical = is_categorical(f.kind);
    let cluster_size = cols.rows.iter().filter(|(_, c)| *c == cluster).count();
    let mut row = EnrichmentRow {
        cluster,
        feature_id: f.feature_id.clone(),
        display_name: f.display_name.clone(),
        categorical,
        cluster_size,
        rest_size: cols.rows.len() - cluster_size,
        table: None,
        cluster_summary: None,
        rest_summary: None,
        test: None,
        statistic: None,
        p_raw: None,
        p_adjusted: None,
        odds_ratio: None,
        direction: Direction::Neutral,
        significant: false,
        untestable: None,
    };
    if categorical {
        let (mut a, mut b, mut c, mut d) = (0, 0, 0, 0);
        for &(r, cl) in &cols.rows {
            let present = !matrix.is_missing(r, col) && matrix.get(r, col) > 0.0;
            match (cl == cluster, present) {
                (true, true) => a += 1,
                (true, false) => b += 1,
                (false, true) => c += 1,
                (false, false) => d += 1,
            }
        }
        let table = ContingencyTable::new(a, b, c, d);
        match categorical_test(&table) {
            Ok(t) => {
                row.test = Some(t.test);
                row.statistic = t.statistic;
                row.p_raw = Some(t.p_value);
            }
            Err(e) => row.untestable = Some(e.to_string()),
        }
        let or = odds_ratio(&table);
        row.direction = or.direction;
        row.odds_ratio = Some(or);
        row.table = Some(table);
    } else {
        let mut inside = Vec::new();
        let mut outside = Vec::new();
        let mut by_cluster: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for &(r, cl) in &cols.rows {
            if matrix.is_missing(r, col) {
                continue;
            }
            let v = matrix.get(r, col);
            by_cluster.entry(cl).or_default().push(v);
            if cl == cluster {
                inside.push(v);
            } else {
                outside.push(v);
            }
        }
        row.cluster_summary = ContinuousSummary::of(&inside);
        row.rest_summary = ContinuousSummary::of(&outside);
        let result = match options.continuous_mode {
            ContinuousMode::ClusterVsRest => kruskal_wallis(&[&inside, &outside]),
            ContinuousMode::AllClusters => {
                let groups: Vec<&[f64]> = by_cluster.values().map(|v| v.as_slice()).collect();
                kruskal_wallis(&groups)
            }
        };
        if inside.is_empty() || outside.is_empty() {
            row.untestable = Some("a group has no observed values".into());
        } else {
            match result {
                Ok(kw) => {
                    row.test = Some(TestKind::KruskalWallis);
                    row.statistic = Some(kw.h);
                    row.p_raw = Some(kw.p_value);
                }
                Err(e) => row.untestable = Some(e.to_string()),
            }
        }
        if let (Some(i), Some(o)) = (&row.cluster_summary, &row.rest_summary) {
            row.direction = match i.median.total_cmp(&o.median) {
                std::cmp::Ordering::Greater => Direction::Over,
                std::cmp::Ordering::Less => Direction::Under,
                std::cmp::Ordering::Equal => Direction::Neutral,
            };
        }
    }
    row
}

/// Tests every feature for every cluster against the remaining clustered
/// patients, then applies Benjamini-Hochberg over the chosen family.
pub fn build_enrichment_table(
    matrix: &FeatureMatrix,
    assignment: &ClusterAssignment,
    options: &EnrichmentOptions,
) -> Result<EnrichmentReport, EnrichmentError> {
    let cols = clustered_rows(matrix, assignment)?;
    let jobs: Vec<(u32, usize)> = cols
        .clusters
        .iter()
        .flat_map(|c| (0..matrix.ncols()).map(move |j| (*c, j)))
        .collect();
    let mut rows: Vec<EnrichmentRow> = jobs
        .par_iter()
        .map(|&(c, j)| row_for(matrix, &cols, j, c, options))
        .collect();

    let families: Vec<Vec<usize>> = match options.family {
        CorrectionFamily::Report => vec![(0..rows.len()).collect()],
        CorrectionFamily::PerCluster => cols
            .clusters
            .iter()
            .map(|c| (0..rows.len()).filter(|&i| rows[i].cluster == *c).collect())
            .collect(),
    };
    for family in families {
        let tested: Vec<usize> = family.into_iter().filter(|&i| rows[i].p_raw.is_some()).collect();
        let raw: Vec<f64> = tested.iter().map(|&i| rows[i].p_raw.unwrap_or(1.0)).collect();
        let adjusted = bh_adjust(&raw)?;
        for (&i, q) in tested.iter().zip(adjusted) {
            rows[i].p_adjusted = Some(q);
            rows[i].significant = q < options.significance;
        }
    }
    rows.sort_by(|x, y| {
        let key = |r: &EnrichmentRow| r.p_adjusted.unwrap_or(f64::INFINITY);
        key(x)
            .total_cmp(&key(y))
            .then(x.cluster.cmp(&y.cluster))
            .then_with(|| x.feature_id.cmp(&y.feature_id))
    });
    let clusters = cols
        .clusters
        .iter()
        .map(|c| ClusterHeader {
            cluster: *c,
            size: cols.rows.iter().filter(|(_, x)| x == c).count(),
        })
        .collect();
    Ok(EnrichmentReport {
        experiment_id: assignment.experiment_id.clone(),
        patients: cols.rows.len(),
        clusters,
        options: options.clone(),
        rows,
    })
}

impl EnrichmentReport {
    pub fn rows_for(&self, cluster: u32) -> impl Iterator<Item = &EnrichmentRow> {
        self.rows.iter().filter(move |r| r.cluster == cluster)
    }

    /// Feature-by-cluster layout: one line per feature with an all-patients
    /// column and one frequency (or median and IQR) column per cluster.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["Feature".to_string(), "All Patients (freq. %)".to_string()];
        for c in &self.clusters {
            header.push(format!("Cluster {} \u{2013} {} patients (freq. %)", c.cluster, c.size));
        }
        let mut features: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !features.iter().any(|(id, _)| *id == r.feature_id) {
                features.push((&r.feature_id, &r.display_name));
            }
        }
        let mut lines = Vec::new();
        for (id, display) in features {
            let rows: Vec<&EnrichmentRow> = self.rows.iter().filter(|r| r.feature_id == id).collect();
            let mut line = vec![display.to_string()];
            let first = rows[0];
            if let Some(t) = first.table {
                line.push(format_frequency((t.a + t.c) as usize, self.patients));
            } else {
                line.push(String::new());
            }
            for c in &self.clusters {
                let cell = rows.iter().find(|r| r.cluster == c.cluster).map_or(String::new(), |r| {
                    match (&r.table, &r.cluster_summary) {
                        (Some(t), _) => format_frequency(t.a as usize, r.cluster_size),
                        (None, Some(s)) => s.render(),
                        (None, None) => String::new(),
                    }
                });
                line.push(cell);
            }
            lines.push(line);
        }
        (header, lines)
    }

    pub fn write_table_csv<W: Write>(&self, writer: W) -> Result<(), EnrichmentError> {
        let (header, lines) = self.table();
        let mut w = csv::Writer::from_writer(writer);
        let fmt = |e: csv::Error| EnrichmentError::Format(e.to_string());
        w.write_record(&header).map_err(fmt)?;
        for l in lines {
            w.write_record(&l).map_err(fmt)?;
        }
        w.flush()?;
        Ok(())
    }
}
