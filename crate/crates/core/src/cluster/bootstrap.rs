use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{jaccard_from_labels, kmeans, ClusterError, KMeansOptions};
use crate::featurize::FeatureMatrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    pub k_values: Vec<usize>,
    pub subsets: usize,
    pub fraction: f64,
    /// A second k is reported when its mean agreement is this close to the best.
    pub runner_up_margin: f64,
    pub kmeans: KMeansOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            k_values: (3..=10).collect(),
            subsets: 10,
            fraction: 0.75,
            runner_up_margin: 0.02,
            kmeans: KMeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionReport {
    pub candidates: Vec<usize>,
    pub mean_agreement: Vec<f64>,
    /// `per_subset[i][s]`: agreement of subset `s` at `candidates[i]`.
    pub per_subset: Vec<Vec<f64>>,
    pub chosen_k: Option<usize>,
    pub runner_up: Option<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl KSelectionReport {
    /// Chosen k followed by the runner-up, when there is one.
    pub fn selected(&self) -> Vec<usize> {
        self.chosen_k.into_iter().chain(self.runner_up).collect()
    }
}

/// For every candidate k, clusters all rows (reference) and `subsets` random
/// subsets of `fraction` of the rows drawn without replacement, and scores
/// each subset model against the reference restricted to the same rows.
/// The k with the highest mean agreement is chosen; ties go to the larger k.
pub fn bootstrap_select_k(
    matrix: &FeatureMatrix,
    options: &BootstrapOptions,
    run_seed: u64,
) -> Result<KSelectionReport, ClusterError> {
    if !(options.fraction > 0.0 && options.fraction <= 1.0) {
        return Err(ClusterError::InvalidOptions("fraction must be in (0, 1]".into()));
    }
    if options.subsets == 0 || options.k_values.is_empty() {
        return Err(ClusterError::InvalidOptions(
            "need at least one subset and one k".into(),
        ));
    }
    if matrix.has_missing() {
        return Err(ClusterError::MissingValues);
    }
    let n = matrix.nrows();
    if n == 0 || matrix.ncols() == 0 {
        return Err(ClusterError::EmptyMatrix);
    }
    let rows: Vec<&[f64]> = (0..n).map(|r| matrix.row(r)).collect();
    let mut warnings = Vec::new();
    let mut candidates: Vec<usize> = options.k_values.clone();
    candidates.sort_unstable();
    candidates.dedup();

    if rows.iter().all(|r| *r == rows[0]) {
        warnings.push("all rows are identical; the number of clusters is undefined".into());
        return Ok(KSelectionReport {
            candidates,
            mean_agreement: Vec::new(),
            per_subset: Vec::new(),
            chosen_k: None,
            runner_up: None,
            warnings,
        });
    }

    let m = ((n as f64) * options.fraction).floor() as usize;
    let subsets: Vec<Vec<usize>> = (0..options.subsets)
        .map(|s| {
            let mut rng = seed::rng(run_seed, &[1, s as u64]);
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    let usable: Vec<usize> = candidates.iter().copied().filter(|&k| k >= 1 && k <= m).collect();
    for k in candidates.iter().filter(|k| !usable.contains(k)) {
        warnings.push(format!("k = {k} skipped: subsets hold only {m} rows"));
    }
    if usable.is_empty() {
        return Err(ClusterError::TooManyClusters {
            k: candidates[0],
            rows: m,
        });
    }

    let results: Vec<Vec<f64>> = usable
        .par_iter()
        .map(|&k| -> Result<Vec<f64>, ClusterError> {
            // one seed per k: a subset holding every row reproduces the reference
            let k_seed = seed::derive(run_seed, &[2, k as u64]);
            let reference = kmeans(&rows, k, k_seed, &options.kmeans)?;
            subsets
                .iter()
                .map(|idx| {
                    let sub_rows: Vec<&[f64]> = idx.iter().map(|&i| rows[i]).collect();
                    let fit = kmeans(&sub_rows, k, k_seed, &options.kmeans)?;
                    let restricted: Vec<usize> = idx.iter().map(|&i| reference.labels[i]).collect();
                    Ok(jaccard_from_labels(&fit.labels, &restricted))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let means: Vec<f64> = results.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    const TIE: f64 = 1e-12;
    let mut best = 0;
    for i in 1..means.len() {
        if means[i] >= means[best] - TIE {
            best = i;
        }
    }
    let runner_up = (0..means.len())
        .filter(|&i| i != best && means[i] >= means[best] - options.runner_up_margin)
        .max_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)))
        .map(|i| usable[i]);

    Ok(KSelectionReport {
        candidates: usable.clone(),
        mean_agreement: means,
        per_subset: results,
        chosen_k: Some(usable[best]),
        runner_up,
        warnings,
    })
}
