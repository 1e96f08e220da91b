use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClusterAssignment, ClusterError, Provenance};
use crate::featurize::FeatureMatrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Independent seeded restarts; the lowest inertia wins.
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            n_init: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Zero-based labels, numbered by first appearance in row order.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(rows: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centroids = vec![rows[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.push(rows[pick].to_vec());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(rows: &[&[f64]], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansFit {
    let n = rows.len();
    let k = centroids.len();
    let dim = rows[0].len();
    let mut labels = vec![usize::MAX; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let (c, _) = nearest(r, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        // empty clusters take the point farthest from its own centre
        loop {
            let mut counts = vec![0usize; k];
            for l in &labels {
                counts[*l] += 1;
            }
            let Some(empty) = counts.iter().position(|c| *c == 0) else {
                break;
            };
            let mut far = (0, -1.0);
            for (i, r) in rows.iter().enumerate() {
                if counts[labels[i]] > 1 {
                    let d = sq_dist(r, &centroids[labels[i]]);
                    if d > far.1 {
                        far = (i, d);
                    }
                }
            }
            labels[far.0] = empty;
            centroids[empty] = rows[far.0].to_vec();
            changed = true;
        }
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }
    }
    let inertia = rows
        .iter()
        .enumerate()
        .map(|(i, r)| sq_dist(r, &centroids[labels[i]]))
        .sum();
    // renumber by first appearance so equal partitions get equal labels
    let mut order = vec![usize::MAX; k];
    let mut next = 0;
    for l in &labels {
        if order[*l] == usize::MAX {
            order[*l] = next;
            next += 1;
        }
    }
    let mut new_centroids = vec![Vec::new(); k];
    for (old, new) in order.iter().enumerate() {
        if *new != usize::MAX {
            new_centroids[*new] = centroids[old].clone();
        }
    }
    KMeansFit {
        labels: labels.iter().map(|l| order[*l]).collect(),
        centroids: new_centroids,
        inertia,
        iterations,
        converged,
    }
}

/// Lloyd's algorithm with k-means++ seeding over the given rows.
pub fn kmeans(rows: &[&[f64]], k: usize, seed: u64, options: &KMeansOptions) -> Result<KMeansFit, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(ClusterError::EmptyMatrix);
    }
    if k > rows.len() {
        return Err(ClusterError::TooManyClusters { k, rows: rows.len() });
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..options.n_init.max(1) {
        let mut rng = seed::rng(seed, &[restart as u64]);
        let init = seed_plus_plus(rows, k, &mut rng);
        let fit = lloyd(rows, init, options.max_iter.max(1));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters the matrix rows into `k` groups.
pub fn kmeans_cluster(
    matrix: &FeatureMatrix,
    k: usize,
    seed: u64,
    experiment_id: &str,
    preprocessing: &str,
    options: &KMeansOptions,
) -> Result<ClusterAssignment, ClusterError> {
    if matrix.has_missing() {
        return Err(ClusterError::MissingValues);
    }
    let rows: Vec<&[f64]> = (0..matrix.nrows()).map(|r| matrix.row(r)).collect();
    let fit = kmeans(&rows, k, seed, options)?;
    let mut provenance = Provenance {
        algorithm: "kmeans".into(),
        preprocessing: preprocessing.into(),
        seed: Some(seed),
        ..Provenance::default()
    };
    provenance.notes.insert("k".into(), k.to_string());
    provenance.notes.insert("converged".into(), fit.converged.to_string());
    ClusterAssignment::from_indices(experiment_id, matrix.patient_ids(), &fit.labels, provenance)
}
