use serde::{Deserialize, Serialize};

use super::{Dendrogram, MetaError};

/// Mean silhouette of a zero-based labelling under the given distance.
/// Members of singleton clusters score 0, as do points with `a = b = 0`.
pub fn silhouette(labels: &[usize], dist: impl Fn(usize, usize) -> f64) -> Result<f64, MetaError> {
    let n = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|s| **s > 0).count() < 2 {
        return Err(MetaError::SilhouetteUndefined);
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouettePoint {
    pub k: usize,
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub trace: Vec<SilhouettePoint>,
    pub selected: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Local maxima of a silhouette trace in ascending k, at most `max_selected`.
/// An end point counts when it exceeds its only neighbour. Returns the global
/// maximum with a warning when there is no local maximum.
pub fn local_maxima(trace: &[SilhouettePoint], max_selected: usize) -> (Vec<usize>, Vec<String>) {
    let s: Vec<f64> = trace.iter().map(|p| p.silhouette).collect();
    let n = s.len();
    let mut picked = Vec::new();
    if n == 1 {
        picked.push(trace[0].k);
    }
    for i in 0..n {
        if n < 2 {
            break;
        }
        let above_left = i == 0 || s[i] > s[i - 1];
        let above_right = i + 1 == n || s[i] > s[i + 1];
        if above_left && above_right {
            picked.push(trace[i].k);
        }
    }
    picked.truncate(max_selected);
    let mut warnings = Vec::new();
    if picked.is_empty() && n > 0 {
        let mut best = 0;
        for i in 1..n {
            if s[i] > s[best] {
                best = i;
            }
        }
        warnings.push(format!(
            "silhouette trace has no local maximum; falling back to the global maximum at k = {}",
            trace[best].k
        ));
        picked.push(trace[best].k);
    }
    (picked, warnings)
}

/// Cuts the dendrogram at every k in `k_min..=k_max` (clamped to the number
/// of leaves), scores each cut and picks the first local maxima.
pub fn select_meta_k(
    dendrogram: &Dendrogram,
    dist: impl Fn(usize, usize) -> f64 + Copy,
    k_min: usize,
    k_max: usize,
    max_selected: usize,
) -> Result<KSelection, MetaError> {
    let hi = k_max.min(dendrogram.leaves);
    let lo = k_min.max(2);
    if lo > hi {
        return Err(MetaError::InvalidOptions(format!(
            "no k in {k_min}..={k_max} fits {} patients",
            dendrogram.leaves
        )));
    }
    let trace = (lo..=hi)
        .map(|k| {
            let labels = dendrogram.cut(k)?;
            Ok(SilhouettePoint {
                k,
                silhouette: silhouette(&labels, dist)?,
            })
        })
        .collect::<Result<Vec<_>, MetaError>>()?;
    let (selected, warnings) = local_maxima(&trace, max_selected);
    Ok(KSelection {
        trace,
        selected,
        warnings,
    })
}
