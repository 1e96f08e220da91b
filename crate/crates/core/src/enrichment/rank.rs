use serde::{Deserialize, Serialize};

use super::EnrichmentError;
use crate::stats::chi2_sf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Average ranks (1-based) of the pooled values; returns ranks and the tie
/// correction sum of `t^3 - t` over tie groups.
pub(crate) fn average_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

/// Kruskal-Wallis H with the tie correction, chi-squared reference.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<KruskalWallis, EnrichmentError> {
    let nonempty: Vec<&[f64]> = groups.iter().copied().filter(|g| !g.is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(EnrichmentError::Untestable(
            "fewer than two groups with observations".into(),
        ));
    }
    if nonempty.iter().flat_map(|g| g.iter()).any(|v| !v.is_finite()) {
        return Err(EnrichmentError::Untestable("non-finite value".into()));
    }
    let pooled: Vec<f64> = nonempty.iter().flat_map(|g| g.iter().copied()).collect();
    let n = pooled.len() as f64;
    let (ranks, ties) = average_ranks(&pooled);
    let mut offset = 0;
    let mut sum = 0.0;
    for g in &nonempty {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let df = nonempty.len() - 1;
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis {
            h: 0.0,
            df,
            p_value: 1.0,
        });
    }
    let h = ((12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction).max(0.0);
    Ok(KruskalWallis {
        h,
        df,
        p_value: chi2_sf(h, df as f64),
    })
}
