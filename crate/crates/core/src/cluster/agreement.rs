use std::collections::HashMap;

use super::{ClusterAssignment, ClusterError};

fn contingency(
    a: &[usize],
    b: &[usize],
) -> (
    HashMap<(usize, usize), usize>,
    HashMap<usize, usize>,
    HashMap<usize, usize>,
) {
    let mut joint = HashMap::new();
    let mut ra = HashMap::new();
    let mut rb = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((*x, *y)).or_insert(0) += 1;
        *ra.entry(*x).or_insert(0) += 1;
        *rb.entry(*y).or_insert(0) += 1;
    }
    (joint, ra, rb)
}

/// Weighted Jaccard agreement between two labelings of the same items:
/// `(1/N) * sum_ij n_ij * n_ij / m_ij`, with `n_ij` the overlap of cluster
/// `i` and cluster `j` and `m_ij` the size of their union.
pub fn jaccard_from_labels(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    if a.is_empty() {
        return 0.0;
    }
    let (joint, ra, rb) = contingency(a, b);
    let mut total = 0.0;
    // sum in a fixed order so the result does not depend on hash iteration
    let mut cells: Vec<_> = joint.into_iter().collect();
    cells.sort_unstable();
    for ((i, j), n) in cells {
        let m = ra[&i] + rb[&j] - n;
        total += n as f64 * n as f64 / m as f64;
    }
    total / a.len() as f64
}

/// Jaccard agreement between two assignments of the same patients.
/// Patients unclustered in either assignment are left out.
pub fn jaccard_agreement(a: &ClusterAssignment, b: &ClusterAssignment) -> Result<f64, ClusterError> {
    if a.labels.len() != b.labels.len() || a.labels.keys().ne(b.labels.keys()) {
        let only_a = a.labels.keys().find(|p| !b.labels.contains_key(*p));
        let only_b = b.labels.keys().find(|p| !a.labels.contains_key(*p));
        return Err(ClusterError::PatientMismatch(format!(
            "'{}' vs '{}' (e.g. {:?} / {:?})",
            a.experiment_id,
            b.experiment_id,
            only_a.map(|p| p.as_str()),
            only_b.map(|p| p.as_str())
        )));
    }
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    for (p, l) in &a.labels {
        if let (Some(x), Some(y)) = (l.cluster(), b.labels[p].cluster()) {
            la.push(x as usize);
            lb.push(y as usize);
        }
    }
    Ok(jaccard_from_labels(&la, &lb))
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len() as f64;
    let pairs = |x: usize| (x as f64) * (x as f64 - 1.0) / 2.0;
    let (joint, ra, rb) = contingency(a, b);
    let index: f64 = joint.values().map(|&v| pairs(v)).sum();
    let sa: f64 = ra.values().map(|&v| pairs(v)).sum();
    let sb: f64 = rb.values().map(|&v| pairs(v)).sum();
    let expected = sa * sb / (n * (n - 1.0) / 2.0);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
