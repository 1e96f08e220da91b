use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::km::validate;
use super::SurvivalError;
use crate::stats::chi2_sf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub groups: Vec<usize>,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Unadjusted log-rank test across the distinct values of `groups`.
pub fn logrank_test(durations: &[f64], events: &[bool], groups: &[usize]) -> Result<LogRank, SurvivalError> {
    validate(durations, events)?;
    if groups.len() != durations.len() {
        return Err(SurvivalError::Shape("one group per record".into()));
    }
    let ids: Vec<usize> = groups
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let k = ids.len();
    if k < 2 {
        return Err(SurvivalError::EmptyGroup("log-rank needs at least two groups".into()));
    }
    let pos: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, g)| (*g, i)).collect();
    let n = durations.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));

    let mut at_risk = vec![0.0; k];
    for g in groups {
        at_risk[pos[g]] += 1.0;
    }
    let mut observed = vec![0.0; k];
    let mut expected = vec![0.0; k];
    let mut var = DMatrix::zeros(k, k);
    let mut i = 0;
    while i < n {
        let t = durations[order[i]];
        let mut j = i;
        let mut d_g = vec![0.0; k];
        let mut left = vec![0.0; k];
        while j < n && durations[order[j]] == t {
            let g = pos[&groups[order[j]]];
            left[g] += 1.0;
            if events[order[j]] {
                d_g[g] += 1.0;
            }
            j += 1;
        }
        let d: f64 = d_g.iter().sum();
        let r: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for g in 0..k {
                observed[g] += d_g[g];
                expected[g] += d * at_risk[g] / r;
            }
            if r > 1.0 {
                let c = d * (r - d) / (r - 1.0);
                for g in 0..k {
                    for h in 0..k {
                        let delta = if g == h { 1.0 } else { 0.0 };
                        var[(g, h)] += c * at_risk[g] / r * (delta - at_risk[h] / r);
                    }
                }
            }
        }
        for g in 0..k {
            at_risk[g] -= left[g];
        }
        i = j;
    }
    let u = DVector::from_iterator(k - 1, (0..k - 1).map(|g| observed[g] - expected[g]));
    let v = var.view((0, 0), (k - 1, k - 1)).into_owned();
    let inv = v.try_inverse().ok_or(SurvivalError::Singular)?;
    let statistic = (u.transpose() * inv * &u)[(0, 0)].max(0.0);
    Ok(LogRank {
        groups: ids,
        observed,
        expected,
        statistic,
        df: k - 1,
        p_value: chi2_sf(statistic, (k - 1) as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::{cox_fit, CoxOptions, Ties};

    #[test]
    fn two_group_hand_computation() {
        // group 0 dies at 1 and 3; group 1 dies at 2, censored at 4
        let t = [1.0, 3.0, 2.0, 4.0];
        let e = [true, true, true, false];
        let g = [0, 0, 1, 1];
        let r = logrank_test(&t, &e, &g).unwrap();
        // t=1: r=4 (2,2) d=1 -> E0 .5, V .25 ; t=2: r=3 (1,2) d=1 -> E0 1/3, V 2/9 ; t=3: r=2 (1,1) d=1 -> E0 .5, V .25
        let e0 = 0.5 + 1.0 / 3.0 + 0.5;
        let v = 0.25 + 2.0 / 9.0 + 0.25;
        assert!((r.expected[0] - e0).abs() < 1e-12);
        assert!((r.statistic - (2.0 - e0).powi(2) / v).abs() < 1e-12);
    }

    #[test]
    fn equals_unadjusted_breslow_score_test() {
        // no two events share a time, where both variances coincide
        let t = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0, 5.5, 6.0, 8.0, 9.0];
        let e = [true, true, false, true, true, true, true, false, true, true];
        let g = [0, 1, 0, 1, 0, 1, 0, 1, 1, 0];
        let x: Vec<f64> = g.iter().map(|v| *v as f64).collect();
        let lr = logrank_test(&t, &e, &g).unwrap();
        let fit = cox_fit(
            &t,
            &e,
            &["g"],
            &[&x],
            &CoxOptions {
                ties: Ties::Breslow,
                ..CoxOptions::default()
            },
        )
        .unwrap();
        assert!((lr.statistic - fit.score_statistic).abs() < 1e-10);
    }
}
