//! Kaplan-Meier curves, Cox proportional hazards and the cluster-vs-rest
//! hazard contrast.

mod cox;
mod km;
mod logrank;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterAssignment;
use crate::ehr::{EventStore, OutcomeEvent, PatientId};
use crate::stats::{chi2_sf, ln_chi2_sf};

pub use cox::{cox_fit, BaselinePoint, CoxFit, CoxOptions, Iteration, Ties};
pub use km::{km_fit, KmCurve};
pub use logrank::{logrank_test, LogRank};

#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("no survival records")]
    Empty,
    #[error("durations must be positive and finite (found {0})")]
    NonPositiveDuration(f64),
    #[error("covariate '{0}' has non-finite values")]
    NonFinite(String),
    #[error("covariate '{0}' has zero variance")]
    ZeroVariance(String),
    #[error("no events observed")]
    NoEvents,
    #[error("information matrix is singular")]
    Singular,
    #[error("Cox fit did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e}{})", if *.diverging { ", coefficients diverging: likely separation" } else { "" })]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
        diverging: bool,
        trace: Vec<Iteration>,
    },
    #[error("{0}")]
    EmptyGroup(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: PatientId,
    pub duration: f64,
    pub event: bool,
    /// Years at index.
    pub age: f64,
    /// 0 female, 1 male.
    pub sex: f64,
}

/// Joins outcome rows with demographics. Patients without a known sex or
/// record are skipped and reported.
pub fn records_from_outcomes(outcomes: &[OutcomeEvent], store: &EventStore) -> (Vec<SurvivalRecord>, Vec<String>) {
    let mut out = Vec::with_capacity(outcomes.len());
    let mut skipped = Vec::new();
    for o in outcomes {
        let Some(rec) = store.get(&o.patient_id) else {
            skipped.push(format!("{}: no patient record", o.patient_id));
            continue;
        };
        let Some(sex) = rec.sex.covariate() else {
            skipped.push(format!("{}: sex unknown, left out of survival models", o.patient_id));
            continue;
        };
        out.push(SurvivalRecord {
            patient_id: o.patient_id.clone(),
            duration: o.duration_days(),
            event: o.observed(),
            age: rec.age_years(o.index_date),
            sex,
        });
    }
    (out, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterVsRest {
    pub cluster: u32,
    pub n_cluster: usize,
    pub n_rest: usize,
    pub events_cluster: usize,
    pub events_rest: usize,
    pub hazard_ratio: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    /// Score statistic for the cluster indicator given the adjustment covariates.
    pub score_statistic: f64,
    pub p_value: f64,
    /// `ln p_value`, finite even when `p_value` underflows.
    pub ln_p_value: f64,
    pub adjusted_for: Vec<String>,
    pub fit: Option<CoxFit>,
    #[serde(default)]
    pub flags: Vec<String>,
}

pub const INDICATOR: &str = "cluster";

/// Cox model of `{indicator(cluster), age, sex}` over the clustered patients
/// that have a survival record. The p-value is the score test for the
/// indicator at the age/sex-only fit; the hazard ratio comes from the full fit.
pub fn cluster_vs_rest(
    assignment: &ClusterAssignment,
    cluster: u32,
    records: &[SurvivalRecord],
    options: &CoxOptions,
) -> Result<ClusterVsRest, SurvivalError> {
    let mut ind = Vec::new();
    let mut dur = Vec::new();
    let mut ev = Vec::new();
    let mut age = Vec::new();
    let mut sex = Vec::new();
    for r in records {
        let Some(label) = assignment.label(&r.patient_id).and_then(|l| l.cluster()) else {
            continue;
        };
        ind.push(if label == cluster { 1.0 } else { 0.0 });
        dur.push(r.duration);
        ev.push(r.event);
        age.push(r.age);
        sex.push(r.sex);
    }
    let n_cluster = ind.iter().filter(|v| **v == 1.0).count();
    let n_rest = ind.len() - n_cluster;
    if n_cluster == 0 {
        return Err(SurvivalError::EmptyGroup(format!(
            "cluster {cluster} has no patients with survival data"
        )));
    }
    if n_rest == 0 {
        return Err(SurvivalError::EmptyGroup(format!(
            "no patients outside cluster {cluster}"
        )));
    }
    let events_cluster = (0..ind.len()).filter(|&i| ev[i] && ind[i] == 1.0).count();
    let events_rest = (0..ind.len()).filter(|&i| ev[i] && ind[i] == 0.0).count();
    let mut result = ClusterVsRest {
        cluster,
        n_cluster,
        n_rest,
        events_cluster,
        events_rest,
        hazard_ratio: None,
        ci_lower: None,
        ci_upper: None,
        score_statistic: 0.0,
        p_value: 1.0,
        ln_p_value: 0.0,
        adjusted_for: Vec::new(),
        fit: None,
        flags: Vec::new(),
    };
    if events_cluster + events_rest == 0 {
        result.flags.push("no events in cluster or rest".into());
        return Ok(result);
    }

    let mut adj_names: Vec<&str> = Vec::new();
    let mut adj_cols: Vec<&[f64]> = Vec::new();
    for (name, col) in [("age", &age), ("sex", &sex)] {
        if col.iter().all(|v| *v == col[0]) {
            result
                .flags
                .push(format!("{name} is constant and was left out of the adjustment"));
        } else {
            adj_names.push(name);
            adj_cols.push(col);
        }
    }

    let mut restricted = vec![0.0; adj_names.len()];
    if !adj_names.is_empty() {
        match cox_fit(&dur, &ev, &adj_names, &adj_cols, options) {
            Ok(f) => restricted = f.coefficients,
            Err(e) => {
                result.flags.push(format!(
                    "adjustment-only fit failed ({e}); score test evaluated unadjusted"
                ));
                adj_names.clear();
                adj_cols.clear();
                restricted.clear();
            }
        }
    }
    result.adjusted_for = adj_names.iter().map(|s| s.to_string()).collect();

    let mut names = vec![INDICATOR];
    names.extend(&adj_names);
    let mut cols: Vec<&[f64]> = vec![&ind];
    cols.extend(&adj_cols);
    let data = cox::CoxData::new(&dur, &ev, &names, &cols)?;
    let mut beta = vec![0.0];
    beta.extend(&restricted);
    let (_, grad, info) = data.evaluate(&beta, options.ties);
    let stat = cox::score_statistic(&grad, &info)
        .ok_or(SurvivalError::Singular)?
        .max(0.0);
    result.score_statistic = stat;
    result.p_value = chi2_sf(stat, 1.0);
    result.ln_p_value = ln_chi2_sf(stat, 1.0);

    match cox::fit_prepared(&data, &names, options) {
        Ok(fit) => {
            result.hazard_ratio = Some(fit.hazard_ratios[0]);
            result.ci_lower = Some(fit.ci_lower[0]);
            result.ci_upper = Some(fit.ci_upper[0]);
            result.fit = Some(fit);
        }
        Err(e) => result.flags.push(format!("full model not estimable: {e}")),
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmByCluster {
    pub curves: BTreeMap<u32, KmCurve>,
    pub logrank: Option<LogRank>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// One curve per cluster; unclustered patients are left out and clusters
/// under `min_size` records are skipped with a warning.
pub fn km_by_cluster(
    assignment: &ClusterAssignment,
    records: &[SurvivalRecord],
    min_size: usize,
) -> Result<KmByCluster, SurvivalError> {
    let mut strata: BTreeMap<u32, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for r in records {
        if let Some(c) = assignment.label(&r.patient_id).and_then(|l| l.cluster()) {
            let s = strata.entry(c).or_default();
            s.0.push(r.duration);
            s.1.push(r.event);
        }
    }
    let mut curves = BTreeMap::new();
    let mut warnings = Vec::new();
    let (mut all_d, mut all_e, mut all_g) = (Vec::new(), Vec::new(), Vec::new());
    for (c, (d, e)) in &strata {
        if d.len() < min_size {
            warnings.push(format!(
                "cluster {c}: {} patients, below {min_size}; curve omitted",
                d.len()
            ));
            continue;
        }
        curves.insert(*c, km_fit(d, e)?);
        all_d.extend(d);
        all_e.extend(e);
        all_g.extend(std::iter::repeat_n(*c as usize, d.len()));
    }
    let logrank = if curves.len() >= 2 {
        logrank_test(&all_d, &all_e, &all_g).ok()
    } else {
        None
    };
    Ok(KmByCluster {
        curves,
        logrank,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterLabel, Provenance};
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Exp};

    fn simulate(n: usize, hr: f64, seed: u64) -> (Vec<SurvivalRecord>, ClusterAssignment) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        let mut labels = BTreeMap::new();
        for i in 0..n {
            let in_cluster = i % 4 == 0;
            let rate = 0.01 * if in_cluster { hr } else { 1.0 };
            let t: f64 = Exp::new(rate).unwrap().sample(&mut rng);
            let c: f64 = rng.random_range(50.0..250.0);
            let id = PatientId::new(format!("p{i:05}"));
            records.push(SurvivalRecord {
                patient_id: id.clone(),
                duration: t.min(c).max(0.5),
                event: t <= c,
                age: rng.random_range(40.0..90.0),
                sex: f64::from(rng.random_range(0..2u8)),
            });
            labels.insert(id, ClusterLabel::Cluster(if in_cluster { 1 } else { 2 }));
        }
        (
            records,
            ClusterAssignment::new("sim", labels, Provenance::default()).unwrap(),
        )
    }

    #[test]
    fn planted_hazard_is_detected() {
        let (records, a) = simulate(500, 3.0, 1);
        let r = cluster_vs_rest(&a, 1, &records, &CoxOptions::default()).unwrap();
        assert!(r.hazard_ratio.unwrap() > 2.0, "{r:?}");
        assert!(r.p_value < 0.01);
        assert!((r.ln_p_value - r.p_value.ln()).abs() < 1e-9);
        assert_eq!(r.adjusted_for, vec!["age", "sex"]);
    }

    #[test]
    fn null_cluster_is_unremarkable() {
        let (records, a) = simulate(400, 1.0, 2);
        let r = cluster_vs_rest(&a, 1, &records, &CoxOptions::default()).unwrap();
        assert!((0.6..1.6).contains(&r.hazard_ratio.unwrap()));
    }

    #[test]
    fn empty_rest_and_no_events() {
        let (mut records, _) = simulate(20, 1.0, 3);
        let labels = records
            .iter()
            .map(|r| (r.patient_id.clone(), ClusterLabel::Cluster(1)))
            .collect();
        let one = ClusterAssignment::new("one", labels, Provenance::default()).unwrap();
        assert!(matches!(
            cluster_vs_rest(&one, 1, &records, &CoxOptions::default()),
            Err(SurvivalError::EmptyGroup(_))
        ));
        records.iter_mut().for_each(|r| r.event = false);
        let (_, two) = simulate(20, 1.0, 3);
        let r = cluster_vs_rest(&two, 1, &records, &CoxOptions::default()).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.flags.len(), 1);
    }

    #[test]
    fn one_stratum_equals_whole_cohort() {
        let (records, _) = simulate(60, 1.0, 4);
        let labels = records
            .iter()
            .map(|r| (r.patient_id.clone(), ClusterLabel::Cluster(1)))
            .collect();
        let one = ClusterAssignment::new("one", labels, Provenance::default()).unwrap();
        let by = km_by_cluster(&one, &records, 5).unwrap();
        let d: Vec<f64> = records.iter().map(|r| r.duration).collect();
        let e: Vec<bool> = records.iter().map(|r| r.event).collect();
        assert_eq!(by.curves[&1], km_fit(&d, &e).unwrap());
        assert!(by.logrank.is_none());
    }

    #[test]
    fn separated_strata_have_small_logrank_p() {
        let (records, a) = simulate(600, 4.0, 5);
        let by = km_by_cluster(&a, &records, 5).unwrap();
        assert_eq!(by.curves.len(), 2);
        assert!(by.logrank.unwrap().p_value < 0.001);
    }
}
