//! Seeded synthetic cohorts with planted clusters, feature signatures and
//! outcome hazards, emitted in the ingestion file formats.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterAssignment, ClusterError, ClusterLabel, Provenance};
use crate::ehr::{
    assemble_cohort, ingest, CodePattern, Cohort, CohortOptions, CohortSpec, DemographicsRow, EhrError, EventStore,
    IndexCriterion, IngestOptions, IngestReport, OutcomeCriterion, OutcomeDefinition, OutcomeSet, PatientId,
    PositionRequirement, RawEventRow,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ehr(#[from] EhrError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

pub const INDEX_CODE: &str = "SYN000";
pub const UNIDENTIFIABLE: &str = "clusters unidentifiable";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutcome {
    pub name: String,
    /// Events per day in a multiplier-1 cluster.
    pub baseline_hazard: f64,
    /// One multiplier per planted cluster.
    pub hazard_multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub k_planted: u32,
    /// Relative cluster sizes; empty means equal.
    pub cluster_weights: Vec<f64>,
    /// Signature codes per cluster.
    pub signature_features: usize,
    /// Prevalence of a cluster's signature codes inside the cluster.
    pub within_prevalence: f64,
    /// Prevalence of a cluster's signature codes in other clusters.
    pub without_prevalence: f64,
    pub noise_features: usize,
    pub noise_prevalence: f64,
    /// Laboratory tests with a cluster-independent value each.
    pub lab_tests: usize,
    /// An outcome named `mortality` is emitted as the death date.
    pub outcomes: Vec<SynthOutcome>,
    /// Hazard of dropping out of follow-up, per day.
    pub censoring_rate: f64,
    /// Administrative end of follow-up, in days after index.
    pub follow_up_days: f64,
    /// Weibull shape; 1 gives exponential times.
    pub weibull_shape: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_fraction: f64,
    pub start_date: NaiveDate,
    /// Index dates fall uniformly in this many days after `start_date`.
    pub enrolment_days: i64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_patients: 600,
            k_planted: 3,
            cluster_weights: Vec::new(),
            signature_features: 5,
            within_prevalence: 0.8,
            without_prevalence: 0.1,
            noise_features: 10,
            noise_prevalence: 0.2,
            lab_tests: 2,
            outcomes: vec![
                SynthOutcome {
                    name: "mortality".into(),
                    baseline_hazard: 0.0005,
                    hazard_multipliers: vec![1.0, 1.0, 3.0],
                },
                SynthOutcome {
                    name: "recurrent_stroke".into(),
                    baseline_hazard: 0.0005,
                    hazard_multipliers: vec![1.0, 2.0, 1.0],
                },
                SynthOutcome {
                    name: "bleeding".into(),
                    baseline_hazard: 0.0003,
                    hazard_multipliers: vec![1.0, 1.0, 1.0],
                },
            ],
            censoring_rate: 0.0003,
            follow_up_days: 1825.0,
            weibull_shape: 1.0,
            age_mean: 70.0,
            age_sd: 12.0,
            female_fraction: 0.5,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date"),
            enrolment_days: 730,
            seed: 1,
        }
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let s: Self = toml::from_str(text).map_err(|e| SynthError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_patients == 0 || self.k_planted == 0 {
            return bad("n_patients and k_planted must be at least 1".into());
        }
        if !self.cluster_weights.is_empty()
            && (self.cluster_weights.len() != self.k_planted as usize
                || self.cluster_weights.iter().any(|w| !(*w > 0.0)))
        {
            return bad("cluster_weights needs one positive weight per cluster".into());
        }
        for p in [
            self.within_prevalence,
            self.without_prevalence,
            self.noise_prevalence,
            self.female_fraction,
        ] {
            if !unit(p) {
                return bad(format!("prevalence {p} outside [0, 1]"));
            }
        }
        for o in &self.outcomes {
            if o.hazard_multipliers.len() != self.k_planted as usize {
                return bad(format!(
                    "outcome '{}' needs {} hazard multipliers",
                    o.name, self.k_planted
                ));
            }
            if o.hazard_multipliers
                .iter()
                .chain([&o.baseline_hazard])
                .any(|h| !(*h > 0.0) || !h.is_finite())
            {
                return bad(format!("outcome '{}' hazards must be positive", o.name));
            }
        }
        let mut names: Vec<&str> = self.outcomes.iter().map(|o| o.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("outcome names must be unique".into());
        }
        if !(self.censoring_rate >= 0.0) || !(self.follow_up_days > 0.0) || !(self.weibull_shape > 0.0) {
            return bad("censoring_rate >= 0, follow_up_days > 0 and weibull_shape > 0 required".into());
        }
        if self.age_sd < 0.0 || self.enrolment_days < 1 {
            return bad("age_sd >= 0 and enrolment_days >= 1 required".into());
        }
        Ok(())
    }

    pub fn signature_code(&self, cluster: u32, j: usize) -> String {
        format!("SYN{:03}", (cluster as usize - 1) * self.signature_features + j + 1)
    }

    pub fn noise_code(&self, j: usize) -> String {
        format!("SYN{:03}", 500 + j)
    }

    pub fn outcome_code(&self, o: usize) -> String {
        format!("SYN{:03}", 900 + o)
    }

    pub fn lab_code(&self, j: usize) -> String {
        format!("SYNL{:02}", j + 1)
    }

    /// Cohort definition that admits every synthetic patient at their index event.
    pub fn cohort_spec(&self) -> CohortSpec {
        CohortSpec {
            label: "synthetic".into(),
            index: vec![IndexCriterion {
                patterns: vec![CodePattern::parse(INDEX_CODE).expect("valid pattern")],
                position: PositionRequirement::Primary,
                domain: crate::ehr::Domain::Diagnosis,
            }],
            min_lookback_days: 0,
            exclusions: Vec::new(),
        }
    }

    pub fn outcome_set(&self) -> OutcomeSet {
        OutcomeSet {
            outcomes: self
                .outcomes
                .iter()
                .enumerate()
                .map(|(i, o)| OutcomeDefinition {
                    name: o.name.clone(),
                    criteria: vec![if o.name == "mortality" {
                        OutcomeCriterion::Death
                    } else {
                        OutcomeCriterion::Diagnosis {
                            patterns: vec![CodePattern::parse(&self.outcome_code(i)).expect("valid pattern")],
                            position: PositionRequirement::Primary,
                            encounter_kinds: Vec::new(),
                            min_admission_hours: None,
                            with_medication: None,
                        }
                    }],
                    exclusions: Vec::new(),
                })
                .collect(),
        }
    }

    fn identifiable(&self) -> bool {
        self.k_planted == 1 || (self.signature_features > 0 && self.within_prevalence != self.without_prevalence)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub assignment: ClusterAssignment,
    /// Outcome name to one multiplier per cluster.
    pub hazard_multipliers: BTreeMap<String, Vec<f64>>,
    /// Cluster label to its signature feature ids.
    pub signatures: BTreeMap<u32, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub events: Vec<RawEventRow>,
    pub demographics: Vec<DemographicsRow>,
    pub cohort_spec: CohortSpec,
    pub outcomes: OutcomeSet,
    pub truth: GroundTruth,
    pub warnings: Vec<String>,
}

/// Everything drawn for one patient; a pure function of the spec seed and
/// the patient's position.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientDraw {
    pub cluster: u32,
    pub age_years: f64,
    pub female: bool,
    pub index_offset_days: i64,
    pub signature: Vec<bool>,
    pub noise: Vec<bool>,
    pub labs: Vec<f64>,
    /// Latent time to each outcome, in days, before censoring.
    pub outcome_times: Vec<f64>,
    pub censor_time: f64,
}

/// Planted cluster of each patient: sizes by largest remainder, order shuffled.
pub fn planted_labels(spec: &SynthSpec) -> Vec<u32> {
    let k = spec.k_planted as usize;
    let weights = if spec.cluster_weights.is_empty() {
        vec![1.0; k]
    } else {
        spec.cluster_weights.clone()
    };
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * spec.n_patients as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = spec.n_patients - sizes.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        sizes[c] += 1;
    }
    let mut labels: Vec<u32> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u32 + 1, n))
        .collect();
    labels.shuffle(&mut seed::rng(spec.seed, &[0]));
    labels
}

/// Time with hazard `h(t) = rate * shape * t^(shape-1)` by inversion.
fn event_time(rng: &mut impl Rng, rate: f64, shape: f64) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    (-u.ln() / rate).powf(1.0 / shape)
}

pub fn draw_patient(spec: &SynthSpec, i: usize, cluster: u32) -> PatientDraw {
    let mut rng = seed::rng(spec.seed, &[1, i as u64]);
    let age_dist = Normal::new(spec.age_mean, spec.age_sd).expect("finite parameters");
    let age_years = age_dist.sample(&mut rng).clamp(18.5, 100.0);
    let female = rng.random_bool(spec.female_fraction);
    let index_offset_days = rng.random_range(0..spec.enrolment_days);
    let mut signature = Vec::new();
    for c in 1..=spec.k_planted {
        let p = if c == cluster {
            spec.within_prevalence
        } else {
            spec.without_prevalence
        };
        for _ in 0..spec.signature_features {
            signature.push(rng.random_bool(p));
        }
    }
    let noise = (0..spec.noise_features)
        .map(|_| rng.random_bool(spec.noise_prevalence))
        .collect();
    let lab = Normal::new(100.0, 15.0).expect("finite parameters");
    let labs = (0..spec.lab_tests).map(|_| lab.sample(&mut rng)).collect();
    let outcome_times = spec
        .outcomes
        .iter()
        .map(|o| {
            let rate = o.baseline_hazard * o.hazard_multipliers[cluster as usize - 1];
            event_time(&mut rng, rate, spec.weibull_shape)
        })
        .collect();
    let dropout = if spec.censoring_rate > 0.0 {
        event_time(&mut rng, spec.censoring_rate, 1.0)
    } else {
        f64::INFINITY
    };
    PatientDraw {
        cluster,
        age_years,
        female,
        index_offset_days,
        signature,
        noise,
        labs,
        outcome_times,
        censor_time: dropout.min(spec.follow_up_days),
    }
}

fn day(t: f64) -> i64 {
    (t.ceil() as i64).max(1)
}

fn stamp(d: NaiveDate, hour: u32) -> String {
    format!("{}T{hour:02}:00:00", d.format("%Y-%m-%d"))
}

fn row(pid: &str, domain: &str, code: &str, position: &str, ts: String, enc: &str, kind: &str) -> RawEventRow {
    RawEventRow {
        patient_id: pid.to_string(),
        domain: domain.into(),
        code: code.into(),
        position: position.into(),
        timestamp: ts,
        encounter_id: enc.to_string(),
        encounter_kind: kind.into(),
        ..Default::default()
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let mut warnings = Vec::new();
    if !spec.identifiable() {
        warnings.push(format!(
            "{UNIDENTIFIABLE}: signature prevalences are identical across clusters"
        ));
    }
    let labels = planted_labels(spec);
    let mortality = spec.outcomes.iter().position(|o| o.name == "mortality");
    let width = (spec.n_patients.max(1) as f64).log10().floor() as usize + 1;
    let mut events = Vec::new();
    let mut demographics = Vec::new();
    let mut truth = BTreeMap::new();

    for (i, &cluster) in labels.iter().enumerate() {
        let pid = format!("SYN-{:0width$}", i + 1);
        let d = draw_patient(spec, i, cluster);
        let index = spec.start_date + Duration::days(d.index_offset_days);
        let birth = index - Duration::days((d.age_years * 365.25).floor() as i64);
        let death_t = mortality.map(|m| d.outcome_times[m]).filter(|t| *t < d.censor_time);
        let end = death_t.unwrap_or(d.censor_time);

        let enc0 = format!("{pid}-E0");
        events.push(row(
            &pid,
            "diagnosis",
            INDEX_CODE,
            "primary",
            stamp(index, 9),
            &enc0,
            "inpatient",
        ));
        let codes = (1..=spec.k_planted)
            .flat_map(|c| (0..spec.signature_features).map(move |j| (c, j)))
            .zip(&d.signature)
            .filter(|(_, on)| **on)
            .map(|((c, j), _)| spec.signature_code(c, j))
            .chain(
                d.noise
                    .iter()
                    .enumerate()
                    .filter(|(_, on)| **on)
                    .map(|(j, _)| spec.noise_code(j)),
            );
        for code in codes {
            events.push(row(
                &pid,
                "diagnosis",
                &code,
                "secondary",
                stamp(index, 10),
                &enc0,
                "inpatient",
            ));
        }
        for (j, v) in d.labs.iter().enumerate() {
            let mut r = row(
                &pid,
                "laboratory",
                &spec.lab_code(j),
                "n/a",
                stamp(index, 11),
                &enc0,
                "inpatient",
            );
            r.value = format!("{v:.1}");
            r.unit = "g/L".into();
            events.push(r);
        }
        for (o, t) in d.outcome_times.iter().enumerate() {
            if Some(o) == mortality || *t >= end {
                continue;
            }
            let date = index + Duration::days(day(*t));
            let enc = format!("{pid}-E{}", o + 1);
            events.push(row(
                &pid,
                "diagnosis",
                &spec.outcome_code(o),
                "primary",
                stamp(date, 9),
                &enc,
                "inpatient",
            ));
        }
        // last recorded activity fixes the censoring date
        let last = index + Duration::days(day(end));
        events.push(row(
            &pid,
            "administrative",
            "FOLLOWUP",
            "n/a",
            stamp(last, 8),
            &format!("{pid}-FU"),
            "outpatient",
        ));

        demographics.push(DemographicsRow {
            patient_id: pid.clone(),
            birth_date: birth.format("%Y-%m-%d").to_string(),
            sex: if d.female { "female" } else { "male" }.into(),
            death_date: death_t
                .map(|t| (index + Duration::days(day(t))).format("%Y-%m-%d").to_string())
                .unwrap_or_default(),
            line: 0,
        });
        truth.insert(PatientId::new(pid), ClusterLabel::Cluster(cluster));
    }

    let assignment = ClusterAssignment::within(
        "planted",
        truth,
        spec.k_planted,
        Provenance {
            algorithm: "planted".into(),
            preprocessing: String::new(),
            seed: Some(spec.seed),
            notes: BTreeMap::new(),
        },
    )?;
    let signatures = (1..=spec.k_planted)
        .map(|c| {
            (
                c,
                (0..spec.signature_features)
                    .map(|j| format!("dx:{}", spec.signature_code(c, j)))
                    .collect(),
            )
        })
        .collect();
    Ok(SynthOutput {
        events,
        demographics,
        cohort_spec: spec.cohort_spec(),
        outcomes: spec.outcome_set(),
        truth: GroundTruth {
            assignment,
            hazard_multipliers: spec
                .outcomes
                .iter()
                .map(|o| (o.name.clone(), o.hazard_multipliers.clone()))
                .collect(),
            signatures,
        },
        warnings,
    })
}

impl SynthOutput {
    /// Ingests the rows and assembles the cohort.
    pub fn materialize(&self) -> Result<(EventStore, IngestReport, Cohort), SynthError> {
        let (store, report) = ingest(
            self.events.clone(),
            self.demographics.clone(),
            &IngestOptions::default(),
        );
        let cohort = assemble_cohort(&store, &self.cohort_spec, &CohortOptions::default())?;
        Ok((store, report, cohort))
    }
}

/// Copies of `truth` with a seeded fraction of labels moved to a different
/// cluster and the label names permuted per experiment.
pub fn perturb_experiments(
    truth: &ClusterAssignment,
    n_experiments: usize,
    flip_rate: f64,
    run_seed: u64,
) -> Result<Vec<ClusterAssignment>, SynthError> {
    if !(0.0..0.5).contains(&flip_rate) {
        return Err(SynthError::Invalid(format!("flip_rate {flip_rate} outside [0, 0.5)")));
    }
    let k = truth.k;
    (0..n_experiments)
        .map(|e| {
            let mut rng = seed::rng(run_seed, &[2, e as u64]);
            let mut perm: Vec<u32> = (1..=k).collect();
            perm.shuffle(&mut rng);
            let labels = truth
                .labels
                .iter()
                .map(|(p, l)| {
                    let l = match l {
                        ClusterLabel::Cluster(c) => {
                            let mut c = *c;
                            if k > 1 && rng.random_bool(flip_rate) {
                                let other = rng.random_range(1..k);
                                c = if other >= c { other + 1 } else { other };
                            }
                            ClusterLabel::Cluster(perm[c as usize - 1])
                        }
                        ClusterLabel::Unclustered => ClusterLabel::Unclustered,
                    };
                    (p.clone(), l)
                })
                .collect();
            let provenance = Provenance {
                algorithm: "perturbed".into(),
                preprocessing: format!("flip {flip_rate}"),
                seed: Some(run_seed),
                notes: BTreeMap::from([("base".to_string(), truth.experiment_id.clone())]),
            };
            Ok(ClusterAssignment::within(
                format!("perturbed-{:02}", e + 1),
                labels,
                k,
                provenance,
            )?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::adjusted_rand_index;
    use crate::ehr::derive_outcomes;
    use crate::survival::{cluster_vs_rest, km_fit, records_from_outcomes, CoxOptions};

    fn small() -> SynthSpec {
        SynthSpec {
            n_patients: 300,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        assert_eq!(a, generate(&small()).unwrap());
        let b = generate(&SynthSpec { seed: 2, ..small() }).unwrap();
        assert_ne!(a.events, b.events);
    }

    #[test]
    fn ingests_cleanly() {
        let out = generate(&small()).unwrap();
        let (store, report, cohort) = out.materialize().unwrap();
        assert!(
            report.rejections.is_empty(),
            "{:?}",
            &report.rejections[..3.min(report.rejections.len())]
        );
        assert_eq!(cohort.members.len(), 300);
        assert_eq!(
            out.truth.assignment.sizes().values().copied().collect::<Vec<_>>(),
            vec![100, 100, 100]
        );
        for def in &out.outcomes.outcomes {
            let o = derive_outcomes(&cohort, &store, def);
            assert_eq!(o.len(), 300);
            let (recs, skipped) = records_from_outcomes(&o, &store);
            assert!(skipped.is_empty());
            assert!(recs.iter().any(|r| r.event) && recs.iter().any(|r| !r.event));
        }
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn sizes_follow_weights() {
        let s = SynthSpec {
            n_patients: 10,
            cluster_weights: vec![1.0, 1.0, 2.0],
            ..SynthSpec::default()
        };
        let labels = planted_labels(&s);
        let count = |c| labels.iter().filter(|l| **l == c).count();
        assert_eq!((count(1), count(2), count(3)), (3, 2, 5));
    }

    fn binomial_ok(hits: usize, n: usize, p: f64) -> bool {
        // normal approximation to the 99% binomial interval
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (hits as f64 - n as f64 * p).abs() <= 2.576 * sd + 1.0
    }

    #[test]
    fn prevalences_match_spec() {
        let s = SynthSpec {
            n_patients: 900,
            ..SynthSpec::default()
        };
        let labels = planted_labels(&s);
        let draws: Vec<PatientDraw> = labels
            .iter()
            .enumerate()
            .map(|(i, c)| draw_patient(&s, i, *c))
            .collect();
        for c in 1..=3u32 {
            let inside: Vec<&PatientDraw> = draws.iter().filter(|d| d.cluster == c).collect();
            let outside: Vec<&PatientDraw> = draws.iter().filter(|d| d.cluster != c).collect();
            let col = (c as usize - 1) * s.signature_features;
            let hits = |ds: &[&PatientDraw]| ds.iter().filter(|d| d.signature[col]).count();
            assert!(binomial_ok(hits(&inside), inside.len(), s.within_prevalence));
            assert!(binomial_ok(hits(&outside), outside.len(), s.without_prevalence));
        }
        let noise = draws.iter().filter(|d| d.noise[0]).count();
        assert!(binomial_ok(noise, draws.len(), s.noise_prevalence));
    }

    /// Kolmogorov-Smirnov distance against Exp(rate).
    fn ks_exponential(mut xs: Vec<f64>, rate: f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let f = 1.0 - (-rate * x).exp();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn durations_are_exponential_per_cluster() {
        let s = SynthSpec {
            n_patients: 1200,
            ..SynthSpec::default()
        };
        let labels = planted_labels(&s);
        for (o, out) in s.outcomes.iter().enumerate() {
            for c in 1..=3u32 {
                let times: Vec<f64> = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| **l == c)
                    .map(|(i, l)| draw_patient(&s, i, *l).outcome_times[o])
                    .collect();
                let d = ks_exponential(
                    times.clone(),
                    out.baseline_hazard * out.hazard_multipliers[c as usize - 1],
                );
                // 1% critical value of the one-sample statistic
                assert!(
                    d < 1.628 / (times.len() as f64).sqrt(),
                    "{} cluster {c}: D = {d}",
                    out.name
                );
            }
        }
    }

    #[test]
    fn single_cluster_km_matches_population() {
        let s = SynthSpec {
            n_patients: 200,
            k_planted: 1,
            signature_features: 0,
            outcomes: vec![SynthOutcome {
                name: "mortality".into(),
                baseline_hazard: 0.001,
                hazard_multipliers: vec![1.0],
            }],
            ..SynthSpec::default()
        };
        let out = generate(&s).unwrap();
        assert!(out.warnings.is_empty());
        let (store, _, cohort) = out.materialize().unwrap();
        let o = derive_outcomes(&cohort, &store, &out.outcomes.outcomes[0]);
        let (recs, _) = records_from_outcomes(&o, &store);
        let d: Vec<f64> = recs.iter().map(|r| r.duration).collect();
        let e: Vec<bool> = recs.iter().map(|r| r.event).collect();
        let km = km_fit(&d, &e).unwrap();
        // one population: the curve at one year is near exp(-0.365)
        assert!((km.survival_at(365.0) - (-0.365f64).exp()).abs() < 0.08);
    }

    #[test]
    fn unidentifiable_spec_warns() {
        let s = SynthSpec {
            within_prevalence: 0.3,
            without_prevalence: 0.3,
            n_patients: 30,
            ..SynthSpec::default()
        };
        assert!(generate(&s).unwrap().warnings[0].starts_with(UNIDENTIFIABLE));
        assert!(generate(&SynthSpec {
            within_prevalence: 1.5,
            ..s.clone()
        })
        .is_err());
        assert!(generate(&SynthSpec { k_planted: 2, ..s }).is_err());
    }

    #[test]
    fn planted_hazard_is_recovered() {
        let s = SynthSpec {
            n_patients: 1000,
            seed: 5,
            ..SynthSpec::default()
        };
        let out = generate(&s).unwrap();
        let (store, _, cohort) = out.materialize().unwrap();
        let o = derive_outcomes(&cohort, &store, out.outcomes.get("mortality").unwrap());
        let (recs, _) = records_from_outcomes(&o, &store);
        let r = cluster_vs_rest(&out.truth.assignment, 3, &recs, &CoxOptions::default()).unwrap();
        let hr = r.hazard_ratio.unwrap();
        assert!((2.5..3.6).contains(&hr), "{hr}");
    }

    #[test]
    fn perturbation() {
        let out = generate(&small()).unwrap();
        let truth = &out.truth.assignment;
        let flat = |a: &ClusterAssignment| {
            a.labels
                .values()
                .map(|l| l.cluster().unwrap() as usize)
                .collect::<Vec<_>>()
        };
        let same = perturb_experiments(truth, 4, 0.0, 9).unwrap();
        for a in &same {
            assert_eq!(adjusted_rand_index(&flat(a), &flat(truth)), 1.0);
        }
        assert!(
            same.iter().any(|a| a.labels != truth.labels),
            "labels should be permuted"
        );
        let noisy = perturb_experiments(truth, 10, 0.1, 9).unwrap();
        for a in &noisy {
            let changed = a
                .labels
                .values()
                .zip(same[0].labels.values())
                .filter(|(x, y)| x != y)
                .count();
            assert!(changed > 0);
            let ari = adjusted_rand_index(&flat(a), &flat(truth));
            assert!((0.6..0.9).contains(&ari), "{ari}");
        }
        assert_eq!(noisy, perturb_experiments(truth, 10, 0.1, 9).unwrap());
        assert!(perturb_experiments(truth, 1, 0.5, 1).is_err());
    }
}
