use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::km::validate;
use super::SurvivalError;
use crate::stats::{chi2_sf, normal_two_sided};

const Z95: f64 = 1.959963984540054;
/// |beta| * sd(x) beyond this is treated as a diverging (separated) fit.
const DIVERGENCE: f64 = 20.0;
/// SE * sd(x) beyond this means the likelihood is flat along that
/// coefficient, which happens when it runs off towards infinity.
const FLAT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxOptions {
    pub ties: Ties,
    pub max_iter: usize,
    /// Convergence threshold on the Euclidean norm of the score vector.
    pub tol: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            ties: Ties::Efron,
            max_iter: 100,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub gradient_norm: f64,
    pub step_halvings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub time: f64,
    pub cumulative_hazard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub hazard_ratios: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub z: Vec<f64>,
    pub p_values: Vec<f64>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    /// Score test of all coefficients at zero.
    pub score_statistic: f64,
    pub score_p: f64,
    pub lr_statistic: f64,
    pub lr_p: f64,
    pub covariance: Vec<Vec<f64>>,
    /// Breslow estimate at the covariate means.
    pub baseline: Vec<BaselinePoint>,
    pub covariate_means: Vec<f64>,
    pub ties: Ties,
    pub n: usize,
    pub events: usize,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub trace: Vec<Iteration>,
}

impl CoxFit {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn hazard_ratio(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.hazard_ratios[i])
    }
}

/// Sorted, centred data with tie groups, ready for likelihood evaluation.
pub(crate) struct CoxData {
    pub(crate) p: usize,
    /// Row-major covariates in ascending time order.
    pub(crate) x: Vec<f64>,
    pub(crate) event: Vec<bool>,
    pub(crate) time: Vec<f64>,
    /// `[start, end)` ranges of equal times.
    groups: Vec<(usize, usize)>,
    pub(crate) means: Vec<f64>,
    pub(crate) sds: Vec<f64>,
}

impl CoxData {
    pub(crate) fn new(
        durations: &[f64],
        events: &[bool],
        names: &[&str],
        columns: &[&[f64]],
    ) -> Result<Self, SurvivalError> {
        validate(durations, events)?;
        let n = durations.len();
        if names.len() != columns.len() {
            return Err(SurvivalError::Shape("one name per covariate".into()));
        }
        let p = columns.len();
        let mut means = Vec::with_capacity(p);
        let mut sds = Vec::with_capacity(p);
        for (name, col) in names.iter().zip(columns) {
            if col.len() != n {
                return Err(SurvivalError::Shape(format!(
                    "covariate '{name}' has {} values, expected {n}",
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(SurvivalError::NonFinite(name.to_string()));
            }
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if col.iter().all(|v| *v == col[0]) {
                return Err(SurvivalError::ZeroVariance(name.to_string()));
            }
            means.push(mean);
            sds.push(var.sqrt());
        }
        if !events.iter().any(|e| *e) {
            return Err(SurvivalError::NoEvents);
        }
        let mut order: Vec<usize> = (0..n).collect();
        // ties in time keep input order irrelevant: the likelihood treats a tie group as a set
        order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));
        let mut x = Vec::with_capacity(n * p);
        for &i in &order {
            for j in 0..p {
                x.push(columns[j][i] - means[j]);
            }
        }
        let time: Vec<f64> = order.iter().map(|&i| durations[i]).collect();
        let mut groups = Vec::new();
        let mut s = 0;
        while s < n {
            let mut e = s;
            while e < n && time[e] == time[s] {
                e += 1;
            }
            groups.push((s, e));
            s = e;
        }
        Ok(Self {
            p,
            x,
            event: order.iter().map(|&i| events[i]).collect(),
            time,
            groups,
            means,
            sds,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Log partial likelihood, score and observed information at `beta`.
    pub(crate) fn evaluate(&self, beta: &[f64], ties: Ties) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.p;
        let n = self.time.len();
        let eta: Vec<f64> = (0..n)
            .map(|i| self.row(i).iter().zip(beta).map(|(x, b)| x * b).sum())
            .collect();
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

        let mut ll = 0.0;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        for &(start, end) in self.groups.iter().rev() {
            let mut d = 0usize;
            let mut d0 = 0.0;
            let mut d1 = DVector::zeros(p);
            let mut d2 = DMatrix::zeros(p, p);
            for i in start..end {
                let xi = DVector::from_column_slice(self.row(i));
                let wx = &xi * w[i];
                s0 += w[i];
                s1 += &wx;
                s2 += &wx * xi.transpose();
                if self.event[i] {
                    d += 1;
                    ll += eta[i];
                    grad += &xi;
                    d0 += w[i];
                    d1 += &wx;
                    d2 += &wx * xi.transpose();
                }
            }
            for l in 0..d {
                let f = match ties {
                    Ties::Efron => l as f64 / d as f64,
                    Ties::Breslow => 0.0,
                };
                let r0 = s0 - f * d0;
                let r1 = &s1 - &d1 * f;
                let r2 = &s2 - &d2 * f;
                ll -= r0.ln() + shift;
                grad -= &r1 / r0;
                info += &r2 / r0 - (&r1 * r1.transpose()) / (r0 * r0);
            }
        }
        (ll, grad, info)
    }

    /// Breslow cumulative baseline hazard at the centred covariates.
    fn baseline(&self, beta: &[f64]) -> Vec<BaselinePoint> {
        let n = self.time.len();
        let w: Vec<f64> = (0..n)
            .map(|i| self.row(i).iter().zip(beta).map(|(x, b)| x * b).sum::<f64>().exp())
            .collect();
        let mut risk: f64 = w.iter().sum();
        let mut out = Vec::new();
        let mut h = 0.0;
        for &(start, end) in &self.groups {
            let d = (start..end).filter(|&i| self.event[i]).count();
            if d > 0 {
                h += d as f64 / risk;
                out.push(BaselinePoint {
                    time: self.time[start],
                    cumulative_hazard: h,
                });
            }
            risk -= (start..end).map(|i| w[i]).sum::<f64>();
        }
        out
    }
}

fn invert(info: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    info.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| info.clone().try_inverse())
}

/// Quadratic form `g' I^-1 g`.
pub(crate) fn score_statistic(grad: &DVector<f64>, info: &DMatrix<f64>) -> Option<f64> {
    let inv = invert(info)?;
    Some((grad.transpose() * inv * grad)[(0, 0)])
}

/// Newton-Raphson maximisation of the Cox partial likelihood with step
/// halving. Covariates are centred internally; coefficients are not.
pub fn cox_fit(
    durations: &[f64],
    events: &[bool],
    names: &[&str],
    columns: &[&[f64]],
    options: &CoxOptions,
) -> Result<CoxFit, SurvivalError> {
    let data = CoxData::new(durations, events, names, columns)?;
    fit_prepared(&data, names, options)
}

pub(crate) fn fit_prepared(data: &CoxData, names: &[&str], options: &CoxOptions) -> Result<CoxFit, SurvivalError> {
    let p = data.p;
    let mut beta = vec![0.0; p];
    let (ll0, g0, i0) = data.evaluate(&beta, options.ties);
    let score0 = score_statistic(&g0, &i0).ok_or(SurvivalError::Singular)?;
    let (mut ll, mut grad, mut info) = (ll0, g0, i0);
    let mut trace = vec![Iteration {
        iteration: 0,
        log_likelihood: ll,
        gradient_norm: grad.norm(),
        step_halvings: 0,
    }];
    let mut iterations = 0;
    while grad.norm() >= options.tol && iterations < options.max_iter {
        iterations += 1;
        let step = match info.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => info.clone().lu().solve(&grad).ok_or(SurvivalError::Singular)?,
        };
        let mut scale = 1.0;
        let mut halvings = 0;
        let mut accepted = None;
        while halvings <= 40 {
            let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let eval = data.evaluate(&candidate, options.ties);
            if eval.0.is_finite() && eval.0 >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((candidate, eval));
                break;
            }
            scale /= 2.0;
            halvings += 1;
        }
        let Some((candidate, (l, g, i))) = accepted else { break };
        let stalled = candidate == beta;
        beta = candidate;
        ll = l;
        grad = g;
        info = i;
        trace.push(Iteration {
            iteration: iterations,
            log_likelihood: ll,
            gradient_norm: grad.norm(),
            step_halvings: halvings,
        });
        if stalled {
            break;
        }
    }
    let gradient_norm = grad.norm();
    let cov = invert(&info);
    let flat = cov
        .as_ref()
        .is_some_and(|c| (0..p).any(|j| c[(j, j)].max(0.0).sqrt() * data.sds[j] > FLAT));
    let diverging = flat || beta.iter().zip(&data.sds).any(|(b, sd)| (b * sd).abs() > DIVERGENCE);
    if gradient_norm >= options.tol || diverging {
        return Err(SurvivalError::NotConverged {
            iterations,
            gradient_norm,
            diverging,
            trace,
        });
    }
    let cov = cov.ok_or(SurvivalError::Singular)?;
    let std_errors: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let z: Vec<f64> = beta.iter().zip(&std_errors).map(|(b, s)| b / s).collect();
    let lr = (2.0 * (ll - ll0)).max(0.0);
    Ok(CoxFit {
        names: names.iter().map(|s| s.to_string()).collect(),
        hazard_ratios: beta.iter().map(|b| b.exp()).collect(),
        ci_lower: beta.iter().zip(&std_errors).map(|(b, s)| (b - Z95 * s).exp()).collect(),
        ci_upper: beta.iter().zip(&std_errors).map(|(b, s)| (b + Z95 * s).exp()).collect(),
        p_values: z.iter().map(|z| normal_two_sided(*z)).collect(),
        z,
        std_errors,
        log_likelihood: ll,
        null_log_likelihood: ll0,
        score_statistic: score0,
        score_p: chi2_sf(score0, p as f64),
        lr_statistic: lr,
        lr_p: chi2_sf(lr, p as f64),
        covariance: (0..p).map(|r| (0..p).map(|c| cov[(r, c)]).collect()).collect(),
        baseline: data.baseline(&beta),
        covariate_means: data.means.clone(),
        ties: options.ties,
        n: data.time.len(),
        events: data.event.iter().filter(|e| **e).count(),
        coefficients: beta,
        iterations,
        converged: true,
        gradient_norm,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Log partial likelihood for one covariate, written out term by term.
    fn brute_ll(t: &[f64], e: &[bool], x: &[f64], b: f64, ties: Ties) -> f64 {
        let mut times: Vec<f64> = t.iter().zip(e).filter(|(_, e)| **e).map(|(t, _)| *t).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut ll = 0.0;
        for u in times {
            let dead: Vec<usize> = (0..t.len()).filter(|&i| e[i] && t[i] == u).collect();
            let risk: f64 = (0..t.len()).filter(|&i| t[i] >= u).map(|i| (b * x[i]).exp()).sum();
            let dsum: f64 = dead.iter().map(|&i| (b * x[i]).exp()).sum();
            for (l, &i) in dead.iter().enumerate() {
                ll += b * x[i];
                let f = if ties == Ties::Efron {
                    l as f64 / dead.len() as f64
                } else {
                    0.0
                };
                ll -= (risk - f * dsum).ln();
            }
        }
        ll
    }

    /// Grid scan then golden-section refinement of the brute likelihood.
    fn brute_max(t: &[f64], e: &[bool], x: &[f64], ties: Ties) -> f64 {
        let f = |b: f64| brute_ll(t, e, x, b, ties);
        let mut best = -10.0;
        let mut b = -10.0;
        while b <= 10.0 {
            if f(b) > f(best) {
                best = b;
            }
            b += 0.01;
        }
        let (mut lo, mut hi) = (best - 0.01, best + 0.01);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if f(m1) < f(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        (lo + hi) / 2.0
    }

    fn dataset(seed: u64, n: usize, tie_free: bool) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let t: Vec<f64> = (0..n)
            .map(|i| {
                if tie_free {
                    i as f64 + 1.0 + rng.random::<f64>() * 0.5
                } else {
                    f64::from(rng.random_range(1..6u8))
                }
            })
            .collect();
        let e: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        (t, e, x)
    }

    #[test]
    fn zero_variance_covariate_named() {
        let err = cox_fit(
            &[1.0, 2.0],
            &[true, true],
            &["age"],
            &[&[3.0, 3.0]],
            &CoxOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SurvivalError::ZeroVariance(ref n) if n == "age"));
    }

    #[test]
    fn separation_is_reported() {
        // every event in the x=1 group happens before any x=0 time
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let e = [true; 6];
        let x = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let err = cox_fit(&t, &e, &["x"], &[&x], &CoxOptions::default()).unwrap_err();
        assert!(matches!(err, SurvivalError::NotConverged { .. }), "{err:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 25;
            let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..8u8))).collect();
            let e: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
            let b: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let Ok(data) = CoxData::new(&t, &e, &["a", "b"], &[&a, &b]) else {
                continue;
            };
            let beta = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            for ties in [Ties::Efron, Ties::Breslow] {
                let (_, g, _) = data.evaluate(&beta, ties);
                for j in 0..2 {
                    let h = 1e-6;
                    let mut up = beta;
                    up[j] += h;
                    let mut dn = beta;
                    dn[j] -= h;
                    let fd = (data.evaluate(&up, ties).0 - data.evaluate(&dn, ties).0) / (2.0 * h);
                    assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "{fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn matches_brute_maximiser() {
        let mut checked = 0;
        for seed in 0..40 {
            for tie_free in [true, false] {
                let (t, e, x) = dataset(seed, 8 + (seed as usize % 20), tie_free);
                for ties in [Ties::Efron, Ties::Breslow] {
                    let opts = CoxOptions {
                        ties,
                        ..CoxOptions::default()
                    };
                    let Ok(fit) = cox_fit(&t, &e, &["x"], &[&x], &opts) else {
                        continue;
                    };
                    let oracle = brute_max(&t, &e, &x, ties);
                    assert!(
                        (fit.coefficients[0] - oracle).abs() < 1e-4,
                        "seed {seed}: {} vs {oracle}",
                        fit.coefficients[0]
                    );
                    let centred: Vec<f64> = x.iter().map(|v| v - fit.covariate_means[0]).collect();
                    let direct = brute_ll(&t, &e, &centred, fit.coefficients[0], ties);
                    assert!((fit.log_likelihood - direct).abs() < 1e-9);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn likelihood_never_decreases() {
        let (t, e, x) = dataset(3, 30, false);
        let fit = cox_fit(&t, &e, &["x"], &[&x], &CoxOptions::default()).unwrap();
        assert!(fit
            .trace
            .windows(2)
            .all(|w| w[1].log_likelihood >= w[0].log_likelihood - 1e-12));
        assert!(fit.gradient_norm < 1e-9);
        assert_eq!(fit.hazard_ratios[0], fit.coefficients[0].exp());
        assert!(fit
            .baseline
            .windows(2)
            .all(|w| w[1].cumulative_hazard > w[0].cumulative_hazard));
    }

    proptest! {
        #[test]
        fn efron_equals_breslow_without_ties(seed in any::<u64>(), n in 6usize..30) {
            let (t, e, x) = dataset(seed, n, true);
            let efron = cox_fit(&t, &e, &["x"], &[&x], &CoxOptions::default());
            let breslow = cox_fit(&t, &e, &["x"], &[&x], &CoxOptions { ties: Ties::Breslow, ..CoxOptions::default() });
            match (efron, breslow) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.coefficients, b.coefficients);
                    prop_assert_eq!(a.log_likelihood, b.log_likelihood);
                }
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{a:?} / {b:?}"),
            }
        }

        #[test]
        fn order_invariant(seed in any::<u64>()) {
            let (t, e, x) = dataset(seed, 20, false);
            let Ok(a) = cox_fit(&t, &e, &["x"], &[&x], &CoxOptions::default()) else { return Ok(()) };
            let rev = |v: &[f64]| v.iter().rev().copied().collect::<Vec<_>>();
            let er: Vec<bool> = e.iter().rev().copied().collect();
            let b = cox_fit(&rev(&t), &er, &["x"], &[&rev(&x)], &CoxOptions::default()).unwrap();
            prop_assert!((a.coefficients[0] - b.coefficients[0]).abs() < 1e-9);
            prop_assert!((a.p_values[0] - b.p_values[0]).abs() < 1e-9);
        }
    }
}
