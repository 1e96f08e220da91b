use std::io::Write;

use serde::{Deserialize, Serialize};

use super::SurvivalError;

const Z95: f64 = 1.959963984540054;

/// Product-limit step function over the distinct observed times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub n: usize,
    pub times: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub censored: Vec<usize>,
    pub survival: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl KmCurve {
    /// S(t), with S = 1 before the first observed time.
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|x| *x <= t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }

    /// First time at which S drops to 0.5 or below.
    pub fn median(&self) -> Option<f64> {
        self.times
            .iter()
            .zip(&self.survival)
            .find(|(_, s)| **s <= 0.5)
            .map(|(t, _)| *t)
    }

    pub fn total_events(&self) -> usize {
        self.events.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SurvivalError> {
        let mut w = csv::Writer::from_writer(writer);
        let fmt = |e: csv::Error| SurvivalError::Format(e.to_string());
        w.write_record(["time", "at_risk", "events", "censored", "survival", "lower", "upper"])
            .map_err(fmt)?;
        w.write_record(["0", &self.n.to_string(), "0", "0", "1", "1", "1"])
            .map_err(fmt)?;
        for i in 0..self.times.len() {
            w.write_record([
                self.times[i].to_string(),
                self.at_risk[i].to_string(),
                self.events[i].to_string(),
                self.censored[i].to_string(),
                self.survival[i].to_string(),
                self.lower[i].to_string(),
                self.upper[i].to_string(),
            ])
            .map_err(fmt)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn validate(durations: &[f64], events: &[bool]) -> Result<(), SurvivalError> {
    if durations.is_empty() {
        return Err(SurvivalError::Empty);
    }
    if durations.len() != events.len() {
        return Err(SurvivalError::Shape(format!(
            "{} durations but {} event flags",
            durations.len(),
            events.len()
        )));
    }
    if let Some(d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(SurvivalError::NonPositiveDuration(*d));
    }
    Ok(())
}

/// Kaplan-Meier estimate with 95% intervals from the log(-log S)
/// transform of Greenwood's variance.
pub fn km_fit(durations: &[f64], events: &[bool]) -> Result<KmCurve, SurvivalError> {
    validate(durations, events)?;
    let n = durations.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));

    let mut curve = KmCurve {
        n,
        times: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        censored: Vec::new(),
        survival: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    let mut s = 1.0;
    let mut greenwood = 0.0;
    let mut i = 0;
    while i < n {
        let t = durations[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < n && durations[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        let at_risk = n - i;
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            if at_risk > d {
                greenwood += d as f64 / (at_risk as f64 * (at_risk - d) as f64);
            }
        }
        let (lo, hi) = if s <= 0.0 {
            (0.0, 0.0)
        } else if s >= 1.0 {
            (1.0, 1.0)
        } else {
            let ln_s = s.ln();
            let se = (greenwood / (ln_s * ln_s)).sqrt();
            (s.powf((Z95 * se).exp()), s.powf((-Z95 * se).exp()))
        };
        curve.times.push(t);
        curve.at_risk.push(at_risk);
        curve.events.push(d);
        curve.censored.push(j - i - d);
        curve.survival.push(s);
        curve.lower.push(lo);
        curve.upper.push(hi);
        i = j;
    }
    Ok(curve)
}
