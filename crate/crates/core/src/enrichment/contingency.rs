use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use super::EnrichmentError;
use crate::stats::chi2_sf;

/// Rows: in cluster / rest. Columns: feature present / absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn validate(&self) -> Result<(), EnrichmentError> {
        if self.a + self.b == 0 {
            return Err(EnrichmentError::EmptyMargin("cluster"));
        }
        if self.c + self.d == 0 {
            return Err(EnrichmentError::EmptyMargin("rest"));
        }
        Ok(())
    }

    /// Cluster and rest exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.c, self.d, self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Fisher,
    ChiSquared,
    KruskalWallis,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Fisher => "fisher",
            TestKind::ChiSquared => "chi_squared",
            TestKind::KruskalWallis => "kruskal_wallis",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: TestKind,
    /// Absent for the exact test.
    pub statistic: Option<f64>,
    pub p_value: f64,
}

/// Probabilities within this relative distance of the observed one count
/// as "as extreme", absorbing rounding in the log-space computation.
const FISHER_RELATIVE_TOL: f64 = 1e-7;

/// Two-sided Fisher exact test: total probability of all tables with the
/// observed margins that are no more likely than the observed table.
pub fn fisher_exact(t: &ContingencyTable) -> Result<f64, EnrichmentError> {
    t.validate()?;
    let n = t.total();
    let row = t.a + t.b;
    let col = t.a + t.c;
    let lo = (row + col).saturating_sub(n);
    let hi = row.min(col);
    let ln_denominator = ln_binomial(n, row);
    let ln_p = |x: u64| ln_binomial(col, x) + ln_binomial(n - col, row - x) - ln_denominator;
    let observed = ln_p(t.a).exp();
    let mut total = 0.0;
    for x in lo..=hi {
        let p = ln_p(x).exp();
        if p <= observed * (1.0 + FISHER_RELATIVE_TOL) {
            total += p;
        }
    }
    Ok(total.min(1.0))
}

/// Pearson chi-squared on the 2x2 table, one degree of freedom, no
/// continuity correction.
pub fn chi_squared(t: &ContingencyTable) -> Result<(f64, f64), EnrichmentError> {
    t.validate()?;
    let n = t.total() as f64;
    let cells = [t.a, t.b, t.c, t.d].map(|v| v as f64);
    let rows = [cells[0] + cells[1], cells[2] + cells[3]];
    let cols = [cells[0] + cells[2], cells[1] + cells[3]];
    if cols.contains(&0.0) {
        return Ok((0.0, 1.0));
    }
    let mut stat = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let e = rows[r] * cols[c] / n;
            stat += (cells[r * 2 + c] - e).powi(2) / e;
        }
    }
    Ok((stat, chi2_sf(stat, 1.0)))
}

/// Chi-squared when every observed cell exceeds 10, Fisher otherwise.
pub fn categorical_test(t: &ContingencyTable) -> Result<TestResult, EnrichmentError> {
    if [t.a, t.b, t.c, t.d].iter().all(|v| *v > 10) {
        let (stat, p) = chi_squared(t)?;
        Ok(TestResult {
            test: TestKind::ChiSquared,
            statistic: Some(stat),
            p_value: p,
        })
    } else {
        Ok(TestResult {
            test: TestKind::Fisher,
            statistic: None,
            p_value: fisher_exact(t)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Over,
    Under,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialOdds {
    #[serde(rename = "+inf")]
    PositiveInfinity,
    Undefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OddsValue {
    Finite(f64),
    Special(SpecialOdds),
}

impl OddsValue {
    pub fn as_f64(self) -> f64 {
        match self {
            OddsValue::Finite(v) => v,
            OddsValue::Special(SpecialOdds::PositiveInfinity) => f64::INFINITY,
            OddsValue::Special(SpecialOdds::Undefined) => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddsRatio {
    pub value: OddsValue,
    /// Haldane-Anscombe estimate (0.5 added to every cell), reported when
    /// any cell is zero.
    pub corrected: Option<f64>,
    pub direction: Direction,
}

/// `(a d) / (b c)` with sentinels for zero denominators.
pub fn odds_ratio(t: &ContingencyTable) -> OddsRatio {
    let ad = t.a as f64 * t.d as f64;
    let bc = t.b as f64 * t.c as f64;
    let value = match (ad > 0.0, bc > 0.0) {
        (_, true) => OddsValue::Finite(ad / bc),
        (true, false) => OddsValue::Special(SpecialOdds::PositiveInfinity),
        (false, false) => OddsValue::Special(SpecialOdds::Undefined),
    };
    let corrected = [t.a, t.b, t.c, t.d].contains(&0).then(|| {
        let [a, b, c, d] = [t.a, t.b, t.c, t.d].map(|v| v as f64 + 0.5);
        a * d / (b * c)
    });
    let direction = match (t.a * t.d).cmp(&(t.b * t.c)) {
        std::cmp::Ordering::Greater => Direction::Over,
        std::cmp::Ordering::Less => Direction::Under,
        std::cmp::Ordering::Equal => Direction::Neutral,
    };
    OddsRatio {
        value,
        corrected,
        direction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: u64, k: u64) -> u128 {
        if k > n {
            return 0;
        }
        let k = k.min(n - k);
        let mut r: u128 = 1;
        for i in 0..k {
            r = r * u128::from(n - i) / u128::from(i + 1);
        }
        r
    }

    /// Enumerates every table with the observed margins in exact integers.
    fn fisher_oracle(t: &ContingencyTable) -> f64 {
        let n = t.total();
        let row = t.a + t.b;
        let col = t.a + t.c;
        let weight = |x: u64| binom(col, x) * binom(n - col, row - x);
        let obs = weight(t.a);
        let lo = (row + col).saturating_sub(n);
        let mut num: u128 = 0;
        for x in lo..=row.min(col) {
            let w = weight(x);
            if (w as f64) <= obs as f64 * (1.0 + 1e-7) {
                num += w;
            }
        }
        num as f64 / binom(n, row) as f64
    }

    #[test]
    fn fisher_examples() {
        let p = fisher_exact(&ContingencyTable::new(10, 0, 0, 10)).unwrap();
        assert!((p - 2.0 / binom(20, 10) as f64).abs() < 1e-15);
        assert!((fisher_exact(&ContingencyTable::new(5, 5, 5, 5)).unwrap() - 1.0).abs() < 1e-12);
        assert!(fisher_exact(&ContingencyTable::new(0, 0, 1, 2)).is_err());
    }

    #[test]
    fn fisher_matches_enumeration_for_small_tables() {
        for n in 1..=30u64 {
            for a in 0..=n {
                for b in 0..=n - a {
                    for c in 0..=n - a - b {
                        let t = ContingencyTable::new(a, b, c, n - a - b - c);
                        if t.validate().is_err() {
                            continue;
                        }
                        let p = fisher_exact(&t).unwrap();
                        assert!((p - fisher_oracle(&t)).abs() < 1e-12, "{t:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn chi_squared_path_and_value() {
        let t = ContingencyTable::new(20, 30, 25, 25);
        let r = categorical_test(&t).unwrap();
        assert_eq!(r.test, TestKind::ChiSquared);
        // textbook sum over cells of (O - E)^2 / E
        let n = 100.0;
        let obs = [[20.0, 30.0], [25.0, 25.0]];
        let rows = [50.0, 50.0];
        let cols = [45.0, 55.0];
        let mut expected = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                let e: f64 = rows[r] * cols[c] / n;
                expected += (obs[r][c] - e) * (obs[r][c] - e) / e;
            }
        }
        assert!((r.statistic.unwrap() - expected).abs() < 1e-12);
        assert_eq!(
            categorical_test(&ContingencyTable::new(11, 11, 11, 10)).unwrap().test,
            TestKind::Fisher
        );
    }

    #[test]
    fn odds_ratio_cases() {
        let or = odds_ratio(&ContingencyTable::new(28, 92, 25, 917));
        assert!((or.value.as_f64() - 28.0 * 917.0 / (92.0 * 25.0)).abs() < 1e-12);
        assert!((or.value.as_f64() - 11.16).abs() < 0.01);
        assert_eq!(or.direction, Direction::Over);
        assert!(or.corrected.is_none());

        let inf = odds_ratio(&ContingencyTable::new(111, 9, 0, 942));
        assert_eq!(inf.value, OddsValue::Special(SpecialOdds::PositiveInfinity));
        assert!(inf.corrected.unwrap().is_finite() && inf.corrected.unwrap() > 1.0);
        assert_eq!(serde_json::to_string(&inf.value).unwrap(), "\"+inf\"");

        let even = odds_ratio(&ContingencyTable::new(5, 10, 5, 10));
        assert_eq!(even.value, OddsValue::Finite(1.0));
        assert_eq!(even.direction, Direction::Neutral);
        assert_eq!(
            odds_ratio(&ContingencyTable::new(0, 3, 0, 4)).value,
            OddsValue::Special(SpecialOdds::Undefined)
        );
    }

    #[test]
    fn swapping_groups_inverts_odds_and_keeps_p() {
        for t in [ContingencyTable::new(3, 7, 9, 2), ContingencyTable::new(20, 30, 25, 25)] {
            let s = t.swapped();
            assert!((odds_ratio(&t).value.as_f64() * odds_ratio(&s).value.as_f64() - 1.0).abs() < 1e-12);
            assert!((categorical_test(&t).unwrap().p_value - categorical_test(&s).unwrap().p_value).abs() < 1e-12);
        }
    }
}
