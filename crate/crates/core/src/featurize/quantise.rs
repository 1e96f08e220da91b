use serde::{Deserialize, Serialize};

use super::aggregate::median_sorted;
use super::FeaturizeError;

/// Equal-frequency binning fitted on training values.
///
/// Bin `j` holds values greater than `cut_points[j - 1]` and at most
/// `cut_points[j]`; a value equal to a cut point goes to the lower bin.
/// Values outside `[lower, upper]` clamp to the first or last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantisationScheme {
    pub feature_id: String,
    pub lower: f64,
    pub upper: f64,
    /// Strictly increasing interior cut points.
    pub cut_points: Vec<f64>,
    pub representatives: Vec<f64>,
    pub requested_bins: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl QuantisationScheme {
    pub fn bin_count(&self) -> usize {
        self.cut_points.len() + 1
    }

    /// Bin edges `[lower, cut_1, .., upper]`.
    pub fn edges(&self) -> Vec<f64> {
        let mut e = Vec::with_capacity(self.cut_points.len() + 2);
        e.push(self.lower);
        e.extend_from_slice(&self.cut_points);
        e.push(self.upper);
        e
    }

    pub fn bin_of(&self, value: f64) -> usize {
        self.cut_points.partition_point(|c| *c < value)
    }

    pub fn apply(&self, value: f64) -> (usize, f64) {
        let b = self.bin_of(value);
        (b, self.representatives[b])
    }
}

/// Fits `bins` equal-frequency bins: sorted position `i` of `n` belongs to
/// target bin `floor(i * bins / n)`. Ties that straddle a boundary collapse
/// bins, in which case a warning records the reduced count.
pub fn fit_quantisation(feature_id: &str, values: &[f64], bins: usize) -> Result<QuantisationScheme, FeaturizeError> {
    if bins == 0 {
        return Err(FeaturizeError::InvalidBinCount);
    }
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return Err(FeaturizeError::EmptyInput(feature_id.to_string()));
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let lower = sorted[0];
    let upper = sorted[n - 1];

    let mut cut_points: Vec<f64> = Vec::with_capacity(bins.saturating_sub(1));
    for j in 1..bins {
        // last element of target bin j-1
        let end = (j * n) / bins;
        if end == 0 {
            continue;
        }
        let cut = sorted[end - 1];
        if cut >= upper {
            continue;
        }
        if cut_points.last().is_none_or(|last| cut > *last) {
            cut_points.push(cut);
        }
    }

    let mut representatives = Vec::with_capacity(cut_points.len() + 1);
    let mut start = 0;
    for b in 0..=cut_points.len() {
        let end = if b < cut_points.len() {
            sorted.partition_point(|v| *v <= cut_points[b])
        } else {
            n
        };
        representatives.push(median_sorted(&sorted[start..end]));
        start = end;
    }

    let mut warnings = Vec::new();
    if cut_points.len() + 1 < bins {
        warnings.push(format!(
            "{feature_id}: {} effective bins instead of {bins} (too few distinct values)",
            cut_points.len() + 1
        ));
    }
    Ok(QuantisationScheme {
        feature_id: feature_id.to_string(),
        lower,
        upper,
        cut_points,
        representatives,
        requested_bins: bins,
        warnings,
    })
}
