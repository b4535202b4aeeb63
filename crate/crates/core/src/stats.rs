//! Position error statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    /// East/north error only.
    Horizontal,
    #[default]
    ThreeD,
}

impl ErrorMetric {
    pub fn error(&self, est: &[f64; 3], truth: &[f64; 3]) -> f64 {
        let d: Vec<f64> = est.iter().zip(truth).map(|(a, b)| a - b).collect();
        match self {
            ErrorMetric::Horizontal => d[0].hypot(d[1]),
            ErrorMetric::ThreeD => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub metric: ErrorMetric,
    pub count: usize,
    pub rms: f64,
    pub p50: f64,
    pub p95: f64,
    /// `(p50 + p95) / 2`.
    pub sdc_score: f64,
    /// Errors sorted ascending.
    pub cdf: Vec<f64>,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64], metric: ErrorMetric) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::InvalidInput("no errors to summarize".into()));
        }
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidInput("non-finite error value".into()));
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rms = (sorted.iter().map(|e| e * e).sum::<f64>() / sorted.len() as f64).sqrt();
        let p50 = percentile_sorted(&sorted, 50.0);
        let p95 = percentile_sorted(&sorted, 95.0);
        Ok(Self {
            metric,
            count: sorted.len(),
            rms,
            p50,
            p95,
            sdc_score: sdc_score(p50, p95),
            cdf: sorted,
        })
    }

    /// `(error, cumulative fraction)` rows, the fraction being `k/n` for the
    /// k-th smallest error.
    pub fn cdf_table(&self) -> Vec<(f64, f64)> {
        let n = self.cdf.len() as f64;
        self.cdf
            .iter()
            .enumerate()
            .map(|(k, e)| (*e, (k + 1) as f64 / n))
            .collect()
    }
}

pub fn sdc_score(p50: f64, p95: f64) -> f64 {
    (p50 + p95) / 2.0
}

/// Percentile by linear interpolation between closest ranks:
/// `h = (n − 1)·p/100`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("percentile of empty data".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidInput(format!(
            "percentile {p} outside [0, 100]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn compute_error_stats(
    estimates: &[[f64; 3]],
    truth: &[[f64; 3]],
    metric: ErrorMetric,
) -> Result<ErrorStats> {
    if estimates.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "error statistics".into(),
            expected: truth.len(),
            found: estimates.len(),
        });
    }
    let errors: Vec<f64> = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| metric.error(e, t))
        .collect();
    ErrorStats::from_errors(&errors, metric)
}
