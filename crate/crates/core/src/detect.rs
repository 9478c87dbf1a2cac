//! Belief-indicator activity detection and evaluation metrics.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the NMSE in dB; exact recovery reports this value instead
/// of negative infinity.
pub const NMSE_FLOOR_DB: f64 = -300.0;

/// Thresholds for the belief-indicator activity detector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DetectorConfig {
    /// A belief counts as "non-zero" when it exceeds this threshold.
    pub belief_threshold: f64,
    /// Fraction of a user's home-AP antennas that must exceed the threshold.
    pub antenna_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            belief_threshold: 0.5,
            antenna_fraction: 0.9,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.belief_threshold && self.belief_threshold < 1.0) {
            return Err(Error::config("belief_threshold must lie in (0, 1)"));
        }
        if !(0.0 < self.antenna_fraction && self.antenna_fraction <= 1.0) {
            return Err(Error::config("antenna_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Joint output of activity detection and channel estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Per-user activity decisions.
    pub active: Vec<bool>,
    /// Estimated channel matrix with inactive users' rows zeroed.
    pub x_hat: Array2<Complex64>,
    /// Solver iterations spent producing the estimate (for per-cell
    /// deployments, the maximum over cells).
    pub iterations: usize,
    /// Mean belief over each user's home-AP antennas.
    pub belief_summary: Vec<f64>,
}

/// Decide one user's activity from the beliefs over its home-AP antennas:
/// active when at least `antenna_fraction` of them exceed `belief_threshold`.
pub fn decide_active(beliefs: &[f64], cfg: &DetectorConfig) -> bool {
    let over = beliefs
        .iter()
        .filter(|&&p| p > cfg.belief_threshold)
        .count();
    over as f64 / beliefs.len() as f64 >= cfg.antenna_fraction
}

/// Zero the rows of `x_hat` whose users are declared inactive.
pub fn zero_inactive_rows(x_hat: &mut Array2<Complex64>, active: &[bool]) {
    for (k, &is_active) in active.iter().enumerate() {
        if !is_active {
            x_hat.row_mut(k).fill(Complex64::new(0.0, 0.0));
        }
    }
}

/// Detection-error summary: total error probability plus its miss and
/// false-alarm components, all normalized by the user count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionErrors {
    pub error_probability: f64,
    pub missed: f64,
    pub false_alarm: f64,
}

/// Error probability between estimated and true activity vectors.
pub fn error_probability(estimated: &[bool], truth: &[bool]) -> Result<DetectionErrors> {
    if estimated.len() != truth.len() {
        return Err(Error::dimension(format!(
            "activity vectors have lengths {} and {}",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::dimension("activity vectors are empty"));
    }
    let mut missed = 0usize;
    let mut false_alarm = 0usize;
    for (&e, &t) in estimated.iter().zip(truth.iter()) {
        match (e, t) {
            (false, true) => missed += 1,
            (true, false) => false_alarm += 1,
            _ => {}
        }
    }
    let k = estimated.len() as f64;
    Ok(DetectionErrors {
        error_probability: (missed + false_alarm) as f64 / k,
        missed: missed as f64 / k,
        false_alarm: false_alarm as f64 / k,
    })
}

/// Normalized mean square error in dB over the full matrices, floored at
/// [`NMSE_FLOOR_DB`].
pub fn nmse_db(x_hat: &Array2<Complex64>, x_true: &Array2<Complex64>) -> Result<f64> {
    if x_hat.dim() != x_true.dim() {
        return Err(Error::dimension(format!(
            "estimate is {:?}, truth is {:?}",
            x_hat.dim(),
            x_true.dim()
        )));
    }
    let energy: f64 = x_true.iter().map(|v| v.norm_sqr()).sum();
    if energy == 0.0 {
        return Err(Error::numerical("true channel matrix is all-zero"));
    }
    let err: f64 = x_hat
        .iter()
        .zip(x_true.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    if err == 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * (err / energy).log10()).max(NMSE_FLOOR_DB))
}

/// NMSE restricted to the truly active users' rows; secondary diagnostic.
pub fn nmse_db_active_rows(
    x_hat: &Array2<Complex64>,
    x_true: &Array2<Complex64>,
    activity: &[bool],
) -> Result<f64> {
    if x_hat.dim() != x_true.dim() || activity.len() != x_true.nrows() {
        return Err(Error::dimension("shape mismatch for active-row NMSE"));
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (k, &a) in activity.iter().enumerate() {
        if !a {
            continue;
        }
        for (x, t) in x_hat.row(k).iter().zip(x_true.row(k).iter()) {
            err += (x - t).norm_sqr();
            energy += t.norm_sqr();
        }
    }
    if energy == 0.0 {
        return Err(Error::numerical("no active rows with energy"));
    }
    if err == 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * (err / energy).log10()).max(NMSE_FLOOR_DB))
}
