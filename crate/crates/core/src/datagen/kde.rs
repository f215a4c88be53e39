use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numerics::special::{normal_cdf, normal_pdf};

/// Minimum history length accepted by [`fit_load_kde`].
pub const MIN_HISTORY: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Silverman,
    Fixed(f64),
}

/// Gaussian-kernel density estimate of one load (MW), truncated to
/// `[min − 3h, max + 3h]` of its support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadDistribution {
    points: Vec<f64>,
    bandwidth: f64,
    lo: f64,
    hi: f64,
}

/// Silverman's rule of thumb, floored so constant histories stay usable.
fn silverman(points: &[f64]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<f64>() / n;
    let var = points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = points.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1.0);
        let (i, frac) = (pos.floor() as usize, pos.fract());
        let j = (i + 1).min(sorted.len() - 1);
        sorted[i] + frac * (sorted[j] - sorted[i])
    };
    let iqr = q(0.75) - q(0.25);
    let mut spread = var.sqrt();
    if iqr > 0.0 {
        spread = spread.min(iqr / 1.34);
    }
    let h = 0.9 * spread * n.powf(-0.2);
    h.max(1e-6 * mean.abs().max(1.0))
}

pub fn fit_load_kde(history: &[f64], rule: BandwidthRule) -> Result<LoadDistribution, DataError> {
    if history.len() < MIN_HISTORY {
        return Err(DataError::InsufficientHistory {
            got: history.len(),
            need: MIN_HISTORY,
        });
    }
    if let Some(bad) = history.iter().find(|x| !x.is_finite()) {
        return Err(DataError::Invalid(format!("non-finite history value {bad}")));
    }
    let h = match rule {
        BandwidthRule::Silverman => silverman(history),
        BandwidthRule::Fixed(h) if h > 0.0 && h.is_finite() => h,
        BandwidthRule::Fixed(h) => {
            return Err(DataError::Invalid(format!("bandwidth must be positive, got {h}")))
        }
    };
    let min = history.iter().copied().fold(f64::INFINITY, f64::min);
    let max = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(LoadDistribution {
        points: history.to_vec(),
        bandwidth: h,
        lo: min - 3.0 * h,
        hi: max + 3.0 * h,
    })
}

impl LoadDistribution {
    /// Degenerate distribution concentrated at `value` (zero bandwidth).
    pub fn point_mass(value: f64) -> Self {
        Self {
            points: vec![value],
            bandwidth: 0.0,
            lo: value,
            hi: value,
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Untruncated kernel mixture CDF.
    pub fn raw_cdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        self.points.iter().map(|p| normal_cdf((x - p) / h)).sum::<f64>() / self.points.len() as f64
    }

    fn raw_pdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        self.points.iter().map(|p| normal_pdf((x - p) / h)).sum::<f64>()
            / (self.points.len() as f64 * h)
    }

    /// Quantile of the truncated distribution at `u ∈ [0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        if self.bandwidth == 0.0 {
            return self.lo;
        }
        let (f_lo, f_hi) = (self.raw_cdf(self.lo), self.raw_cdf(self.hi));
        let target = f_lo + u.clamp(0.0, 1.0) * (f_hi - f_lo);
        // Safeguarded Newton on the raw CDF.
        let (mut a, mut b) = (self.lo, self.hi);
        let mut x = 0.5 * (a + b);
        let tol = 1e-12 * (self.hi - self.lo).max(1e-300);
        for _ in 0..200 {
            let f = self.raw_cdf(x) - target;
            if f.abs() < 1e-15 {
                return x;
            }
            if f > 0.0 {
                b = x;
            } else {
                a = x;
            }
            if b - a <= tol {
                return 0.5 * (a + b);
            }
            let d = self.raw_pdf(x);
            let newton = x - f / d;
            x = if d > 0.0 && newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
        }
        x
    }
}
