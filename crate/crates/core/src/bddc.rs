//! Per-channel Wald screening of incoming PMU measurements.
//!
//! Channel `2k + d` is channel `d` (0 magnitude, 1 angle) of the `k`-th
//! PMU, in the dataset's PMU order.

use serde::{Deserialize, Serialize};

use crate::datagen::SnapshotDataset;
use crate::numerics::special::normal_tail_inv;

/// Snapshots required by [`fit_stats`].
pub const MIN_SNAPSHOTS: usize = 30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BddcError {
    #[error("{got} snapshots, at least {need} required for channel statistics")]
    TooFewSnapshots { got: usize, need: usize },
    #[error("channel {channel} (bus {bus}) has zero variance")]
    ZeroVariance { channel: usize, bus: u32 },
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("measurement vector has {got} channels, statistics have {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite measurement in channel {0}")]
    NonFinite(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub pmu_buses: Vec<u32>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Sample mean and standard deviation of each channel over `rows`.
    pub fn from_rows<'a>(
        pmu_buses: Vec<u32>,
        rows: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<Self, BddcError> {
        let width = 2 * pmu_buses.len();
        let mut count = 0usize;
        let mut mean = vec![0.0; width];
        let mut m2 = vec![0.0; width];
        for row in rows {
            if row.len() != width {
                return Err(BddcError::Dimension {
                    expected: width,
                    got: row.len(),
                });
            }
            count += 1;
            for (c, &x) in row.iter().enumerate() {
                // Welford update.
                let d = x - mean[c];
                mean[c] += d / count as f64;
                m2[c] += d * (x - mean[c]);
            }
        }
        if count < MIN_SNAPSHOTS {
            return Err(BddcError::TooFewSnapshots {
                got: count,
                need: MIN_SNAPSHOTS,
            });
        }
        let std: Vec<f64> = m2.iter().map(|s| (s / (count - 1) as f64).sqrt()).collect();
        if let Some(c) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(BddcError::ZeroVariance {
                channel: c,
                bus: pmu_buses[c / 2],
            });
        }
        Ok(Self {
            pmu_buses,
            mean,
            std,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics of the measurements of every snapshot in `ds`.
pub fn fit_stats(ds: &SnapshotDataset) -> Result<ChannelStats, BddcError> {
    let rows: Vec<Vec<f64>> = (0..ds.len()).map(|s| ds.measured(s).into_vec()).collect();
    ChannelStats::from_rows(ds.header.pmu_buses.clone(), rows.iter().map(Vec::as_slice))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BddcReport {
    pub alpha: f64,
    /// `Q⁻¹(α/2)`.
    pub threshold: f64,
    /// `|z − μ₀| / σ₀` per channel.
    pub statistics: Vec<f64>,
    pub flags: Vec<bool>,
    /// Replacement value at flagged channels.
    pub corrections: Vec<Option<f64>>,
}

impl BddcReport {
    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

/// Two-sided detection threshold for false-positive rate `alpha`.
pub fn threshold(alpha: f64) -> Result<f64, BddcError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BddcError::Alpha(alpha));
    }
    Ok(normal_tail_inv(alpha / 2.0))
}

/// Flags channels whose standardized deviation exceeds the threshold and
/// replaces them by the training mean.
pub fn screen(z: &[f64], stats: &ChannelStats, alpha: f64) -> Result<(Vec<f64>, BddcReport), BddcError> {
    let t = threshold(alpha)?;
    if z.len() != stats.channels() {
        return Err(BddcError::Dimension {
            expected: stats.channels(),
            got: z.len(),
        });
    }
    if let Some(c) = z.iter().position(|v| !v.is_finite()) {
        return Err(BddcError::NonFinite(c));
    }
    let mut out = z.to_vec();
    let mut report = BddcReport {
        alpha,
        threshold: t,
        statistics: Vec::with_capacity(z.len()),
        flags: Vec::with_capacity(z.len()),
        corrections: Vec::with_capacity(z.len()),
    };
    for (c, v) in out.iter_mut().enumerate() {
        let stat = (*v - stats.mean[c]).abs() / stats.std[c];
        let bad = stat > t;
        if bad {
            *v = stats.mean[c];
        }
        report.statistics.push(stat);
        report.flags.push(bad);
        report.corrections.push(bad.then_some(stats.mean[c]));
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_stats(n: usize, mean: f64, sd: f64, seed: u64) -> ChannelStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, sd).unwrap();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![d.sample(&mut rng), d.sample(&mut rng)])
            .collect();
        ChannelStats::from_rows(vec![4], rows.iter().map(Vec::as_slice)).unwrap()
    }

    #[test]
    fn constant_channel_rejected() {
        let rows = vec![vec![1.0, 0.5]; 40];
        assert_eq!(
            ChannelStats::from_rows(vec![9], rows.iter().map(Vec::as_slice)),
            Err(BddcError::ZeroVariance { channel: 0, bus: 9 })
        );
    }

    #[test]
    fn too_few_snapshots() {
        let rows = vec![vec![1.0, 0.5]; 5];
        assert!(matches!(
            ChannelStats::from_rows(vec![9], rows.iter().map(Vec::as_slice)),
            Err(BddcError::TooFewSnapshots { got: 5, .. })
        ));
    }

    #[test]
    fn moments_recovered() {
        let s = gaussian_stats(100_000, 1.0, 0.01, 3);
        for c in 0..2 {
            assert!((s.mean[c] - 1.0).abs() < 0.01);
            assert!((s.std[c] / 0.01 - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn disjoint_datasets_agree() {
        let n = 20_000;
        let (a, b) = (gaussian_stats(n, 0.3, 0.02, 1), gaussian_stats(n, 0.3, 0.02, 2));
        let se_mean = 0.02 / (n as f64).sqrt();
        let se_sd = 0.02 / (2.0 * (n as f64 - 1.0)).sqrt();
        for c in 0..2 {
            // Difference of two estimates: standard error scales by √2.
            assert!((a.mean[c] - b.mean[c]).abs() < 3.0 * 2f64.sqrt() * se_mean);
            assert!((a.std[c] - b.std[c]).abs() < 3.0 * 2f64.sqrt() * se_sd);
        }
    }

    /// Φ⁻¹ by bisection on the series-based CDF, independent of the
    /// library's tail function.
    fn quantile_oracle(p: f64) -> f64 {
        let cdf = |x: f64| {
            // Φ(x) = 1/2 + φ(x) Σ x^(2k+1) / (1·3·…·(2k+1)).
            let mut term = x;
            let mut sum = x;
            for k in 1..200 {
                term *= x * x / (2 * k + 1) as f64;
                sum += term;
            }
            0.5 + sum * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
        };
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn threshold_matches_quantile() {
        let t = threshold(0.05).unwrap();
        assert!((t - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((t - quantile_oracle(0.975)).abs() < 1e-9);
        assert!((threshold(0.01).unwrap() - quantile_oracle(0.995)).abs() < 1e-9);
        assert_eq!(threshold(0.0), Err(BddcError::Alpha(0.0)));
        assert_eq!(threshold(1.0), Err(BddcError::Alpha(1.0)));
    }

    #[test]
    fn mean_is_clean_and_outlier_replaced() {
        let s = ChannelStats {
            pmu_buses: vec![1, 2],
            mean: vec![1.0, 0.0, 1.02, -0.1],
            std: vec![0.01, 0.002, 0.01, 0.002],
        };
        let (out, rep) = screen(&s.mean, &s, 0.01).unwrap();
        assert_eq!(out, s.mean);
        assert_eq!(rep.statistics, vec![0.0; 4]);
        assert_eq!(rep.flagged(), 0);

        let mut z = vec![1.003, 0.001, 1.02 + 10.0 * 0.01, -0.1005];
        let (out, rep) = screen(&z, &s, 0.01).unwrap();
        assert_eq!(rep.flags, vec![false, false, true, false]);
        assert_eq!(rep.corrections, vec![None, None, Some(1.02), None]);
        z[2] = 1.02;
        assert_eq!(out, z);

        let (again, rep2) = screen(&out, &s, 0.01).unwrap();
        assert_eq!(again, out);
        assert_eq!(rep2.flagged(), 0);
    }

    #[test]
    fn dimension_mismatch() {
        let s = gaussian_stats(50, 0.0, 1.0, 1);
        assert_eq!(
            screen(&[0.0; 3], &s, 0.01),
            Err(BddcError::Dimension { expected: 2, got: 3 })
        );
    }
}
