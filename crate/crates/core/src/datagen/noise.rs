use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DataError;

/// 99.7th percentile of a unit Rayleigh variable: `√(−2 ln 0.003)`.
pub const RAYLEIGH_997: f64 = 3.408_560_690_471_574;

/// PMU phasor measurement error model.
///
/// Magnitude errors are multiplicative, angle errors additive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// Independent zero-mean Gaussian errors.
    GaussianTve {
        /// Standard deviation of the relative magnitude error.
        sigma_mag: f64,
        /// Standard deviation of the angle error (rad).
        sigma_ang: f64,
    },
    /// Two-channel Gaussian mixture; the component is drawn independently
    /// for each channel.
    GmmTve {
        weights: Vec<f64>,
        mag_mean_pct: Vec<f64>,
        mag_std_pct: Vec<f64>,
        ang_mean_deg: Vec<f64>,
        ang_std_deg: Vec<f64>,
    },
}

/// One measurement error draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorDraw {
    /// Relative magnitude error.
    pub mag: f64,
    /// Angle error (rad).
    pub ang: f64,
    /// Mixture components used (0 for the Gaussian model).
    pub mag_component: usize,
    pub ang_component: usize,
}

impl NoiseModel {
    /// Gaussian model whose 99.7th-percentile TVE equals `tve`
    /// (e.g. 0.01), split equally between magnitude and angle.
    pub fn gaussian_tve(tve: f64) -> Self {
        let sigma = tve / RAYLEIGH_997;
        NoiseModel::GaussianTve {
            sigma_mag: sigma,
            sigma_ang: sigma,
        }
    }

    /// Two-component mixture with the reference non-Gaussian parameters.
    pub fn gmm_tve_default() -> Self {
        NoiseModel::GmmTve {
            weights: vec![0.4, 0.6],
            mag_mean_pct: vec![-0.4, 0.6],
            mag_std_pct: vec![0.25, 0.25],
            ang_mean_deg: vec![-0.2, 0.3],
            ang_std_deg: vec![0.12, 0.12],
        }
    }

    pub fn none() -> Self {
        NoiseModel::GaussianTve {
            sigma_mag: 0.0,
            sigma_ang: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(format!("noise model: {m}")));
        match self {
            NoiseModel::GaussianTve {
                sigma_mag,
                sigma_ang,
            } => {
                if !(*sigma_mag >= 0.0 && *sigma_ang >= 0.0) {
                    return bad("standard deviations must be non-negative");
                }
            }
            NoiseModel::GmmTve {
                weights,
                mag_mean_pct,
                mag_std_pct,
                ang_mean_deg,
                ang_std_deg,
            } => {
                let c = weights.len();
                if c == 0
                    || [mag_mean_pct, mag_std_pct, ang_mean_deg, ang_std_deg]
                        .iter()
                        .any(|v| v.len() != c)
                {
                    return bad("component vectors must share one non-zero length");
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("weights must be non-negative and sum to 1");
                }
                if mag_std_pct.iter().chain(ang_std_deg).any(|s| !(*s > 0.0)) {
                    return bad("standard deviations must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ErrorDraw {
        match self {
            NoiseModel::GaussianTve {
                sigma_mag,
                sigma_ang,
            } => {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                ErrorDraw {
                    mag: sigma_mag * a,
                    ang: sigma_ang * b,
                    mag_component: 0,
                    ang_component: 0,
                }
            }
            NoiseModel::GmmTve {
                weights,
                mag_mean_pct,
                mag_std_pct,
                ang_mean_deg,
                ang_std_deg,
            } => {
                let cm = pick(weights, rng.random());
                let a: f64 = StandardNormal.sample(rng);
                let ca = pick(weights, rng.random());
                let b: f64 = StandardNormal.sample(rng);
                ErrorDraw {
                    mag: (mag_mean_pct[cm] + mag_std_pct[cm] * a) / 100.0,
                    ang: (ang_mean_deg[ca] + ang_std_deg[ca] * b).to_radians(),
                    mag_component: cm,
                    ang_component: ca,
                }
            }
        }
    }

    /// Noisy copy of a true phasor `(vm, va)`.
    pub fn apply<R: Rng + ?Sized>(&self, vm: f64, va: f64, rng: &mut R) -> (f64, f64) {
        let e = self.draw(rng);
        (vm * (1.0 + e.mag), va + e.ang)
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Total vector error of a measured phasor against the truth.
pub fn tve(vm: f64, va: f64, vm_meas: f64, va_meas: f64) -> f64 {
    let dr = vm_meas * va_meas.cos() - vm * va.cos();
    let di = vm_meas * va_meas.sin() - vm * va.sin();
    dr.hypot(di) / vm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_variance_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(NoiseModel::none().apply(1.02, -0.3, &mut rng), (1.02, -0.3));
    }

    #[test]
    fn gaussian_tve_percentile() {
        let model = NoiseModel::gaussian_tve(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t: Vec<f64> = (0..1_000_000)
            .map(|_| {
                let (m, a) = model.apply(1.0, 0.2, &mut rng);
                tve(1.0, 0.2, m, a)
            })
            .collect();
        t.sort_by(f64::total_cmp);
        let p997 = t[(0.997 * t.len() as f64) as usize];
        assert!((0.009..=0.011).contains(&p997), "{p997}");
    }

    #[test]
    fn gmm_component_moments() {
        let model = NoiseModel::gmm_tve_default();
        model.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // [channel][component] -> (n, sum, sum of squares)
        let mut acc = [[(0usize, 0.0, 0.0); 2]; 2];
        for _ in 0..1_000_000 {
            let e = model.draw(&mut rng);
            let m = e.mag * 100.0;
            let a = e.ang.to_degrees();
            let s = &mut acc[0][e.mag_component];
            *s = (s.0 + 1, s.1 + m, s.2 + m * m);
            let s = &mut acc[1][e.ang_component];
            *s = (s.0 + 1, s.1 + a, s.2 + a * a);
        }
        let expect = [
            [(-0.4, 0.25), (0.6, 0.25)],
            [(-0.2, 0.12), (0.3, 0.12)],
        ];
        let weights = [0.4, 0.6];
        for ch in 0..2 {
            for c in 0..2 {
                let (n, s, s2) = acc[ch][c];
                let mean = s / n as f64;
                let sd = (s2 / n as f64 - mean * mean).sqrt();
                let (m0, sd0) = expect[ch][c];
                assert!((mean - m0).abs() < 0.01 * m0.abs(), "mean {ch}/{c}: {mean}");
                assert!((sd - sd0).abs() < 0.01 * sd0, "sd {ch}/{c}: {sd}");
                let w = n as f64 / 1e6;
                assert!((w - weights[c]).abs() < 0.01 * weights[c]);
            }
        }
    }

    #[test]
    fn invalid_models_rejected() {
        let mut m = NoiseModel::gmm_tve_default();
        if let NoiseModel::GmmTve { weights, .. } = &mut m {
            weights[0] = 0.5;
        }
        assert!(m.validate().is_err());
    }
}
