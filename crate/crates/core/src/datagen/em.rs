//! Expectation–maximization for diagonal-covariance Gaussian mixtures.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Component weights, means and per-channel variances of one mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub weights: Vec<f64>,
    /// `means[c][d]`.
    pub means: Vec<Vec<f64>>,
    /// `variances[c][d]`.
    pub variances: Vec<Vec<f64>>,
}

impl Mixture {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Weighted mean over components.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (acc, x) in m.iter_mut().zip(mu) {
                *acc += w * x;
            }
        }
        m
    }

    /// Mean log-density of `samples`.
    pub fn log_likelihood(&self, samples: &[Vec<f64>]) -> f64 {
        let mut resp = vec![0.0; self.components()];
        samples.iter().map(|x| self.log_joint(x, &mut resp)).sum::<f64>() / samples.len() as f64
    }

    /// Fills `resp` with log(π_c N(x | c)) and returns their log-sum-exp.
    fn log_joint(&self, x: &[f64], resp: &mut [f64]) -> f64 {
        const LN_2PI: f64 = 1.837_877_066_409_345_5;
        for c in 0..self.components() {
            let mut l = self.weights[c].ln();
            for (d, xd) in x.iter().enumerate() {
                let v = self.variances[c][d];
                let diff = xd - self.means[c][d];
                l -= 0.5 * (LN_2PI + v.ln() + diff * diff / v);
            }
            resp[c] = l;
        }
        let max = resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + resp.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub components: usize,
    pub max_iter: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    /// Lower bound applied to every variance in the M-step.
    pub min_variance: f64,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            components: 3,
            max_iter: 500,
            tol: 1e-9,
            min_variance: 1e-8,
            seed: 0,
        }
    }
}

pub const MAX_RESTARTS: usize = 5;
/// Variance below which a component counts as collapsed.
pub const COLLAPSE_VARIANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct EmFit {
    pub mixture: Mixture,
    /// Mean log-likelihood after each iteration.
    pub trace: Vec<f64>,
    pub restarts: usize,
}

/// Fits a `C`-component diagonal mixture to `samples` (rows of equal length).
pub fn fit_gmm_em(samples: &[Vec<f64>], opts: &EmOptions) -> Result<EmFit, DataError> {
    let c = opts.components;
    if c == 0 {
        return Err(DataError::Invalid("at least one component required".into()));
    }
    if samples.len() < 10 * c {
        return Err(DataError::TooFewSamples {
            got: samples.len(),
            need: 10 * c,
        });
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim || s.iter().any(|x| !x.is_finite())) {
        return Err(DataError::Invalid("samples must be finite rows of equal length".into()));
    }
    for attempt in 0..=MAX_RESTARTS {
        let seed = opts.seed.wrapping_add(attempt as u64 * 0x9e37_79b9_7f4a_7c15);
        if let Some((mixture, trace)) = run(samples, opts, seed)? {
            return Ok(EmFit {
                mixture,
                trace,
                restarts: attempt,
            });
        }
        log::warn!("EM component collapsed; restarting (attempt {})", attempt + 1);
    }
    Err(DataError::DegenerateEm {
        restarts: MAX_RESTARTS,
    })
}

/// One EM run; `None` when a component degenerates.
fn run(
    samples: &[Vec<f64>],
    opts: &EmOptions,
    seed: u64,
) -> Result<Option<(Mixture, Vec<f64>)>, DataError> {
    let n = samples.len();
    let dim = samples[0].len();
    let c = opts.components;
    let floor = opts.min_variance;

    let mut overall_mean = vec![0.0; dim];
    for x in samples {
        for (m, v) in overall_mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let overall_var: Vec<f64> = (0..dim)
        .map(|d| {
            let v = samples.iter().map(|x| (x[d] - overall_mean[d]).powi(2)).sum::<f64>() / n as f64;
            v.max(floor)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, n, c);
    let mut mix = Mixture {
        weights: vec![1.0 / c as f64; c],
        means: picks.iter().map(|i| samples[i].clone()).collect(),
        variances: vec![overall_var; c],
    };

    let mut resp = vec![0.0; n * c];
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..opts.max_iter {
        // E-step.
        let mut ll = 0.0;
        for (i, x) in samples.iter().enumerate() {
            let r = &mut resp[i * c..(i + 1) * c];
            let lse = mix.log_joint(x, r);
            ll += lse;
            for v in r.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        ll /= n as f64;
        if ll < prev - 1e-10 * prev.abs().max(1.0) {
            return Err(DataError::EmNotMonotone {
                iteration: trace.len(),
                before: prev,
                after: ll,
            });
        }
        if trace.len() > 0 && ll - prev < opts.tol {
            trace.push(ll);
            break;
        }
        trace.push(ll);
        prev = ll;

        // M-step.
        for k in 0..c {
            let nk: f64 = (0..n).map(|i| resp[i * c + k]).sum();
            if nk < 1e-8 * n as f64 {
                return Ok(None);
            }
            mix.weights[k] = nk / n as f64;
            for d in 0..dim {
                let mean = (0..n).map(|i| resp[i * c + k] * samples[i][d]).sum::<f64>() / nk;
                let var = (0..n)
                    .map(|i| resp[i * c + k] * (samples[i][d] - mean).powi(2))
                    .sum::<f64>()
                    / nk;
                mix.means[k][d] = mean;
                mix.variances[k][d] = var.max(floor);
            }
        }
        if mix.variances.iter().flatten().any(|&v| v < COLLAPSE_VARIANCE) {
            return Ok(None);
        }
    }
    // Guarantee the weights sum to one exactly up to rounding.
    let total: f64 = mix.weights.iter().sum();
    for w in &mut mix.weights {
        *w /= total;
    }
    let final_ll = mix.log_likelihood(samples);
    if let Some(last) = trace.last() {
        if final_ll < last - 1e-10 * last.abs().max(1.0) {
            return Err(DataError::EmNotMonotone {
                iteration: trace.len(),
                before: *last,
                after: final_ll,
            });
        }
    }
    trace.push(final_ll);
    Ok(Some((mix, trace)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(0.9..1.1), rng.random_range(-0.5..0.0)])
            .collect();
        let fit = fit_gmm_em(
            &samples,
            &EmOptions {
                components: 1,
                ..Default::default()
            },
        )
        .unwrap();
        for d in 0..2 {
            let mean = samples.iter().map(|x| x[d]).sum::<f64>() / 200.0;
            let var = samples.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / 200.0;
            assert!((fit.mixture.means[0][d] - mean).abs() < 1e-12);
            assert!((fit.mixture.variances[0][d] - var).abs() < 1e-12);
        }
        assert_eq!(fit.mixture.weights, vec![1.0]);
    }

    #[test]
    fn recovers_two_component_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (Normal::new(0.0, 1.0).unwrap(), Normal::new(5.0, 1.0).unwrap());
        let samples: Vec<Vec<f64>> = (0..100_000)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    vec![a.sample(&mut rng)]
                } else {
                    vec![b.sample(&mut rng)]
                }
            })
            .collect();
        let fit = fit_gmm_em(
            &samples,
            &EmOptions {
                components: 2,
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let m = &fit.mixture;
        let (lo, hi) = if m.means[0][0] < m.means[1][0] { (0, 1) } else { (1, 0) };
        // 2% relative; absolute slack 0.02σ where the true value is 0.
        let close = |got: f64, want: f64| (got - want).abs() <= (0.02 * want.abs()).max(0.02);
        assert!(close(m.weights[lo], 0.3) && close(m.weights[hi], 0.7), "{m:?}");
        assert!(close(m.means[lo][0], 0.0) && close(m.means[hi][0], 5.0), "{m:?}");
        assert!(close(m.variances[lo][0].sqrt(), 1.0) && close(m.variances[hi][0].sqrt(), 1.0));
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn constant_channel_uses_floor() {
        let samples: Vec<Vec<f64>> = (0..60).map(|i| vec![1.045, -0.1 - 0.001 * i as f64]).collect();
        let fit = fit_gmm_em(&samples, &EmOptions::default()).unwrap();
        for v in &fit.mixture.variances {
            assert_eq!(v[0], 1e-8);
        }
        assert!((fit.mixture.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let samples = vec![vec![1.0]; 19];
        assert!(matches!(
            fit_gmm_em(
                &samples,
                &EmOptions {
                    components: 2,
                    ..Default::default()
                }
            ),
            Err(DataError::TooFewSamples { got: 19, need: 20 })
        ));
    }
}
