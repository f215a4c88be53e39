//! Operating-condition sampling: synthetic load histories, per-load KDEs
//! joined by a one-factor Gaussian copula, and power-flow solution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kde::{fit_load_kde, BandwidthRule, LoadDistribution};
use super::DataError;
use crate::grid::GridGraph;
use crate::numerics::special::{normal_cdf, normal_tail_inv};
use crate::powerflow::{solve, PowerFlowOptions, PowerFlowSolution};

/// Parameters of the synthetic per-load SCADA history.
///
/// Each load follows `nominal · s_t · (1 + e_t)` where `s_t` is a system
/// profile shared by all loads (daily cycle plus common noise) and `e_t`
/// is load-specific noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistorySpec {
    pub points: usize,
    pub daily_amplitude: f64,
    pub common_sd: f64,
    pub idiosyncratic_sd: f64,
    pub seed: u64,
}

impl Default for HistorySpec {
    fn default() -> Self {
        Self {
            points: 720,
            daily_amplitude: 0.15,
            common_sd: 0.05,
            idiosyncratic_sd: 0.05,
            seed: 0x5cada,
        }
    }
}

/// Synthetic history for every bus with non-zero nominal active load,
/// as `(bus position, series in MW)`.
pub fn synthesize_history(g: &GridGraph, spec: &HistorySpec) -> Vec<(usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let profile: Vec<f64> = (0..spec.points)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * (t % 24) as f64 / 24.0;
            let z: f64 = StandardNormal.sample(&mut rng);
            1.0 - spec.daily_amplitude * phase.cos() + spec.common_sd * z
        })
        .collect();
    g.buses()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.pd != 0.0)
        .map(|(i, b)| {
            let series = profile
                .iter()
                .map(|s| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    b.pd * s * (1.0 + spec.idiosyncratic_sd * e)
                })
                .collect();
            (i, series)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dependence {
    /// Loads drawn independently of each other.
    Independent,
    /// Equicorrelated Gaussian copula estimated from the history.
    Copula,
}

/// Joint sampler of active loads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSampler {
    /// Bus positions of the sampled loads.
    pub buses: Vec<usize>,
    pub dists: Vec<LoadDistribution>,
    /// Copula correlation (0 for independent sampling).
    pub rho: f64,
}

/// Normal scores `Φ⁻¹(rank / (n + 1))` of a series.
fn normal_scores(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut z = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        let p = (rank + 1) as f64 / (n + 1) as f64;
        z[i] = -normal_tail_inv(p);
    }
    z
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

impl LoadSampler {
    pub fn fit(
        history: &[(usize, Vec<f64>)],
        rule: BandwidthRule,
        dependence: Dependence,
    ) -> Result<Self, DataError> {
        let dists = history
            .iter()
            .map(|(_, h)| fit_load_kde(h, rule))
            .collect::<Result<Vec<_>, _>>()?;
        let rho = match dependence {
            Dependence::Independent => 0.0,
            Dependence::Copula if history.len() < 2 => 0.0,
            Dependence::Copula => {
                let scores: Vec<Vec<f64>> = history.iter().map(|(_, h)| normal_scores(h)).collect();
                let mut total = 0.0;
                let mut pairs = 0;
                for i in 0..scores.len() {
                    for j in i + 1..scores.len() {
                        total += correlation(&scores[i], &scores[j]);
                        pairs += 1;
                    }
                }
                (total / pairs as f64).clamp(0.0, 0.999)
            }
        };
        Ok(Self {
            buses: history.iter().map(|(i, _)| *i).collect(),
            dists,
            rho,
        })
    }

    /// Point masses at the nominal loads of `g`.
    pub fn nominal(g: &GridGraph) -> Self {
        let (buses, dists) = g
            .buses()
            .iter()
            .enumerate()
            .filter(|(_, b)| b.pd != 0.0)
            .map(|(i, b)| (i, LoadDistribution::point_mass(b.pd)))
            .unzip();
        Self {
            buses,
            dists,
            rho: 0.0,
        }
    }

    /// Active load per bus (MW); buses without a distribution keep their
    /// nominal value.
    pub fn sample<R: Rng + ?Sized>(&self, g: &GridGraph, rng: &mut R) -> Vec<f64> {
        let mut pd: Vec<f64> = g.buses().iter().map(|b| b.pd).collect();
        let z0: f64 = StandardNormal.sample(rng);
        let (a, b) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        for (&bus, dist) in self.buses.iter().zip(&self.dists) {
            let e: f64 = StandardNormal.sample(rng);
            pd[bus] = dist.quantile(normal_cdf(a * z0 + b * e));
        }
        pd
    }
}

/// Grid at the operating point with active loads `pd` (MW).
///
/// Reactive loads keep each bus's nominal power factor; generator outputs
/// (other than the slack) scale with total active load.
pub fn operating_grid(base: &GridGraph, pd: &[f64]) -> GridGraph {
    let qd: Vec<f64> = base
        .buses()
        .iter()
        .zip(pd)
        .map(|(b, p)| if b.pd != 0.0 && *p != b.pd { b.qd * p / b.pd } else { b.qd })
        .collect();
    let nominal: f64 = base.buses().iter().map(|b| b.pd).sum();
    let total: f64 = pd.iter().sum();
    let ratio = if nominal != 0.0 { total / nominal } else { 1.0 };
    let slack_id = base.buses()[base.slack()].id;
    let pg: Vec<f64> = base
        .generators()
        .iter()
        .map(|gen| if gen.bus == slack_id { gen.pg } else { gen.pg * ratio })
        .collect();
    base.with_loads(pd, &qd).with_generation(&pg)
}

/// One solved operating condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Active load per bus (MW).
    pub pd: Vec<f64>,
    pub solution: PowerFlowSolution,
}

/// Retries per snapshot after a failed power flow.
pub const MAX_RETRIES: usize = 10;

/// RNG for snapshot `index` of a run seeded with `seed`.
pub fn snapshot_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Samples and solves `count` operating conditions. Each snapshot draws
/// from its own RNG stream, so the result does not depend on scheduling.
pub fn generate_snapshots(
    g: &GridGraph,
    sampler: &LoadSampler,
    count: usize,
    seed: u64,
    pf: &PowerFlowOptions,
) -> Result<Vec<Snapshot>, DataError> {
    (0..count)
        .into_par_iter()
        .map(|index| {
            let mut rng = snapshot_rng(seed, index);
            let mut last = None;
            for attempt in 0..=MAX_RETRIES {
                let pd = sampler.sample(g, &mut rng);
                match solve(&operating_grid(g, &pd), pf) {
                    Ok(solution) => return Ok(Snapshot { pd, solution }),
                    Err(e) => {
                        log::warn!("snapshot {index}: attempt {} failed: {e}", attempt + 1);
                        last = Some(e);
                    }
                }
            }
            Err(DataError::NonConvergence {
                snapshot: index,
                attempts: MAX_RETRIES + 1,
                source: last.expect("at least one attempt"),
            })
        })
        .collect()
}
