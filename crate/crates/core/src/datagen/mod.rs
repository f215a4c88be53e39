//! Offline data pipeline: load distributions, operating-condition sampling,
//! PMU noise, mixture fitting and dataset files.

pub mod dataset;
pub mod em;
pub mod kde;
pub mod noise;
pub mod sampler;

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use dataset::{read_dataset, write_dataset, DatasetHeader, SnapshotDataset};
pub use em::{fit_gmm_em, EmFit, EmOptions, Mixture};
pub use kde::{fit_load_kde, BandwidthRule, LoadDistribution};
pub use noise::NoiseModel;
pub use sampler::{
    generate_snapshots, operating_grid, synthesize_history, Dependence, HistorySpec, LoadSampler,
    Snapshot,
};

use crate::grid::GridGraph;
use crate::powerflow::{PowerFlowError, PowerFlowOptions};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("load history has {got} points, at least {need} required")]
    InsufficientHistory { got: usize, need: usize },
    #[error("snapshot {snapshot}: power flow failed after {attempts} attempts: {source}")]
    NonConvergence {
        snapshot: usize,
        attempts: usize,
        source: PowerFlowError,
    },
    #[error("{got} samples, at least {need} required")]
    TooFewSamples { got: usize, need: usize },
    #[error("EM degenerated after {restarts} restarts")]
    DegenerateEm { restarts: usize },
    #[error("EM log-likelihood decreased at iteration {iteration}: {before} -> {after}")]
    EmNotMonotone {
        iteration: usize,
        before: f64,
        after: f64,
    },
    #[error("unknown PMU bus {0}")]
    UnknownBus(u32),
    #[error("{0}")]
    Invalid(String),
    #[error("dataset format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("dataset format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset grid hash {file} does not match grid {grid}")]
    HashMismatch { file: String, grid: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub count: usize,
    pub seed: u64,
    pub pmu_buses: Vec<u32>,
    pub noise: NoiseModel,
    pub history: HistorySpec,
    pub bandwidth: BandwidthRule,
    pub dependence: Dependence,
    pub power_flow: PowerFlowOptions,
    pub components: usize,
}

impl DatagenConfig {
    pub fn new(count: usize, seed: u64, pmu_buses: Vec<u32>) -> Self {
        Self {
            count,
            seed,
            pmu_buses,
            noise: NoiseModel::gaussian_tve(0.01),
            history: HistorySpec::default(),
            bandwidth: BandwidthRule::Silverman,
            dependence: Dependence::Copula,
            power_flow: PowerFlowOptions::default(),
            components: 3,
        }
    }
}

/// Stream offset separating measurement noise from load sampling.
const NOISE_SALT: u64 = 0x6e6f_6973_6500_0000;

/// Resolves PMU bus ids to bus positions.
pub fn pmu_positions(g: &GridGraph, pmu: &[u32]) -> Result<Vec<usize>, DataError> {
    pmu.iter()
        .map(|&id| g.bus_index(id).ok_or(DataError::UnknownBus(id)))
        .collect()
}

/// Noisy PMU measurements for every snapshot of `truth` (count·N·2 values).
pub fn measure(
    truth: &[f64],
    n: usize,
    positions: &[usize],
    noise: &NoiseModel,
    seed: u64,
) -> Vec<f64> {
    let count = truth.len() / (2 * n);
    let mut out = Vec::with_capacity(count * positions.len() * 2);
    for s in 0..count {
        measure_snapshot(&truth[s * n * 2..(s + 1) * n * 2], s, positions, noise, seed, &mut out);
    }
    out
}

/// Appends the measurements of one `N × 2` state, drawing from the noise
/// stream of snapshot `index`.
fn measure_snapshot(
    state: &[f64],
    index: usize,
    positions: &[usize],
    noise: &NoiseModel,
    seed: u64,
    out: &mut Vec<f64>,
) {
    let mut rng = sampler::snapshot_rng(seed ^ NOISE_SALT, index);
    for &i in positions {
        let (m, a) = noise.apply(state[2 * i], state[2 * i + 1], &mut rng);
        out.push(m);
        out.push(a);
    }
}

/// Runs the full pipeline: history, load model, power flows, noise.
pub fn build_dataset(g: &GridGraph, cfg: &DatagenConfig) -> Result<SnapshotDataset, DataError> {
    cfg.noise.validate()?;
    let positions = pmu_positions(g, &cfg.pmu_buses)?;
    let history = synthesize_history(g, &cfg.history);
    let sampler = LoadSampler::fit(&history, cfg.bandwidth, cfg.dependence)?;
    let snaps = generate_snapshots(g, &sampler, cfg.count, cfg.seed, &cfg.power_flow)?;
    from_snapshots(g, &snaps, &positions, cfg)
}

/// Assembles a dataset from solved snapshots.
pub fn from_snapshots(
    g: &GridGraph,
    snaps: &[Snapshot],
    positions: &[usize],
    cfg: &DatagenConfig,
) -> Result<SnapshotDataset, DataError> {
    let n = g.bus_count();
    let mut truth = Vec::with_capacity(snaps.len() * n * 2);
    let mut loads = Vec::with_capacity(snaps.len() * n);
    for s in snaps {
        for i in 0..n {
            truth.push(s.solution.vm[i]);
            truth.push(s.solution.va[i]);
        }
        loads.extend_from_slice(&s.pd);
    }
    let measured = measure(&truth, n, positions, &cfg.noise, cfg.seed);
    let header = DatasetHeader {
        format_version: dataset::DATASET_VERSION,
        grid_hash: g.hash(),
        grid_name: g.name().to_string(),
        bus_count: n,
        pmu_buses: positions.iter().map(|&i| g.buses()[i].id).collect(),
        pmu_positions: positions.to_vec(),
        noise: cfg.noise.clone(),
        seed: cfg.seed,
        count: snaps.len(),
        components: cfg.components,
    };
    SnapshotDataset::new(header, truth, measured, loads)
}

/// Re-draws the measurements of `ds` under another noise model.
pub fn remeasure(ds: &SnapshotDataset, noise: &NoiseModel, seed: u64) -> Result<SnapshotDataset, DataError> {
    noise.validate()?;
    let n = ds.bus_count();
    let truth: Vec<f64> = (0..ds.len()).flat_map(|s| ds.truth(s).into_vec()).collect();
    let measured = measure(&truth, n, ds.pmu_positions(), noise, seed);
    let mut out = ds.with_measurements(measured, noise.clone())?;
    out.header.seed = seed;
    Ok(out)
}

/// Re-solves every snapshot of `ds` on `g` at the same loads and measures
/// it with the noise draws of its original index. Snapshots whose power
/// flow fails are dropped; their indices are returned alongside.
pub fn resolve_on(
    ds: &SnapshotDataset,
    g: &GridGraph,
    pf: &PowerFlowOptions,
) -> Result<(SnapshotDataset, Vec<usize>), DataError> {
    use rayon::prelude::*;
    let n = ds.bus_count();
    if g.bus_count() != n {
        return Err(DataError::Invalid(format!("grid has {} buses, dataset {n}", g.bus_count())));
    }
    let solved: Vec<Option<crate::powerflow::PowerFlowSolution>> = (0..ds.len())
        .into_par_iter()
        .map(|s| crate::powerflow::solve(&operating_grid(g, ds.loads(s)), pf).ok())
        .collect();
    let (mut truth, mut measured, mut loads, mut failed) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let positions = ds.pmu_positions();
    for (s, sol) in solved.iter().enumerate() {
        let Some(sol) = sol else {
            failed.push(s);
            continue;
        };
        let state: Vec<f64> = (0..n).flat_map(|i| [sol.vm[i], sol.va[i]]).collect();
        measure_snapshot(&state, s, positions, &ds.header.noise, ds.header.seed, &mut measured);
        truth.extend(state);
        loads.extend_from_slice(ds.loads(s));
    }
    let mut header = ds.header.clone();
    header.count = ds.len() - failed.len();
    header.grid_hash = g.hash();
    Ok((SnapshotDataset::new(header, truth, measured, loads)?, failed))
}

/// `ds` measured at another set of PMU buses.
pub fn with_pmus(
    ds: &SnapshotDataset,
    g: &GridGraph,
    pmu_buses: &[u32],
    noise: &NoiseModel,
    seed: u64,
) -> Result<SnapshotDataset, DataError> {
    noise.validate()?;
    let positions = pmu_positions(g, pmu_buses)?;
    let n = ds.bus_count();
    let truth: Vec<f64> = (0..ds.len()).flat_map(|s| ds.truth(s).into_vec()).collect();
    let measured = measure(&truth, n, &positions, noise, seed);
    let loads: Vec<f64> = (0..ds.len()).flat_map(|s| ds.loads(s).to_vec()).collect();
    let mut header = ds.header.clone();
    header.pmu_buses = pmu_buses.to_vec();
    header.pmu_positions = positions;
    header.noise = noise.clone();
    header.seed = seed;
    SnapshotDataset::new(header, truth, measured, loads)
}

/// Deterministic shuffle of `0..n` used for dataset splits.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    idx
}
