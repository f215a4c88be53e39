//! Output-perturbation bound for topology changes, and contingency sweeps
//! that check it.
//!
//! Mapping of the network onto the bound's homogeneous layer stack:
//! `L` counts the first layer, each plain GCN layer, the attention (or
//! substitute GCN) layer and the head; `F` is the width entering the head.
//! `δ` is the largest absolute entry over the propagation-layer and head
//! weight matrices. `B = δ · max(‖Ã′‖₂, maxₖ ‖𝒜′ᵏ‖₂, 1)`, where `𝒜′ᵏ` are the
//! attention matrices under the perturbed topology and the head counts as
//! propagating through the identity.
//!
//! The bound covers the network between the fixed input scaling and the
//! inverse output scaling, so `λ` and the measured difference are taken in
//! scaled units.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::dataset::scatter_rows;
use crate::datagen::operating_grid;
use crate::gnn::{CgnnModel, ModelError};
use crate::grid::{adjacency_distance, build_adjacency, perturb_topology, AdjacencyPack, GridError, GridGraph};
use crate::numerics::linalg::spectral_norm;
use crate::numerics::Matrix;
use crate::powerflow::{solve, PowerFlowOptions};

#[derive(Debug, thiserror::Error)]
pub enum StabilityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("outage depth must be at least 1")]
    Depth,
    #[error("feature matrices are {0:?} and {1:?}")]
    Features((usize, usize), (usize, usize)),
    #[error("{0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    /// `Σ_g ‖x_{:g}‖₂` of the first-layer input.
    pub lambda: f64,
    pub delta: f64,
    /// `‖A − A′‖₂`.
    pub epsilon: f64,
    pub b: f64,
    /// `δ · ‖Ã′‖₂`.
    pub b_adjacency: f64,
    /// `δ · maxₖ ‖𝒜′ᵏ‖₂` (0 without attention).
    pub b_attention: f64,
    pub layers: usize,
    pub width: usize,
    pub bound: f64,
    /// `‖Φ − Φ′‖_F` of the head output before inverse scaling.
    pub measured: f64,
    pub violated: bool,
}

/// `√2 λ δ ε L B^(L−1) F^(L−2)`.
pub fn bound_value(lambda: f64, delta: f64, epsilon: f64, layers: usize, b: f64, width: usize) -> f64 {
    let l = layers as i32;
    2f64.sqrt() * lambda * delta * epsilon * layers as f64 * b.powi(l - 1) * (width as f64).powi(l - 2)
}

/// Certificate for one snapshot under two topologies. `x` and `x2` are
/// `N × 2` observed features (rows outside `mask` are ignored).
pub fn certificate(
    model: &CgnnModel,
    adj: &AdjacencyPack,
    adj2: &AdjacencyPack,
    x: &Matrix,
    x2: &Matrix,
    mask: &[bool],
) -> Result<StabilityCertificate, StabilityError> {
    if x.shape() != x2.shape() || x.rows() != model.arch.buses {
        return Err(StabilityError::Features(x.shape(), x2.shape()));
    }
    let t1 = model.trace(adj, x, mask)?;
    let t2 = model.trace(adj2, x2, mask)?;
    let measured = t1.core.sub(&t2.core).map_err(ModelError::from)?.frobenius_norm();
    let delta = model
        .weight_matrices()
        .iter()
        .map(|w| w.max_abs())
        .fold(0.0, f64::max);
    let epsilon = adjacency_distance(adj, adj2)?;
    let b_adjacency = delta * spectral_norm(&adj2.a_tilde);
    let b_attention = delta * t2.attention.iter().map(spectral_norm).fold(0.0, f64::max);
    let b = b_adjacency.max(b_attention).max(delta);
    let lambda: f64 = model.first_layer_input(x, mask).column_norms().iter().sum();
    let (layers, width) = (model.arch.depth(), model.arch.width());
    let bound = bound_value(lambda, delta, epsilon, layers, b, width);
    Ok(StabilityCertificate {
        lambda,
        delta,
        epsilon,
        b,
        b_adjacency,
        b_attention,
        layers,
        width,
        bound,
        measured,
        violated: measured > bound,
    })
}

/// Non-islanding outage sets of `k` in-service branches: every set for
/// `k = 1`, otherwise up to `cap` distinct seeded random sets.
pub fn enumerate_outages(g: &GridGraph, k: usize, cap: usize, seed: u64) -> Result<Vec<Vec<usize>>, StabilityError> {
    if k == 0 {
        return Err(StabilityError::Depth);
    }
    let live: Vec<usize> = (0..g.branches().len()).filter(|&i| g.branches()[i].in_service).collect();
    let ok = |set: &[usize]| perturb_topology(g, set).is_ok();
    if k == 1 {
        return Ok(live.iter().map(|&i| vec![i]).filter(|s| ok(s)).collect());
    }
    if k > live.len() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<usize>> = Vec::new();
    let attempts = 200 * cap.max(1);
    for _ in 0..attempts {
        if out.len() >= cap {
            break;
        }
        let mut set: Vec<usize> = sample(&mut rng, live.len(), k).into_iter().map(|i| live[i]).collect();
        set.sort_unstable();
        if !out.contains(&set) && ok(&set) {
            out.push(set);
        }
    }
    Ok(out)
}

/// One row of a contingency sweep: the certificate of the snapshot with
/// the largest measured/bound ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyRow {
    pub outage: String,
    pub k: usize,
    pub snapshot: usize,
    /// Snapshots whose perturbed power flow failed to converge.
    pub skipped: usize,
    pub lambda: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub b: f64,
    pub b_adjacency: f64,
    pub b_attention: f64,
    pub layers: usize,
    pub width: usize,
    pub bound: f64,
    pub measured: f64,
    pub violated: bool,
}

impl ContingencyRow {
    fn new(outage: String, k: usize, snapshot: usize, skipped: usize, c: &StabilityCertificate) -> Self {
        Self {
            outage,
            k,
            snapshot,
            skipped,
            lambda: c.lambda,
            delta: c.delta,
            epsilon: c.epsilon,
            b: c.b,
            b_adjacency: c.b_adjacency,
            b_attention: c.b_attention,
            layers: c.layers,
            width: c.width,
            bound: c.bound,
            measured: c.measured,
            violated: c.violated,
        }
    }
}

/// Noise-free PMU features of the state solved on `g` at loads `pd`.
fn pmu_features(g: &GridGraph, pd: &[f64], positions: &[usize], pf: &PowerFlowOptions) -> Option<Matrix> {
    let sol = solve(&operating_grid(g, pd), pf).ok()?;
    let vals = Matrix::from_fn(positions.len(), 2, |r, d| {
        let i = positions[r];
        if d == 0 {
            sol.vm[i]
        } else {
            sol.va[i]
        }
    });
    Some(scatter_rows(&vals, positions, g.bus_count()))
}

/// Certificates for the outage sets of depth `k` over the load draws
/// `loads`. Both feature matrices come from power flows at the same loads.
pub fn sweep_contingencies(
    model: &CgnnModel,
    g: &GridGraph,
    loads: &[Vec<f64>],
    positions: &[usize],
    outages: &[Vec<usize>],
) -> Result<Vec<ContingencyRow>, StabilityError> {
    let pf = PowerFlowOptions::default();
    let adj = build_adjacency(g);
    let mask = {
        let mut m = vec![false; g.bus_count()];
        for &i in positions {
            m[i] = true;
        }
        m
    };
    let base: Vec<Option<Matrix>> = loads.iter().map(|pd| pmu_features(g, pd, positions, &pf)).collect();
    outages
        .par_iter()
        .map(|set| {
            let g2 = perturb_topology(g, set)?;
            let adj2 = build_adjacency(&g2);
            let label = set.iter().map(|&b| g.branch_label(b)).collect::<Vec<_>>().join(";");
            let mut worst: Option<(usize, StabilityCertificate)> = None;
            let mut skipped = 0;
            for (s, pd) in loads.iter().enumerate() {
                let (Some(x), Some(x2)) = (&base[s], pmu_features(&g2, pd, positions, &pf)) else {
                    skipped += 1;
                    continue;
                };
                let c = certificate(model, &adj, &adj2, x, &x2, &mask)?;
                let ratio = |c: &StabilityCertificate| if c.bound > 0.0 { c.measured / c.bound } else { c.measured };
                if worst.as_ref().is_none_or(|(_, w)| ratio(&c) > ratio(w)) {
                    worst = Some((s, c));
                }
            }
            Ok(worst.map(|(s, c)| ContingencyRow::new(label, set.len(), s, skipped, &c)))
        })
        .collect::<Result<Vec<_>, StabilityError>>()
        .map(|rows| rows.into_iter().flatten().collect())
}

pub fn write_csv(path: &Path, rows: &[ContingencyRow]) -> Result<(), StabilityError> {
    let io = |e: csv::Error| StabilityError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| StabilityError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Architecture;
    use crate::grid::{cases, parse_case};

    const TRIANGLE: &str = "mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0 0 0 1 1 0 345 1 1.1 0.9;
 2 1 50 10 0 0 1 1 0 345 1 1.1 0.9;
 3 1 40 10 0 0 1 1 0 345 1 1.1 0.9;
];
mpc.gen = [
 1 0 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
 1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;
 2 3 0.01 0.1 0 0 0 0 0 0 1 -360 360;
 1 3 0.01 0.1 0 0 0 0 0 0 1 -360 360;
];
";

    fn model14(seed: u64) -> (GridGraph, CgnnModel) {
        let g = parse_case(cases::IEEE14).unwrap();
        let mut arch = Architecture::new(14);
        arch.hidden = 6;
        arch.heads = 2;
        let mut mask = vec![false; 14];
        for i in [3, 5, 8] {
            mask[i] = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = CgnnModel::init(arch, mask, &mut rng).unwrap();
        for c in 0..m.arch.components {
            m.first.means[c] = Matrix::from_fn(14, 2, |_, d| if d == 0 { 1.0 } else { -0.1 });
        }
        (g, m)
    }

    fn features(g: &GridGraph, m: &CgnnModel) -> Matrix {
        let pos: Vec<usize> = (0..14).filter(|&i| m.train_mask[i]).collect();
        let pd: Vec<f64> = g.buses().iter().map(|b| b.pd).collect();
        pmu_features(g, &pd, &pos, &PowerFlowOptions::default()).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let (g, m) = model14(1);
        let adj = build_adjacency(&g);
        let x = features(&g, &m);
        let c = certificate(&m, &adj, &adj, &x, &x, &m.train_mask).unwrap();
        assert_eq!((c.epsilon, c.bound, c.measured), (0.0, 0.0, 0.0));
        assert!(!c.violated);
        assert_eq!((c.layers, c.width), (3, 12));
    }

    #[test]
    fn zero_weights_give_zero() {
        let (g, mut m) = model14(2);
        for p in m.params_mut() {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        let adj = build_adjacency(&g);
        let g2 = perturb_topology(&g, &[g.find_branch(4, 5).unwrap()]).unwrap();
        let adj2 = build_adjacency(&g2);
        let x = features(&g, &m);
        let x2 = features(&g2, &m);
        let c = certificate(&m, &adj, &adj2, &x, &x2, &m.train_mask).unwrap();
        assert_eq!((c.delta, c.bound, c.measured), (0.0, 0.0, 0.0));
        assert_eq!(c.epsilon, 1.0);
    }

    #[test]
    fn bound_formula_is_linear_in_epsilon_and_delta() {
        let b0 = bound_value(2.0, 0.3, 1.0, 3, 0.4, 200);
        assert!((bound_value(2.0, 0.3, 2.5, 3, 0.4, 200) - 2.5 * b0).abs() < 1e-9 * b0);
        assert!((bound_value(2.0, 0.6, 1.0, 3, 0.4, 200) - 2.0 * b0).abs() < 1e-9 * b0);
        let direct = 2f64.sqrt() * 2.0 * 0.3 * 1.0 * 3.0 * 0.4f64.powi(2) * 200.0;
        assert!((b0 - direct).abs() < 1e-9 * b0);
    }

    #[test]
    fn triangle_has_three_single_outages() {
        let g = parse_case(TRIANGLE).unwrap();
        assert_eq!(enumerate_outages(&g, 1, 100, 0).unwrap().len(), 3);
        // Any two lines of a triangle isolate a bus.
        assert!(enumerate_outages(&g, 2, 10, 0).unwrap().is_empty());
        assert!(matches!(enumerate_outages(&g, 0, 10, 0), Err(StabilityError::Depth)));
    }

    #[test]
    fn n_minus_one_sweep_is_sound() {
        let (g, m) = model14(3);
        let outages = enumerate_outages(&g, 1, 0, 0).unwrap();
        // Bus 8 hangs off a single branch.
        assert_eq!(outages.len(), 19);
        let pd: Vec<f64> = g.buses().iter().map(|b| b.pd).collect();
        let loads = vec![pd.clone(), pd.iter().map(|p| p * 1.1).collect()];
        let pos = [3, 5, 8];
        let rows = sweep_contingencies(&m, &g, &loads, &pos, &outages).unwrap();
        assert_eq!(rows.len(), 19);
        for r in &rows {
            assert!(r.measured > 0.0 && r.measured <= r.bound, "{r:?}");
            assert!(!r.violated);
        }
        let dir = tempfile::tempdir().unwrap();
        write_csv(&dir.path().join("c.csv"), &rows).unwrap();
        let text = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
        assert_eq!(text.lines().count(), 20);
        assert!(text.starts_with("outage,k,snapshot,skipped,lambda,delta,epsilon,b,"));
    }

    #[test]
    fn deeper_sets_are_distinct_and_connected() {
        let g = parse_case(cases::IEEE14).unwrap();
        let sets = enumerate_outages(&g, 2, 25, 7).unwrap();
        assert_eq!(sets.len(), 25);
        for (i, s) in sets.iter().enumerate() {
            assert_eq!(s.len(), 2);
            assert!(perturb_topology(&g, s).is_ok());
            assert!(!sets[..i].contains(s));
        }
        assert_eq!(sets, enumerate_outages(&g, 2, 25, 7).unwrap());
    }
}
