//! Experiment drivers. Each study returns tables of metric rows; the
//! report writer turns every table into `<name>.csv` and `<name>.svg` next
//! to `report.json`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{metrics, plot, EvalError, MetricSet};
use crate::bddc::{fit_stats, screen, ChannelStats};
use crate::datagen::sampler::snapshot_rng;
use crate::datagen::{remeasure, resolve_on, with_pmus, NoiseModel, SnapshotDataset};
use crate::gnn::{Architecture, CgnnModel};
use crate::grid::{build_adjacency, perturb_topology, AdjacencyPack, GridGraph};
use crate::powerflow::{branch_flows, solve, PowerFlowOptions};
use crate::train::{all_truth, fit_split, init_model, predict_dataset, split, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Baseline,
    Topology,
    PmuFailure,
    Combined,
    Noise,
    BadData,
    AttentionAblation,
    HeadSweep,
    PmuSetSweep,
}

impl StudyKind {
    pub const ALL: [StudyKind; 9] = [
        Self::Baseline,
        Self::Topology,
        Self::PmuFailure,
        Self::Combined,
        Self::Noise,
        Self::BadData,
        Self::AttentionAblation,
        Self::HeadSweep,
        Self::PmuSetSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Topology => "topology",
            Self::PmuFailure => "pmu_failure",
            Self::Combined => "combined",
            Self::Noise => "noise",
            Self::BadData => "bad_data",
            Self::AttentionAblation => "attention_ablation",
            Self::HeadSweep => "head_sweep",
            Self::PmuSetSweep => "pmu_set_sweep",
        }
    }

    /// Whether the study evaluates a given trained model (the others train
    /// their own).
    pub fn needs_model(self) -> bool {
        matches!(
            self,
            Self::Baseline | Self::Topology | Self::PmuFailure | Self::Combined | Self::BadData
        )
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        let key = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| EvalError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub seed: u64,
    /// Highest-flow single-line outages (topology, combined).
    pub outages: usize,
    /// Largest number of simultaneous PMU failures; all PMUs when unset.
    pub max_failures: Option<usize>,
    /// Failure subsets per size before switching to seeded sampling.
    pub failure_cap: usize,
    /// Wald false-positive rate.
    pub alpha: f64,
    pub bad_fractions: Vec<f64>,
    /// Outlier offsets are drawn from `±U(lo, hi)·σ₀`.
    pub bad_sigma: (f64, f64),
    pub bad_seeds: usize,
    pub heads: Vec<usize>,
    /// Extra PMU sets (bus ids) for the set sweep.
    pub pmu_sets: Vec<Vec<u32>>,
    /// Random PMU sets of the dataset's size added to the set sweep.
    pub random_pmu_sets: usize,
    pub components: usize,
    /// Template for trained models; the bus count is taken from the data.
    pub arch: Architecture,
    pub train: TrainConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            outages: 5,
            max_failures: None,
            failure_cap: 50,
            alpha: 0.01,
            bad_fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            bad_sigma: (5.0, 20.0),
            bad_seeds: 3,
            heads: vec![1, 2, 4],
            pmu_sets: Vec::new(),
            random_pmu_sets: 2,
            components: 3,
            arch: Architecture::new(0),
            train: TrainConfig::default(),
        }
    }
}

/// Inputs shared by every study.
pub struct StudyData<'a> {
    pub grid: &'a GridGraph,
    /// Pool split into training and validation sets when a study trains.
    pub train: &'a SnapshotDataset,
    pub test: &'a SnapshotDataset,
    pub model: Option<&'a CgnnModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scenario: String,
    pub series: String,
    pub x: Option<f64>,
    pub mape: f64,
    pub mae_deg: f64,
    pub sigma_y2: f64,
    /// Snapshots per evaluated case.
    pub snapshots: usize,
    /// Cases averaged into the row.
    pub cases: usize,
    pub note: String,
}

impl StudyRow {
    fn new(scenario: impl Into<String>, series: &str, m: &MetricSet, snapshots: usize) -> Self {
        Self {
            scenario: scenario.into(),
            series: series.to_string(),
            x: None,
            mape: m.mape,
            mae_deg: m.mae_deg,
            sigma_y2: m.sigma_y2,
            snapshots,
            cases: 1,
            note: String::new(),
        }
    }

    fn at(mut self, x: f64) -> Self {
        self.x = Some(x);
        self
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn metrics(&self) -> MetricSet {
        MetricSet {
            mape: self.mape,
            mae_deg: self.mae_deg,
            sigma_y2: self.sigma_y2,
            latency_ms: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub name: String,
    pub x_label: Option<String>,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            x_label: None,
            rows: Vec::new(),
        }
    }

    pub fn row(&self, scenario: &str, series: &str) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.series == series)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub kind: StudyKind,
    pub grid: String,
    pub pmu_buses: Vec<u32>,
    pub test_snapshots: usize,
    pub config: StudyConfig,
    pub tables: Vec<StudyTable>,
    /// Median single-snapshot inference time of the evaluated model.
    pub latency_ms: Option<f64>,
    pub training: Vec<(String, TrainReport)>,
    pub notes: Vec<String>,
    /// Files written next to `report.json`.
    pub files: Vec<String>,
}

impl StudyReport {
    pub fn table(&self, name: &str) -> Option<&StudyTable> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Metrics of `model` on every snapshot of `ds`, with `mask` marking the
/// PMUs that report.
pub fn evaluate(
    model: &CgnnModel,
    adj: &AdjacencyPack,
    ds: &SnapshotDataset,
    mask: &[bool],
) -> Result<MetricSet, EvalError> {
    let pred = predict_dataset(model, adj, ds, mask)?;
    metrics(&pred, &all_truth(ds), ds.bus_count())
}

/// Metrics of the predictor that outputs per-bus training means.
pub fn climatology(train: &SnapshotDataset, test: &SnapshotDataset) -> Result<MetricSet, EvalError> {
    let n = train.bus_count();
    let mut mean = crate::numerics::Matrix::zeros(n, 2);
    for s in 0..train.len() {
        mean.add_assign(&train.truth(s));
    }
    let mean = mean.scale(1.0 / train.len() as f64);
    let truth = all_truth(test);
    let pred = crate::numerics::Matrix::from_fn(truth.rows(), 2, |r, d| mean[(r % n, d)]);
    metrics(&pred, &truth, n)
}

/// Median wall time (ms) of single-snapshot predictions over the first
/// `calls` snapshots of `ds` (cycled).
pub fn measure_latency(
    model: &CgnnModel,
    adj: &AdjacencyPack,
    ds: &SnapshotDataset,
    calls: usize,
) -> Result<f64, EvalError> {
    let mask = ds.mask();
    let mut times = Vec::with_capacity(calls);
    for k in 0..calls.max(1) {
        let x = ds.observed(k % ds.len());
        let t0 = Instant::now();
        model.predict(adj, &x, &mask)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Splits `pool`, initializes from the training part and trains.
pub fn train_model(
    pool: &SnapshotDataset,
    adj: &AdjacencyPack,
    arch: Architecture,
    components: usize,
    cfg: &TrainConfig,
) -> Result<(CgnnModel, TrainReport), EvalError> {
    let (train, val) = split(pool, cfg.validation_fraction, cfg.seed);
    let model = init_model(&train, arch, components, cfg.seed)?;
    Ok(fit_split(model, adj, &train, &val, cfg, &mut |_, _, _| {})?)
}

/// Up to `count` in-service, non-islanding branches in descending order of
/// base-case apparent power at the from-end.
pub fn ranked_outages(g: &GridGraph, count: usize) -> Result<Vec<usize>, EvalError> {
    let sol = solve(g, &PowerFlowOptions::default())?;
    let flows = branch_flows(g, &sol)?;
    let mut order: Vec<usize> = (0..flows.len()).filter(|&k| g.branches()[k].in_service).collect();
    order.sort_by(|&a, &b| flows[b].total_cmp(&flows[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .filter(|&k| perturb_topology(g, &[k]).is_ok())
        .take(count)
        .collect())
}

/// Subsets of `r` indices out of `n`: all of them when there are at most
/// `cap`, otherwise `cap` distinct seeded draws.
pub fn failure_subsets(n: usize, r: usize, cap: usize, seed: u64) -> Vec<Vec<usize>> {
    if r > n {
        return Vec::new();
    }
    let total = binomial(n, r);
    if total <= cap as f64 {
        let mut out = Vec::new();
        let mut cur = Vec::with_capacity(r);
        combinations(n, r, 0, &mut cur, &mut out);
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ r as u64);
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(cap);
    while out.len() < cap {
        let mut s = sample(&mut rng, n, r).into_vec();
        s.sort_unstable();
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn binomial(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn combinations(n: usize, r: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == r {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        combinations(n, r, i + 1, cur, out);
        cur.pop();
    }
}

/// Adds `±U(lo, hi)·σ₀` to a `fraction` of the measurement channels of
/// every snapshot, chosen afresh per snapshot.
pub fn corrupt(
    ds: &SnapshotDataset,
    stats: &ChannelStats,
    fraction: f64,
    sigma: (f64, f64),
    seed: u64,
) -> Result<SnapshotDataset, EvalError> {
    if !(0.0..=1.0).contains(&fraction) || !(sigma.0 >= 0.0 && sigma.1 >= sigma.0) {
        return Err(EvalError::Config(format!("bad corruption {fraction} at {sigma:?}")));
    }
    let channels = stats.channels();
    let k = (fraction * channels as f64).round() as usize;
    let mut measured = Vec::with_capacity(ds.len() * channels);
    for s in 0..ds.len() {
        let mut z = ds.measured(s).into_vec();
        let mut rng = snapshot_rng(seed, s);
        for c in sample(&mut rng, channels, k).into_iter() {
            let mag = if sigma.1 > sigma.0 {
                rng.random_range(sigma.0..sigma.1)
            } else {
                sigma.0
            };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            z[c] += sign * mag * stats.std[c];
        }
        measured.extend(z);
    }
    Ok(ds.with_measurements(measured, ds.header.noise.clone())?)
}

/// Screens every snapshot; returns the corrected dataset and the number
/// of flagged channels.
pub fn screen_dataset(
    ds: &SnapshotDataset,
    stats: &ChannelStats,
    alpha: f64,
) -> Result<(SnapshotDataset, usize), EvalError> {
    let mut measured = Vec::with_capacity(ds.len() * stats.channels());
    let mut flagged = 0;
    for s in 0..ds.len() {
        let (z, rep) = screen(&ds.measured(s).into_vec(), stats, alpha)?;
        flagged += rep.flagged();
        measured.extend(z);
    }
    Ok((ds.with_measurements(measured, ds.header.noise.clone())?, flagged))
}

fn mean_metrics(sets: &[MetricSet]) -> MetricSet {
    let k = sets.len().max(1) as f64;
    MetricSet {
        mape: sets.iter().map(|m| m.mape).sum::<f64>() / k,
        mae_deg: sets.iter().map(|m| m.mae_deg).sum::<f64>() / k,
        sigma_y2: sets.iter().map(|m| m.sigma_y2).sum::<f64>() / k,
        latency_ms: None,
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

struct Ctx<'a> {
    data: &'a StudyData<'a>,
    cfg: &'a StudyConfig,
    adj: AdjacencyPack,
    report: StudyReport,
}

impl Ctx<'_> {
    fn model(&self) -> Result<&CgnnModel, EvalError> {
        self.data
            .model
            .ok_or_else(|| EvalError::MissingModel(self.report.kind.to_string()))
    }

    fn arch(&self) -> Architecture {
        let mut a = self.cfg.arch.clone();
        a.buses = self.data.grid.bus_count();
        a
    }

    fn train(&mut self, label: &str, pool: &SnapshotDataset, arch: Architecture) -> Result<CgnnModel, EvalError> {
        log::info!("study {}: training {label}", self.report.kind);
        let (m, rep) = train_model(pool, &self.adj, arch, self.cfg.components, &self.cfg.train)?;
        self.report.training.push((label.to_string(), rep));
        Ok(m)
    }

    fn pmu_label(&self, position: usize) -> String {
        format!("PMU {}", self.data.grid.buses()[position].id)
    }
}

/// Runs one study. Studies that evaluate a fixed model need
/// `data.model`; the others train their own models on `data.train`.
pub fn run_study(kind: StudyKind, data: &StudyData<'_>, cfg: &StudyConfig) -> Result<StudyReport, EvalError> {
    if data.test.is_empty() || data.train.is_empty() {
        return Err(EvalError::Config("empty dataset".into()));
    }
    for ds in [data.train, data.test] {
        ds.check_grid(data.grid)?;
    }
    let mut ctx = Ctx {
        data,
        cfg,
        adj: build_adjacency(data.grid),
        report: StudyReport {
            kind,
            grid: data.grid.name().to_string(),
            pmu_buses: data.test.header.pmu_buses.clone(),
            test_snapshots: data.test.len(),
            config: cfg.clone(),
            tables: Vec::new(),
            latency_ms: None,
            training: Vec::new(),
            notes: Vec::new(),
            files: Vec::new(),
        },
    };
    match kind {
        StudyKind::Baseline => baseline(&mut ctx)?,
        StudyKind::Topology => topology(&mut ctx)?,
        StudyKind::PmuFailure => pmu_failure(&mut ctx)?,
        StudyKind::Combined => combined(&mut ctx)?,
        StudyKind::Noise => noise(&mut ctx)?,
        StudyKind::BadData => bad_data(&mut ctx)?,
        StudyKind::AttentionAblation => attention_ablation(&mut ctx)?,
        StudyKind::HeadSweep => head_sweep(&mut ctx)?,
        StudyKind::PmuSetSweep => pmu_set_sweep(&mut ctx)?,
    }
    Ok(ctx.report)
}

fn baseline(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    let model = ctx.model()?;
    let test = ctx.data.test;
    let mut t = StudyTable::new("baseline");
    let m = evaluate(model, &ctx.adj, test, &test.mask())?;
    t.rows.push(StudyRow::new("CGNN-SE", "estimate", &m, test.len()));
    let c = climatology(ctx.data.train, test)?;
    t.rows.push(StudyRow::new("climatology", "estimate", &c, test.len()));
    ctx.report.latency_ms = Some(measure_latency(model, &ctx.adj, test, test.len().min(200))?);
    ctx.report.tables.push(t);
    Ok(())
}

/// Test data re-solved on the grid without branches `set`.
fn outage_case(
    ctx: &Ctx<'_>,
    set: &[usize],
) -> Result<(AdjacencyPack, SnapshotDataset, usize), EvalError> {
    let g2 = perturb_topology(ctx.data.grid, set)?;
    let (ds, failed) = resolve_on(ctx.data.test, &g2, &PowerFlowOptions::default())?;
    if ds.is_empty() {
        return Err(EvalError::Config("no snapshot converged after the outage".into()));
    }
    Ok((build_adjacency(&g2), ds, failed.len()))
}

fn topology(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    let model = ctx.model()?;
    let test = ctx.data.test;
    let mask = test.mask();
    let mut t = StudyTable::new("topology");
    let base = evaluate(model, &ctx.adj, test, &mask)?;
    t.rows.push(StudyRow::new("Base", "CGNN-SE", &base, test.len()));
    for k in ranked_outages(ctx.data.grid, ctx.cfg.outages)? {
        let (adj2, ds, failed) = outage_case(ctx, &[k])?;
        let m = evaluate(model, &adj2, &ds, &mask)?;
        let mut row = StudyRow::new(ctx.data.grid.branch_label(k), "CGNN-SE", &m, ds.len());
        if failed > 0 {
            row = row.note(format!("{failed} snapshots without power-flow solution"));
        }
        t.rows.push(row);
    }
    ctx.report.tables.push(t);
    Ok(())
}

fn failed_mask(mask: &[bool], positions: &[usize], failed: &[usize]) -> Vec<bool> {
    let mut m = mask.to_vec();
    for &f in failed {
        m[positions[f]] = false;
    }
    m
}

fn pmu_failure(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    let model = ctx.model()?;
    let test = ctx.data.test;
    let (mask, positions) = (test.mask(), test.pmu_positions().to_vec());
    let p = positions.len();
    let max_r = ctx.cfg.max_failures.unwrap_or(p).min(p);
    let mut avg = StudyTable::new("pmu_failure");
    avg.x_label = Some("failed PMUs".into());
    let mut cases = StudyTable::new("pmu_failure_cases");
    for r in 0..=max_r {
        let subsets = failure_subsets(p, r, ctx.cfg.failure_cap, ctx.cfg.seed);
        let mut sets = Vec::with_capacity(subsets.len());
        for s in &subsets {
            let m = evaluate(model, &ctx.adj, test, &failed_mask(&mask, &positions, s))?;
            let label = if s.is_empty() {
                "none".to_string()
            } else {
                s.iter().map(|&f| ctx.pmu_label(positions[f])).collect::<Vec<_>>().join(" + ")
            };
            cases.rows.push(StudyRow::new(label, "CGNN-SE", &m, test.len()).at(r as f64));
            sets.push(m);
        }
        let mut row = StudyRow::new(format!("{r} failed"), "CGNN-SE", &mean_metrics(&sets), test.len()).at(r as f64);
        row.cases = sets.len();
        avg.rows.push(row);
    }
    ctx.report.tables.extend([avg, cases]);
    Ok(())
}

fn combined(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    let model = ctx.model()?;
    let test = ctx.data.test;
    let (mask, positions) = (test.mask(), test.pmu_positions().to_vec());
    let mut t = StudyTable::new("combined");
    let base = evaluate(model, &ctx.adj, test, &mask)?;
    t.rows.push(StudyRow::new("Base", "CGNN-SE", &base, test.len()));
    for k in ranked_outages(ctx.data.grid, ctx.cfg.outages)? {
        let (adj2, ds, _) = outage_case(ctx, &[k])?;
        for (f, &pos) in positions.iter().enumerate() {
            let m = evaluate(model, &adj2, &ds, &failed_mask(&mask, &positions, &[f]))?;
            let label = format!("({}) {}", ctx.data.grid.branch_label(k), ctx.pmu_label(pos));
            t.rows.push(StudyRow::new(label, "CGNN-SE", &m, ds.len()));
        }
    }
    ctx.report.tables.push(t);
    Ok(())
}

fn noise(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    let (train, test) = (ctx.data.train, ctx.data.test);
    let mut t = StudyTable::new("noise");
    for (label, model) in [
        ("gaussian", NoiseModel::gaussian_tve(0.01)),
        ("non-gaussian", NoiseModel::gmm_tve_default()),
    ] {
        let tr = remeasure(train, &model, train.header.seed)?;
        let te = remeasure(test, &model, test.header.seed)?;
        let m = ctx.train(label, &tr, ctx.arch())?;
        let met = evaluate(&m, &ctx.adj, &te, &te.mask())?;
        t.rows.push(StudyRow::new(label, "CGNN-SE", &met, te.len()));
    }
    ctx.report.tables.push(t);
    Ok(())
}

fn bad_data(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    let model = ctx.model()?;
    let test = ctx.data.test;
    let mask = test.mask();
    let stats = fit_stats(ctx.data.train)?;
    let mut t = StudyTable::new("bad_data");
    t.x_label = Some("corrupted fraction".into());
    let mut fractions = vec![0.0];
    fractions.extend(ctx.cfg.bad_fractions.iter().copied().filter(|&f| f > 0.0));
    let mut raw_mape = Vec::new();
    for &f in &fractions {
        let (mut raw, mut fixed, mut flags) = (Vec::new(), Vec::new(), 0usize);
        for k in 0..ctx.cfg.bad_seeds.max(1) {
            let seed = ctx.cfg.seed.wrapping_add(1000 * k as u64 + 1);
            let bad = corrupt(test, &stats, f, ctx.cfg.bad_sigma, seed)?;
            raw.push(evaluate(model, &ctx.adj, &bad, &mask)?);
            let (clean, n) = screen_dataset(&bad, &stats, ctx.cfg.alpha)?;
            flags += n;
            fixed.push(evaluate(model, &ctx.adj, &clean, &mask)?);
        }
        let seeds = raw.len();
        let rate = flags as f64 / (seeds * test.len() * stats.channels()) as f64;
        let (r, s) = (mean_metrics(&raw), mean_metrics(&fixed));
        if f > 0.0 {
            raw_mape.push(r.mape);
        }
        let mut a = StudyRow::new(format!("{:.0}%", 100.0 * f), "unscreened", &r, test.len()).at(f);
        let mut b = StudyRow::new(format!("{:.0}%", 100.0 * f), "screened", &s, test.len())
            .at(f)
            .note(format!("flag rate {rate:.4}"));
        a.cases = seeds;
        b.cases = seeds;
        t.rows.extend([a, b]);
    }
    let grid: Vec<f64> = fractions.iter().copied().filter(|&f| f > 0.0).collect();
    if grid.len() > 1 {
        ctx.report.notes.push(format!(
            "rank correlation of unscreened MAPE with corrupted fraction: {:.3}",
            rank_correlation(&grid, &raw_mape)
        ));
    }
    ctx.report.tables.push(t);
    Ok(())
}

fn attention_ablation(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    let test = ctx.data.test;
    let mut t = StudyTable::new("attention_ablation");
    for attention in [true, false] {
        let mut arch = ctx.arch();
        arch.attention = attention;
        let label = if attention { "with MH-GAT" } else { "without MH-GAT" };
        let m = ctx.train(label, ctx.data.train, arch)?;
        let met = evaluate(&m, &ctx.adj, test, &test.mask())?;
        let note = if attention {
            format!("{} parameters", m.param_count())
        } else {
            format!("{} parameters; GCN of width {}", m.param_count(), m.arch.width())
        };
        t.rows.push(StudyRow::new(label, "CGNN-SE", &met, test.len()).note(note));
    }
    ctx.report.tables.push(t);
    Ok(())
}

fn head_sweep(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    if ctx.cfg.heads.is_empty() || ctx.cfg.heads.contains(&0) {
        return Err(EvalError::Config("head counts must be positive".into()));
    }
    let test = ctx.data.test;
    let mut t = StudyTable::new("head_sweep");
    t.x_label = Some("heads".into());
    for &k in &ctx.cfg.heads {
        let mut arch = ctx.arch();
        arch.heads = k;
        let m = ctx.train(&format!("K={k}"), ctx.data.train, arch)?;
        let met = evaluate(&m, &ctx.adj, test, &test.mask())?;
        t.rows.push(StudyRow::new(format!("K={k}"), "CGNN-SE", &met, test.len()).at(k as f64));
    }
    ctx.report.tables.push(t);
    Ok(())
}

fn pmu_set_sweep(ctx: &mut Ctx<'_>) -> Result<(), EvalError> {
    let (g, train, test) = (ctx.data.grid, ctx.data.train, ctx.data.test);
    let mut sets = vec![train.header.pmu_buses.clone()];
    sets.extend(ctx.cfg.pmu_sets.iter().cloned());
    let size = train.header.pmu_buses.len();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    for _ in 0..ctx.cfg.random_pmu_sets {
        let mut ids: Vec<u32> = sample(&mut rng, g.bus_count(), size)
            .into_iter()
            .map(|i| g.buses()[i].id)
            .collect();
        ids.sort_unstable();
        sets.push(ids);
    }
    let mut t = StudyTable::new("pmu_set_sweep");
    t.x_label = Some("PMU count".into());
    for (k, set) in sets.iter().enumerate() {
        let tr = with_pmus(train, g, set, &train.header.noise, train.header.seed)?;
        let te = with_pmus(test, g, set, &test.header.noise, test.header.seed)?;
        let label = format!(
            "{{{}}}",
            set.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
        );
        let m = ctx.train(&label, &tr, ctx.arch())?;
        let met = evaluate(&m, &ctx.adj, &te, &te.mask())?;
        let series = if k == 0 { "dataset" } else { "alternative" };
        t.rows.push(StudyRow::new(label, series, &met, te.len()).at(set.len() as f64));
    }
    ctx.report.tables.push(t);
    Ok(())
}

/// Writes `report.json`, and `<table>.csv` plus `<table>.svg` per table,
/// into `dir`. Returns the written paths.
pub fn write_report(dir: &Path, report: &mut StudyReport) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    let mut written = Vec::new();
    report.files.clear();
    for t in &report.tables {
        let csv_path = dir.join(format!("{}.csv", t.name));
        let mut w = csv::Writer::from_path(&csv_path)
            .map_err(|e| EvalError::io(&csv_path, std::io::Error::other(e)))?;
        for r in &t.rows {
            w.serialize(r).map_err(|e| EvalError::io(&csv_path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| EvalError::io(&csv_path, e))?;
        let svg_path = dir.join(format!("{}.svg", t.name));
        std::fs::write(&svg_path, plot::svg_chart(t)).map_err(|e| EvalError::io(&svg_path, e))?;
        report.files.push(format!("{}.csv", t.name));
        report.files.push(format!("{}.svg", t.name));
        written.extend([csv_path, svg_path]);
    }
    let json_path = dir.join("report.json");
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|e| EvalError::io(&json_path, e))?;
    written.push(json_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, DatagenConfig};
    use crate::grid::{cases, parse_case};

    struct Fixture {
        g: GridGraph,
        train: SnapshotDataset,
        test: SnapshotDataset,
        model: CgnnModel,
    }

    fn fixture() -> Fixture {
        let g = parse_case(cases::IEEE14).unwrap();
        let ds = build_dataset(&g, &DatagenConfig::new(80, 3, vec![4, 6, 9])).unwrap();
        let idx: Vec<usize> = (0..80).collect();
        let (train, test) = (ds.subset(&idx[..60]), ds.subset(&idx[60..]));
        let mut arch = Architecture::new(14);
        arch.hidden = 4;
        arch.heads = 2;
        let model = init_model(&train, arch, 2, 0).unwrap();
        Fixture { g, train, test, model }
    }

    fn data(f: &Fixture) -> StudyData<'_> {
        StudyData {
            grid: &f.g,
            train: &f.train,
            test: &f.test,
            model: Some(&f.model),
        }
    }

    fn small_cfg() -> StudyConfig {
        let mut arch = Architecture::new(0);
        arch.hidden = 3;
        arch.heads = 1;
        StudyConfig {
            arch,
            components: 1,
            train: TrainConfig {
                epochs: 2,
                batch_size: 10,
                ..TrainConfig::default()
            },
            bad_seeds: 1,
            heads: vec![1, 2],
            random_pmu_sets: 1,
            ..StudyConfig::default()
        }
    }

    #[test]
    fn kinds_parse() {
        for k in StudyKind::ALL {
            assert_eq!(k.name().parse::<StudyKind>().unwrap(), k);
        }
        assert_eq!("bad-data".parse::<StudyKind>().unwrap(), StudyKind::BadData);
        assert!(matches!("fig12".parse::<StudyKind>(), Err(EvalError::UnknownKind(_))));
    }

    #[test]
    fn zero_outages_match_baseline() {
        let f = fixture();
        let cfg = StudyConfig {
            outages: 0,
            ..StudyConfig::default()
        };
        let base = run_study(StudyKind::Baseline, &data(&f), &cfg).unwrap();
        let topo = run_study(StudyKind::Topology, &data(&f), &cfg).unwrap();
        let b = base.table("baseline").unwrap().row("CGNN-SE", "estimate").unwrap();
        let t = &topo.table("topology").unwrap().rows;
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].metrics(), b.metrics());
        assert!(base.latency_ms.unwrap() > 0.0);
    }

    #[test]
    fn no_failures_match_baseline() {
        let f = fixture();
        let cfg = StudyConfig::default();
        let base = run_study(StudyKind::Baseline, &data(&f), &cfg).unwrap();
        let fail = run_study(StudyKind::PmuFailure, &data(&f), &cfg).unwrap();
        let b = base.table("baseline").unwrap().rows[0].metrics();
        let rows = &fail.table("pmu_failure").unwrap().rows;
        assert_eq!(rows[0].metrics(), b);
        // 3 PMUs: 1 + 3 + 3 + 1 subsets.
        assert_eq!(rows.iter().map(|r| r.cases).collect::<Vec<_>>(), vec![1, 3, 3, 1]);
        assert_eq!(fail.table("pmu_failure_cases").unwrap().rows.len(), 8);
    }

    #[test]
    fn topology_ranks_by_flow() {
        let f = fixture();
        let ranked = ranked_outages(&f.g, 5).unwrap();
        let sol = solve(&f.g, &PowerFlowOptions::default()).unwrap();
        let flows = branch_flows(&f.g, &sol).unwrap();
        assert_eq!(ranked.len(), 5);
        for w in ranked.windows(2) {
            assert!(flows[w[0]] >= flows[w[1]]);
        }
        // 1-2 carries the most power in the 14-bus case.
        assert_eq!(f.g.branch_label(ranked[0]), "1-2");
        let rep = run_study(StudyKind::Topology, &data(&f), &StudyConfig::default()).unwrap();
        assert_eq!(rep.table("topology").unwrap().rows.len(), 6);
    }

    #[test]
    fn clean_screening_matches_baseline() {
        let f = fixture();
        let cfg = StudyConfig {
            bad_fractions: vec![],
            ..StudyConfig::default()
        };
        let rep = run_study(StudyKind::BadData, &data(&f), &cfg).unwrap();
        let t = rep.table("bad_data").unwrap();
        let raw = t.row("0%", "unscreened").unwrap();
        let fixed = t.row("0%", "screened").unwrap();
        let base = evaluate(&f.model, &build_adjacency(&f.g), &f.test, &f.test.mask()).unwrap();
        // Three identical seeds averaged.
        assert!((raw.mape - base.mape).abs() < 1e-12 * base.mape);
        assert!((raw.mae_deg - base.mae_deg).abs() < 1e-12 * base.mae_deg);
        let rate: f64 = fixed.note.trim_start_matches("flag rate ").parse().unwrap();
        assert!(rate <= 1.2 * cfg.alpha + 0.01, "{rate}");
        assert!((fixed.mape - base.mape).abs() < 0.5 * base.mape);
    }

    #[test]
    fn corruption_counts_and_sizes() {
        let f = fixture();
        let stats = fit_stats(&f.train).unwrap();
        let bad = corrupt(&f.test, &stats, 0.5, (10.0, 10.0), 4).unwrap();
        for s in 0..f.test.len() {
            let (a, b) = (f.test.measured(s).into_vec(), bad.measured(s).into_vec());
            let hit: Vec<f64> = (0..6)
                .filter(|&c| a[c] != b[c])
                .map(|c| (b[c] - a[c]).abs() / stats.std[c])
                .collect();
            assert_eq!(hit.len(), 3);
            assert!(hit.iter().all(|z| (z - 10.0).abs() < 1e-6));
        }
        assert_eq!(corrupt(&f.test, &stats, 0.5, (10.0, 10.0), 4).unwrap(), bad);
    }

    #[test]
    fn subsets_and_ranks() {
        assert_eq!(failure_subsets(3, 2, 50, 0), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        let s = failure_subsets(11, 5, 20, 1);
        assert_eq!(s.len(), 20);
        assert_eq!(s, failure_subsets(11, 5, 20, 1));
        assert!((rank_correlation(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.4]) - 0.5).abs() < 1e-12);
        assert_eq!(rank_correlation(&[1.0, 2.0], &[3.0, 3.0]), 0.0);
    }

    #[test]
    fn training_studies_are_deterministic() {
        let f = fixture();
        let d = StudyData { model: None, ..data(&f) };
        let cfg = small_cfg();
        let a = run_study(StudyKind::HeadSweep, &d, &cfg).unwrap();
        let b = run_study(StudyKind::HeadSweep, &d, &cfg).unwrap();
        assert_eq!(a.tables, b.tables);
        assert_eq!(a.table("head_sweep").unwrap().rows.len(), 2);
        let abl = run_study(StudyKind::AttentionAblation, &d, &cfg).unwrap();
        let rows = &abl.table("attention_ablation").unwrap().rows;
        assert!(rows[1].note.contains("width 3"));
        let sets = run_study(StudyKind::PmuSetSweep, &d, &cfg).unwrap();
        assert_eq!(sets.table("pmu_set_sweep").unwrap().rows.len(), 2);
        let noise = run_study(StudyKind::Noise, &d, &cfg).unwrap();
        assert_eq!(noise.training.len(), 2);
        assert!(matches!(
            run_study(StudyKind::Baseline, &d, &cfg),
            Err(EvalError::MissingModel(_))
        ));
    }

    #[test]
    fn report_files() {
        let f = fixture();
        let mut rep = run_study(StudyKind::PmuFailure, &data(&f), &StudyConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_report(dir.path(), &mut rep).unwrap();
        assert_eq!(paths.len(), 5);
        let json: StudyReport =
            serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json, rep);
        assert_eq!(json.files, ["pmu_failure.csv", "pmu_failure.svg", "pmu_failure_cases.csv", "pmu_failure_cases.svg"]);
        let csv = std::fs::read_to_string(dir.path().join("pmu_failure.csv")).unwrap();
        assert!(csv.starts_with("scenario,series,x,mape,mae_deg,sigma_y2,snapshots,cases,note"));
        let svg = std::fs::read_to_string(dir.path().join("pmu_failure.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
