//! Joint optimization of network and mixture parameters.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{fit_gmm_em, shuffled_indices, DataError, EmOptions, SnapshotDataset};
use crate::eval::{metrics, MetricSet};
use crate::gnn::{Architecture, CgnnModel, ModelError, Scaling};
use crate::grid::AdjacencyPack;
use crate::numerics::{Matrix, NumericsError, Tape};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset has {bus_count} buses, model has {model}")]
    Dataset { bus_count: usize, model: usize },
    #[error("mixture initialization failed at bus position {bus}: {source}")]
    Em { bus: usize, source: DataError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Per-channel weighting of the squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain MSE in physical units (p.u. and radians).
    Uniform,
    /// Each channel divided by its spread about the per-bus mean on the
    /// training split, so magnitude and angle errors count alike.
    #[default]
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Minimum decrease counted as an improvement.
    pub min_delta: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Learning rate reached at the last epoch by cosine annealing;
    /// constant rate when unset.
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
    #[serde(default)]
    pub loss_weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            batch_size: 10,
            learning_rate: 1e-3,
            patience: 50,
            min_delta: 0.0,
            validation_fraction: 0.1,
            seed: 0,
            optimizer: Optimizer::Adam,
            final_learning_rate: None,
            loss_weighting: LossWeighting::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.min_delta < 0.0 {
            return bad("min delta must be non-negative".into());
        }
        if let Some(f) = self.final_learning_rate {
            if !(f >= 0.0 && f.is_finite()) {
                return bad(format!("final learning rate must be finite and non-negative, got {f}"));
            }
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.epochs > 1 => {
                let t = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 = initial parameters).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub stopped_early: bool,
    pub train_size: usize,
    pub val_size: usize,
    /// Validation metrics of the returned parameters.
    pub validation: MetricSet,
}

/// Splits off a seeded validation subset; returns `(train, validation)`.
pub fn split(
    ds: &SnapshotDataset,
    validation_fraction: f64,
    seed: u64,
) -> (SnapshotDataset, SnapshotDataset) {
    let idx = shuffled_indices(ds.len(), seed);
    let n_val = ((ds.len() as f64 * validation_fraction).round() as usize).clamp(1, ds.len().max(2) - 1);
    (ds.subset(&idx[n_val..]), ds.subset(&idx[..n_val]))
}

/// Fresh model for `ds`: per-bus scaling from the true states of `ds`,
/// random network weights, per-bus mixtures fitted by EM to the scaled
/// states, head bias at the mean output residual.
///
/// Mixtures are fitted for every bus, PMU buses included, so a failed PMU
/// falls back to a fitted distribution.
pub fn init_model(
    ds: &SnapshotDataset,
    mut arch: Architecture,
    components: usize,
    seed: u64,
) -> Result<CgnnModel, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    arch.buses = ds.bus_count();
    arch.components = components;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CgnnModel::init(arch, ds.mask(), &mut rng)?;
    let n = ds.bus_count();
    let raw: Vec<Matrix> = (0..ds.len()).map(|s| ds.truth(s)).collect();
    model.scaling = Scaling::fit(&raw);
    let truths: Vec<Matrix> = raw.iter().map(|t| model.scaling.scale_input(t)).collect();
    for i in 0..n {
        let samples: Vec<Vec<f64>> = truths.iter().map(|t| t.row(i).to_vec()).collect();
        let opts = EmOptions {
            components,
            seed: seed.wrapping_add(i as u64),
            ..EmOptions::default()
        };
        let fit = fit_gmm_em(&samples, &opts).map_err(|source| TrainError::Em { bus: i, source })?;
        let mix = fit.mixture;
        for c in 0..components {
            model.first.logits[(i, c)] = mix.weights[c].ln();
            for d in 0..2 {
                model.first.means[c][(i, d)] = mix.means[c][d];
                model.first.log_vars[c][(i, d)] = mix.variances[c][d].ln();
            }
        }
    }
    let residual = |t: &Matrix, i: usize, d: usize| {
        (t[(i, d)] - model.scaling.output_mean[(i, d)]) / model.scaling.output_std[(i, d)]
    };
    for d in 0..2 {
        let total: f64 = raw.iter().map(|t| (0..n).map(|i| residual(t, i, d)).sum::<f64>()).sum();
        model.head.b[(0, d)] = total / (ds.len() * n) as f64;
    }
    Ok(model)
}

/// Weighted mean squared error over every entry; `weights` holds one
/// factor per column.
pub fn loss(pred: &Matrix, target: &Matrix, weights: &[f64]) -> Result<f64, TrainError> {
    let d = pred.sub(target)?;
    let sum: f64 = (0..d.rows())
        .flat_map(|r| (0..d.cols()).map(move |c| (r, c)))
        .map(|(r, c)| weights[c] * d[(r, c)] * d[(r, c)])
        .sum();
    Ok(sum / d.len() as f64)
}

/// Column weights of the loss for training on `ds`.
pub fn channel_weights(ds: &SnapshotDataset, weighting: LossWeighting) -> Vec<f64> {
    if weighting == LossWeighting::Uniform || ds.is_empty() {
        return vec![1.0; 2];
    }
    let truth = all_truth(ds);
    let n = ds.bus_count();
    let mut mean = Matrix::zeros(n, 2);
    for r in 0..truth.rows() {
        for d in 0..2 {
            mean[(r % n, d)] += truth[(r, d)] / ds.len() as f64;
        }
    }
    (0..2)
        .map(|d| {
            let var = (0..truth.rows()).map(|r| (truth[(r, d)] - mean[(r % n, d)]).powi(2)).sum::<f64>()
                / truth.rows() as f64;
            if var > 0.0 {
                1.0 / var
            } else {
                1.0
            }
        })
        .collect()
}

/// Stacked observed features and true states of snapshots `idx`.
fn stack(ds: &SnapshotDataset, idx: &[usize]) -> (Matrix, Matrix) {
    let obs: Vec<Matrix> = idx.iter().map(|&s| ds.observed(s)).collect();
    let truth: Vec<Matrix> = idx.iter().map(|&s| ds.truth(s)).collect();
    (
        Matrix::vstack(&obs).expect("equal widths"),
        Matrix::vstack(&truth).expect("equal widths"),
    )
}

/// Snapshots per forward pass when evaluating.
const EVAL_CHUNK: usize = 100;

/// Predictions for every snapshot of `ds`, stacked.
pub fn predict_dataset(
    model: &CgnnModel,
    adj: &AdjacencyPack,
    ds: &SnapshotDataset,
    mask: &[bool],
) -> Result<Matrix, ModelError> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (obs, _) = stack(ds, chunk);
        parts.push(model.predict(adj, &obs, mask)?);
    }
    Ok(Matrix::vstack(&parts)?)
}

/// Stacked true states of every snapshot.
pub fn all_truth(ds: &SnapshotDataset) -> Matrix {
    let idx: Vec<usize> = (0..ds.len()).collect();
    stack(ds, &idx).1
}

/// Loss of `model` over `ds`.
pub fn dataset_loss(
    model: &CgnnModel,
    adj: &AdjacencyPack,
    ds: &SnapshotDataset,
    weights: &[f64],
) -> Result<f64, TrainError> {
    let pred = predict_dataset(model, adj, ds, &model.train_mask)?;
    loss(&pred, &all_truth(ds), weights)
}

/// Loss and parameter gradients on one batch.
pub fn batch_gradients(
    model: &CgnnModel,
    adj: &AdjacencyPack,
    observed: &Matrix,
    target: &Matrix,
    weights: &[f64],
) -> Result<(f64, Vec<Matrix>), TrainError> {
    let mask = &model.train_mask;
    let batch = model.check_inputs(adj, observed, mask)?;
    let mut t = Tape::new();
    let vars = model.bind(&mut t, true);
    let obs = t.constant(model.input(observed, mask));
    let fw = model.forward(&mut t, &vars, adj, obs, mask, batch)?;
    let y = t.constant(target.clone());
    let diff = t.sub(fw.out, y)?;
    let scale = t.constant(Matrix::from_fn(target.rows(), target.cols(), |_, c| weights[c].sqrt()));
    let diff = t.hadamard(diff, scale)?;
    let sq = t.square(diff);
    let l = t.mean(sq);
    let value = t.value(l)[(0, 0)];
    let mut grads = t.gradient(l)?;
    Ok((value, vars.into_iter().map(|v| grads.take(v)).collect()))
}

/// Optimizer state.
pub struct Stepper {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Stepper {
    pub fn new(kind: Optimizer, lr: f64, model: &CgnnModel) -> Self {
        let zeros = || {
            model
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn apply(&mut self, model: &mut CgnnModel, grads: &[Matrix]) {
        self.step += 1;
        let (b1t, b2t) = (1.0 - BETA1.powi(self.step), 1.0 - BETA2.powi(self.step));
        for (k, (p, g)) in model.params_mut().into_iter().zip(grads).enumerate() {
            let (p, g) = (p.as_mut_slice(), g.as_slice());
            match self.kind {
                Optimizer::Sgd => {
                    for (w, d) in p.iter_mut().zip(g) {
                        *w -= self.lr * d;
                    }
                }
                Optimizer::Adam => {
                    let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
                    for i in 0..p.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let mh = m[i] / b1t;
                        let vh = v[i] / b2t;
                        p[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Trains on the training split of `ds` and returns the best-validation
/// parameters.
pub fn fit(
    model: CgnnModel,
    adj: &AdjacencyPack,
    ds: &SnapshotDataset,
    cfg: &TrainConfig,
) -> Result<(CgnnModel, TrainReport), TrainError> {
    let (train, val) = split(ds, cfg.validation_fraction, cfg.seed);
    fit_split(model, adj, &train, &val, cfg, &mut |_, _, _| {})
}

/// Non-finite values met while training at `epoch` count as divergence.
fn diverged(e: TrainError, epoch: usize) -> TrainError {
    match e {
        TrainError::Numerics(NumericsError::NonFinite { .. })
        | TrainError::Model(ModelError::NonFinite { .. })
        | TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. })) => TrainError::Diverged { epoch },
        e => e,
    }
}

/// Called after every epoch with the record, the current parameters and
/// whether they are the best so far.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &CgnnModel, bool) + 'a;

pub fn fit_split(
    mut model: CgnnModel,
    adj: &AdjacencyPack,
    train: &SnapshotDataset,
    val: &SnapshotDataset,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<(CgnnModel, TrainReport), TrainError> {
    cfg.validate()?;
    let n = model.arch.buses;
    for d in [train, val] {
        if d.bus_count() != n {
            return Err(TrainError::Dataset {
                bus_count: d.bus_count(),
                model: n,
            });
        }
    }
    if train.len() < cfg.batch_size || val.is_empty() {
        return Err(TrainError::Config(format!(
            "training split has {} snapshots, validation {}; batch size is {}",
            train.len(),
            val.len(),
            cfg.batch_size
        )));
    }
    let finite = |x: f64, epoch: usize| {
        if x.is_finite() {
            Ok(x)
        } else {
            Err(TrainError::Diverged { epoch })
        }
    };
    let weights = channel_weights(train, cfg.loss_weighting);
    let eval = |m: &CgnnModel, d: &SnapshotDataset, epoch: usize| match dataset_loss(m, adj, d, &weights) {
        Ok(x) => finite(x, epoch),
        Err(e) => Err(diverged(e, epoch)),
    };
    let initial_train_loss = eval(&model, train, 0)?;
    let initial_val_loss = eval(&model, val, 0)?;
    let mut best = (0, initial_val_loss, model.clone());
    let mut stepper = Stepper::new(cfg.optimizer, cfg.learning_rate, &model);
    let mut epochs = Vec::new();
    let mut wait = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        stepper.set_learning_rate(cfg.learning_rate_at(epoch));
        for chunk in order.chunks(cfg.batch_size) {
            let (obs, target) = stack(train, chunk);
            let (l, grads) = batch_gradients(&model, adj, &obs, &target, &weights).map_err(|e| diverged(e, epoch))?;
            finite(l, epoch)?;
            if grads.iter().any(|g| g.as_slice().iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Diverged { epoch });
            }
            stepper.apply(&mut model, &grads);
        }
        let train_loss = eval(&model, train, epoch)?;
        let val_loss = eval(&model, val, epoch)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = val_loss < best.1 - cfg.min_delta;
        if improved {
            best = (epoch, val_loss, model.clone());
            wait = 0;
        } else {
            wait += 1;
        }
        log::debug!("epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e}");
        hook(&rec, &model, improved);
        epochs.push(rec);
        if wait >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let stopped_epoch = epochs.len();
    let (best_epoch, best_val_loss, best_model) = best;
    let pred = predict_dataset(&best_model, adj, val, &best_model.train_mask)?;
    let validation = metrics(&pred, &all_truth(val), n).unwrap_or_default();
    Ok((
        best_model,
        TrainReport {
            initial_train_loss,
            initial_val_loss,
            epochs,
            best_epoch,
            best_val_loss,
            stopped_epoch,
            stopped_early,
            train_size: train.len(),
            val_size: val.len(),
            validation,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, DatagenConfig};
    use crate::grid::{build_adjacency, cases, parse_case};
    use rand::Rng;

    fn data(count: usize) -> (AdjacencyPack, SnapshotDataset) {
        let g = parse_case(cases::IEEE14).unwrap();
        let ds = build_dataset(&g, &DatagenConfig::new(count, 5, vec![4, 6, 9])).unwrap();
        (build_adjacency(&g), ds)
    }

    fn small_arch() -> Architecture {
        let mut a = Architecture::new(14);
        a.hidden = 8;
        a.heads = 2;
        a
    }

    #[test]
    fn loss_examples() {
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(loss(&y, &y, &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(loss(&y.map(|v| v + 1.0), &y, &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(loss(&y.map(|v| v + 1.0), &y, &[2.0, 0.5]).unwrap(), 1.25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::from_fn(7, 2, |_, _| rng.random::<f64>());
        let b = Matrix::from_fn(7, 2, |_, _| rng.random::<f64>());
        let mut s = 0.0;
        for i in 0..7 {
            for j in 0..2 {
                s += (a[(i, j)] - b[(i, j)]).powi(2);
            }
        }
        assert!((loss(&a, &b, &[1.0, 1.0]).unwrap() - s / 14.0).abs() < 1e-12);
        assert!(loss(&a, &Matrix::zeros(2, 2), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_em_based() {
        let (_, ds) = data(60);
        let a = init_model(&ds, small_arch(), 3, 4).unwrap();
        let b = init_model(&ds, small_arch(), 3, 4).unwrap();
        assert_eq!(a, b);

        let one = init_model(&ds, small_arch(), 1, 4).unwrap();
        for i in 0..14 {
            for d in 0..2 {
                let mean = (0..ds.len()).map(|s| ds.truth(s)[(i, d)]).sum::<f64>() / ds.len() as f64;
                assert!((one.scaling.input_mean[(i, d)] - mean).abs() < 1e-12);
                assert!(one.first.means[0][(i, d)].abs() < 1e-9);
            }
            assert_eq!(one.first.logits[(i, 0)], 0.0);
        }
    }

    #[test]
    fn init_beats_zero_model() {
        let (adj, ds) = data(60);
        let (train, val) = split(&ds, 0.1, 0);
        let m = init_model(&train, small_arch(), 2, 1).unwrap();
        let mut zero = m.clone();
        for p in zero.params_mut() {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        zero.scaling = Scaling::identity(14, 2);
        let w = channel_weights(&train, LossWeighting::Balanced);
        assert!(dataset_loss(&m, &adj, &val, &w).unwrap() < dataset_loss(&zero, &adj, &val, &w).unwrap());
    }

    #[test]
    fn balanced_weights_score_climatology_at_one() {
        let (_, ds) = data(30);
        assert_eq!(channel_weights(&ds, LossWeighting::Uniform), vec![1.0, 1.0]);
        let w = channel_weights(&ds, LossWeighting::Balanced);
        let truth = all_truth(&ds);
        let mut mean = Matrix::zeros(14, 2);
        for s in 0..ds.len() {
            mean.add_assign(&ds.truth(s));
        }
        let mean = mean.scale(1.0 / ds.len() as f64);
        let clim = Matrix::vstack(&vec![mean; ds.len()]).unwrap();
        assert!((loss(&clim, &truth, &w).unwrap() - 1.0).abs() < 1e-9);
        assert!(w[1] < w[0]);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let (adj, ds) = data(40);
        let m = init_model(&ds, small_arch(), 2, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (out, rep) = fit(m.clone(), &adj, &ds, &cfg).unwrap();
        assert_eq!(out, m);
        assert_eq!(rep.epochs[0].train_loss, rep.initial_train_loss);
    }

    #[test]
    fn small_sgd_step_descends() {
        let (adj, ds) = data(40);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = channel_weights(&ds, LossWeighting::Balanced);
        for trial in 0..20 {
            let m = init_model(&ds, small_arch(), 2, trial).unwrap();
            let idx: Vec<usize> = (0..10).map(|_| rng.random_range(0..ds.len())).collect();
            let (obs, y) = stack(&ds, &idx);
            let (l0, g) = batch_gradients(&m, &adj, &obs, &y, &w).unwrap();
            let mut m2 = m.clone();
            Stepper::new(Optimizer::Sgd, 1e-6, &m).apply(&mut m2, &g);
            let l1 = loss(&m2.predict(&adj, &obs, &m2.train_mask).unwrap(), &y, &w).unwrap();
            assert!(l1 <= l0, "trial {trial}: {l0} -> {l1}");
        }
    }

    #[test]
    fn reproducible_curves() {
        let (adj, ds) = data(40);
        let m = init_model(&ds, small_arch(), 2, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let (a, ra) = fit(m.clone(), &adj, &ds, &cfg).unwrap();
        let (b, rb) = fit(m, &adj, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        let curve = |r: &TrainReport| r.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
        assert_eq!(curve(&ra), curve(&rb));
    }

    #[test]
    fn early_stop_restores_best() {
        let (adj, ds) = data(40);
        let m = init_model(&ds, small_arch(), 2, 1).unwrap();
        // A huge SGD rate makes validation loss rise after the first steps.
        let cfg = TrainConfig {
            epochs: 30,
            patience: 5,
            learning_rate: 0.05,
            optimizer: Optimizer::Sgd,
            loss_weighting: LossWeighting::Uniform,
            ..Default::default()
        };
        let (train, val) = split(&ds, cfg.validation_fraction, cfg.seed);
        let mut seen = Vec::new();
        let (best, rep) = fit_split(m, &adj, &train, &val, &cfg, &mut |r, _, _| seen.push(r.val_loss)).unwrap();
        let min = seen.iter().copied().fold(rep.initial_val_loss, f64::min);
        assert_eq!(rep.best_val_loss, min);
        let w = channel_weights(&train, cfg.loss_weighting);
        assert_eq!(dataset_loss(&best, &adj, &val, &w).unwrap(), min);
        if rep.stopped_early {
            assert_eq!(rep.stopped_epoch, rep.best_epoch + 5);
        }
    }

    #[test]
    fn invalid_config() {
        let (adj, ds) = data(40);
        let m = init_model(&ds, small_arch(), 1, 1).unwrap();
        for cfg in [
            TrainConfig { validation_fraction: 0.0, ..Default::default() },
            TrainConfig { validation_fraction: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { final_learning_rate: Some(-1.0), ..Default::default() },
        ] {
            assert!(matches!(fit(m.clone(), &adj, &ds, &cfg), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig {
            epochs: 11,
            learning_rate: 1e-3,
            final_learning_rate: Some(1e-5),
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate_at(1), 1e-3);
        assert!((cfg.learning_rate_at(6) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
        assert!((cfg.learning_rate_at(11) - 1e-5).abs() < 1e-15);
        let rates: Vec<f64> = (1..=11).map(|e| cfg.learning_rate_at(e)).collect();
        assert!(rates.windows(2).all(|w| w[1] < w[0]));
        let flat = TrainConfig::default();
        assert_eq!(flat.learning_rate_at(1000), flat.learning_rate);
    }

    #[test]
    fn divergence_reports_epoch() {
        let (adj, ds) = data(40);
        let mut m = init_model(&ds, small_arch(), 1, 1).unwrap();
        m.head.w = m.head.w.scale(1e200);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e300,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        match fit(m, &adj, &ds, &cfg) {
            Err(TrainError::Diverged { epoch }) => assert!(epoch <= 1),
            other => panic!("{other:?}"),
        }
    }
}
