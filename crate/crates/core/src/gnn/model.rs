use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::layers::{
    expected_activation_on_tape, gcn_on_tape, mhgat_on_tape, GcnLayer, GmmGcnLayer, GmmVars,
    HeadVars, LinearHead, MhGatLayer,
};
use super::ModelError;
use crate::grid::AdjacencyPack;
use crate::numerics::{Matrix, Tape, Var};

/// Leaky-ReLU slope of the attention scores.
pub const DEFAULT_SLOPE: f64 = 0.2;

/// Uniform initialization half-width is `INIT_SCALE / √fan_in`.
pub const INIT_SCALE: f64 = 1.0;

/// Network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub buses: usize,
    /// Input and output channels (magnitude, angle).
    pub features: usize,
    /// Width of the first layer and of each attention head.
    pub hidden: usize,
    pub heads: usize,
    /// Mixture components per bus.
    pub components: usize,
    /// Plain GCN layers between the first layer and the attention layer.
    pub extra_gcn: usize,
    /// `false` replaces the attention layer by a GCN of width `heads·hidden`.
    pub attention: bool,
    pub slope: f64,
}

impl Architecture {
    pub fn new(buses: usize) -> Self {
        Self {
            buses,
            features: 2,
            hidden: 50,
            heads: 4,
            components: 3,
            extra_gcn: 0,
            attention: true,
            slope: DEFAULT_SLOPE,
        }
    }

    /// Width entering the head.
    pub fn width(&self) -> usize {
        self.heads * self.hidden
    }

    /// Weight-bearing propagation layers, head included.
    pub fn depth(&self) -> usize {
        self.extra_gcn + 3
    }

    /// Shapes of the parameter blocks, in [`CgnnModel::params`] order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let (n, f, h, c) = (self.buses, self.features, self.hidden, self.components);
        let mut s = vec![(h, f), (n, c)];
        s.extend(std::iter::repeat_n((n, f), 2 * c));
        s.extend(std::iter::repeat_n((h, h), self.extra_gcn));
        if self.attention {
            for _ in 0..self.heads {
                s.extend([(h, h), (h, 1), (h, 1)]);
            }
        } else {
            s.push((self.width(), h));
        }
        s.extend([(self.width(), f), (1, f)]);
        s
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Architecture(m.into()));
        if self.buses == 0 {
            return bad("bus count must be positive");
        }
        if self.features == 0 || self.hidden == 0 || self.heads == 0 || self.components == 0 {
            return bad("features, hidden width, heads and components must be positive");
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return bad("leaky slope must be finite and non-negative");
        }
        Ok(())
    }
}

/// Fixed per-bus affine maps around the network: inputs enter as
/// `(x − input_mean) / input_std`, outputs leave as
/// `y · output_std + output_mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_mean: Matrix,
    pub input_std: Matrix,
    pub output_mean: Matrix,
    pub output_std: Matrix,
}

impl Scaling {
    pub fn identity(buses: usize, features: usize) -> Self {
        let zero = Matrix::zeros(buses, features);
        let one = Matrix::from_fn(buses, features, |_, _| 1.0);
        Self {
            input_mean: zero.clone(),
            input_std: one.clone(),
            output_mean: zero,
            output_std: one,
        }
    }

    /// Standardizes inputs by the per-bus sample statistics of `states`
    /// (each `N × f`) and offsets outputs by the per-bus means. Channels
    /// with (near) zero spread keep unit scale.
    pub fn fit(states: &[Matrix]) -> Self {
        let (n, f) = states[0].shape();
        let k = states.len() as f64;
        let mean = Matrix::from_fn(n, f, |i, d| states.iter().map(|s| s[(i, d)]).sum::<f64>() / k);
        let std = Matrix::from_fn(n, f, |i, d| {
            let v = states.iter().map(|s| (s[(i, d)] - mean[(i, d)]).powi(2)).sum::<f64>() / k;
            if v.sqrt() > 1e-9 {
                v.sqrt()
            } else {
                1.0
            }
        });
        Self {
            input_mean: mean.clone(),
            input_std: std,
            output_mean: mean,
            output_std: Matrix::from_fn(n, f, |_, _| 1.0),
        }
    }

    fn input_identity(&self) -> bool {
        self.input_mean.as_slice().iter().all(|&m| m == 0.0) && self.input_std.as_slice().iter().all(|&s| s == 1.0)
    }

    fn output_identity(&self) -> bool {
        self.output_mean.as_slice().iter().all(|&m| m == 0.0) && self.output_std.as_slice().iter().all(|&s| s == 1.0)
    }

    pub fn is_identity(&self) -> bool {
        self.input_identity() && self.output_identity()
    }

    /// Scales stacked `(batch·N) × f` inputs.
    pub fn scale_input(&self, x: &Matrix) -> Matrix {
        let n = self.input_mean.rows();
        Matrix::from_fn(x.rows(), x.cols(), |r, d| {
            (x[(r, d)] - self.input_mean[(r % n, d)]) / self.input_std[(r % n, d)]
        })
    }

    /// Maps stacked network outputs back to states.
    pub fn unscale_output(&self, y: &Matrix) -> Matrix {
        let n = self.output_mean.rows();
        Matrix::from_fn(y.rows(), y.cols(), |r, d| {
            y[(r, d)] * self.output_std[(r % n, d)] + self.output_mean[(r % n, d)]
        })
    }

    fn check(&self, buses: usize, features: usize) -> Result<(), ModelError> {
        let ok = |m: &Matrix| m.shape() == (buses, features) && m.as_slice().iter().all(|v| v.is_finite());
        let blocks = [&self.input_mean, &self.input_std, &self.output_mean, &self.output_std];
        let positive = |m: &Matrix| m.as_slice().iter().all(|&s| s > 0.0);
        if !blocks.iter().all(|m| ok(m)) || !positive(&self.input_std) || !positive(&self.output_std) {
            return Err(ModelError::Architecture("scaling must be finite with positive spread".into()));
        }
        Ok(())
    }
}

/// Layer after the first layer and optional GCNs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MidLayer {
    Attention(MhGatLayer),
    Gcn(GcnLayer),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgnnModel {
    pub arch: Architecture,
    pub first: GmmGcnLayer,
    pub gcn: Vec<GcnLayer>,
    pub mid: MidLayer,
    pub head: LinearHead,
    /// PMU buses the model was trained with. Their mixture parameters are
    /// not trained but remain available when a PMU drops out.
    pub train_mask: Vec<bool>,
    pub scaling: Scaling,
}

/// Values recorded during one forward pass.
pub struct Trace {
    pub output: Matrix,
    /// Head output before the inverse scaling.
    pub core: Matrix,
    /// First-layer output.
    pub hidden: Matrix,
    /// Per attention head, the `N × N` weights of the first snapshot.
    pub attention: Vec<Matrix>,
}

pub(crate) struct Forward {
    pub out: Var,
    pub core: Var,
    pub first: Var,
    pub attention: Vec<Var>,
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let lim = INIT_SCALE / (fan_in as f64).sqrt();
    let d = Uniform::new_inclusive(-lim, lim).expect("finite bounds");
    Matrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

impl CgnnModel {
    /// Random weights (uniform fan-in scaling), zero head bias, and unit
    /// zero-mean mixtures with equal weights.
    pub fn init<R: Rng + ?Sized>(
        arch: Architecture,
        train_mask: Vec<bool>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        if train_mask.len() != arch.buses {
            return Err(ModelError::Mask {
                expected: arch.buses,
                got: train_mask.len(),
            });
        }
        let (n, f, h, c) = (arch.buses, arch.features, arch.hidden, arch.components);
        let first = GmmGcnLayer {
            w: uniform(h, f, f, rng),
            logits: Matrix::zeros(n, c),
            means: vec![Matrix::zeros(n, f); c],
            log_vars: vec![Matrix::zeros(n, f); c],
        };
        let gcn = (0..arch.extra_gcn)
            .map(|_| GcnLayer {
                w: uniform(h, h, h, rng),
            })
            .collect();
        let mid = if arch.attention {
            let mut layer = MhGatLayer {
                w: Vec::new(),
                a_src: Vec::new(),
                a_dst: Vec::new(),
                slope: arch.slope,
            };
            for _ in 0..arch.heads {
                layer.w.push(uniform(h, h, h, rng));
                layer.a_src.push(uniform(h, 1, h, rng));
                layer.a_dst.push(uniform(h, 1, h, rng));
            }
            MidLayer::Attention(layer)
        } else {
            MidLayer::Gcn(GcnLayer {
                w: uniform(arch.width(), h, h, rng),
            })
        };
        let head = LinearHead {
            w: uniform(arch.width(), f, arch.width(), rng),
            b: Matrix::zeros(1, f),
        };
        Ok(Self {
            scaling: Scaling::identity(n, f),
            arch,
            first,
            gcn,
            mid,
            head,
            train_mask,
        })
    }

    /// Every parameter matrix in a fixed order.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = vec![&self.first.w, &self.first.logits];
        p.extend(self.first.means.iter());
        p.extend(self.first.log_vars.iter());
        p.extend(self.gcn.iter().map(|l| &l.w));
        match &self.mid {
            MidLayer::Attention(l) => {
                for k in 0..l.heads() {
                    p.extend([&l.w[k], &l.a_src[k], &l.a_dst[k]]);
                }
            }
            MidLayer::Gcn(l) => p.push(&l.w),
        }
        p.extend([&self.head.w, &self.head.b]);
        p
    }

    /// Same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = vec![&mut self.first.w, &mut self.first.logits];
        p.extend(self.first.means.iter_mut());
        p.extend(self.first.log_vars.iter_mut());
        p.extend(self.gcn.iter_mut().map(|l| &mut l.w));
        match &mut self.mid {
            MidLayer::Attention(l) => {
                for ((w, s), d) in l.w.iter_mut().zip(l.a_src.iter_mut()).zip(l.a_dst.iter_mut()) {
                    p.extend([w, s, d]);
                }
            }
            MidLayer::Gcn(l) => p.push(&mut l.w),
        }
        p.extend([&mut self.head.w, &mut self.head.b]);
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let c = self.arch.components;
        let mut names = vec!["first.w".to_string(), "first.logits".to_string()];
        names.extend((0..c).map(|k| format!("first.means.{k}")));
        names.extend((0..c).map(|k| format!("first.log_vars.{k}")));
        names.extend((0..self.gcn.len()).map(|k| format!("gcn.{k}.w")));
        match &self.mid {
            MidLayer::Attention(l) => {
                for k in 0..l.heads() {
                    names.extend([
                        format!("gat.{k}.w"),
                        format!("gat.{k}.a_src"),
                        format!("gat.{k}.a_dst"),
                    ]);
                }
            }
            MidLayer::Gcn(_) => names.push("mid.w".into()),
        }
        names.extend(["head.w".to_string(), "head.b".to_string()]);
        names
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Weight matrices of the propagation layers and the head (no mixture
    /// parameters, attention vectors or bias).
    pub fn weight_matrices(&self) -> Vec<&Matrix> {
        let mut p = vec![&self.first.w];
        p.extend(self.gcn.iter().map(|l| &l.w));
        match &self.mid {
            MidLayer::Attention(l) => p.extend(l.w.iter()),
            MidLayer::Gcn(l) => p.push(&l.w),
        }
        p.push(&self.head.w);
        p
    }

    /// Checks shapes of every parameter against the architecture.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.arch.validate()?;
        let mine = self.params();
        let want = self.arch.param_shapes();
        if mine.len() != want.len() {
            return Err(ModelError::Architecture(format!(
                "{} parameter blocks, architecture needs {}",
                mine.len(),
                want.len()
            )));
        }
        for ((m, w), name) in mine.iter().zip(&want).zip(self.param_names()) {
            if m.shape() != *w {
                return Err(ModelError::Architecture(format!(
                    "{name} has shape {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    w.0,
                    w.1
                )));
            }
        }
        if self.train_mask.len() != self.arch.buses {
            return Err(ModelError::Mask {
                expected: self.arch.buses,
                got: self.train_mask.len(),
            });
        }
        self.scaling.check(self.arch.buses, self.arch.features)
    }

    /// Records parameters on `t`, as leaves when `trainable`.
    pub(crate) fn bind(&self, t: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|m| {
                if trainable {
                    t.leaf(m.clone())
                } else {
                    t.constant(m.clone())
                }
            })
            .collect()
    }

    pub fn check_inputs(
        &self,
        adj: &AdjacencyPack,
        observed: &Matrix,
        mask: &[bool],
    ) -> Result<usize, ModelError> {
        let n = self.arch.buses;
        if adj.size() != n {
            return Err(ModelError::Adjacency {
                model: n,
                adj: adj.size(),
            });
        }
        if mask.len() != n {
            return Err(ModelError::Mask {
                expected: n,
                got: mask.len(),
            });
        }
        if observed.cols() != self.arch.features || observed.rows() % n != 0 || observed.rows() == 0 {
            return Err(ModelError::Rows {
                rows: observed.rows(),
                cols: observed.cols(),
                buses: n,
            });
        }
        Ok(observed.rows() / n)
    }

    /// Builds the forward pass for stacked snapshots on `t`.
    pub(crate) fn forward(
        &self,
        t: &mut Tape,
        vars: &[Var],
        adj: &AdjacencyPack,
        observed: Var,
        mask: &[bool],
        batch: usize,
    ) -> Result<Forward, ModelError> {
        let c = self.arch.components;
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter count");
        let gmm = GmmVars {
            w: next(),
            logits: next(),
            means: (0..c).map(|_| next()).collect(),
            log_vars: (0..c).map(|_| next()).collect(),
        };
        let first = expected_activation_on_tape(t, adj, observed, mask, batch, &gmm)?;
        let mut x = first;
        for _ in &self.gcn {
            x = gcn_on_tape(t, adj, x, next())?;
        }
        let mut attention = Vec::new();
        x = match &self.mid {
            MidLayer::Attention(l) => {
                let heads: Vec<HeadVars> = (0..l.heads())
                    .map(|_| HeadVars {
                        w: next(),
                        a_src: next(),
                        a_dst: next(),
                    })
                    .collect();
                let (out, atts) = mhgat_on_tape(t, adj, x, &heads, l.slope)?;
                attention = atts;
                out
            }
            MidLayer::Gcn(_) => gcn_on_tape(t, adj, x, next())?,
        };
        let (hw, hb) = (next(), next());
        let lin = t.matmul(x, hw)?;
        let core = t.add_row(lin, hb)?;
        let out = if self.scaling.output_identity() {
            core
        } else {
            let std = t.constant(tiled(&self.scaling.output_std, batch));
            let mean = t.constant(tiled(&self.scaling.output_mean, batch));
            let y = t.hadamard(core, std)?;
            t.add(y, mean)?
        };
        Ok(Forward {
            core,
            out,
            first,
            attention,
        })
    }

    /// State estimate for one or more stacked snapshots.
    ///
    /// `observed` is `(batch·N) × 2` with measurements at rows where `mask`
    /// is true; other rows are ignored.
    pub fn predict(
        &self,
        adj: &AdjacencyPack,
        observed: &Matrix,
        mask: &[bool],
    ) -> Result<Matrix, ModelError> {
        Ok(self.trace(adj, observed, mask)?.output)
    }

    pub fn trace(
        &self,
        adj: &AdjacencyPack,
        observed: &Matrix,
        mask: &[bool],
    ) -> Result<Trace, ModelError> {
        let batch = self.check_inputs(adj, observed, mask)?;
        let mut t = Tape::new();
        let vars = self.bind(&mut t, false);
        let obs = t.constant(self.input(observed, mask));
        let fw = self.forward(&mut t, &vars, adj, obs, mask, batch)?;
        let attention = fw
            .attention
            .iter()
            .map(|a| t.attention_weights(*a).expect("attention node").swap_remove(0))
            .collect();
        let output = t.value(fw.out).clone();
        if let Some(pos) = output.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                row: pos / output.cols(),
            });
        }
        Ok(Trace {
            output,
            core: t.value(fw.core).clone(),
            hidden: t.value(fw.first).clone(),
            attention,
        })
    }

    /// Scaled observations with unobserved rows zeroed, as fed to the
    /// first layer.
    pub fn input(&self, observed: &Matrix, mask: &[bool]) -> Matrix {
        if self.scaling.input_identity() {
            masked(observed, mask)
        } else {
            masked(&self.scaling.scale_input(observed), mask)
        }
    }

    /// First-layer input with mixture means (weighted by the decoded
    /// mixture weights) at unobserved rows.
    pub fn first_layer_input(&self, observed: &Matrix, mask: &[bool]) -> Matrix {
        let n = mask.len();
        let mean = self.first.mixture_mean();
        let observed = &self.scaling.scale_input(observed);
        Matrix::from_fn(observed.rows(), observed.cols(), |r, d| {
            if mask[r % n] {
                observed[(r, d)]
            } else {
                mean[(r % n, d)]
            }
        })
    }
}

fn tiled(m: &Matrix, times: usize) -> Matrix {
    Matrix::from_fn(m.rows() * times, m.cols(), |r, d| m[(r % m.rows(), d)])
}

/// Zeroes the rows of unobserved buses (every block).
pub fn masked(observed: &Matrix, mask: &[bool]) -> Matrix {
    let n = mask.len();
    Matrix::from_fn(observed.rows(), observed.cols(), |r, d| {
        if mask[r % n] {
            observed[(r, d)]
        } else {
            0.0
        }
    })
}
