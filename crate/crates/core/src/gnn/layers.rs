//! Layer parameters and their forward passes on a [`Tape`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::grid::AdjacencyPack;
use crate::numerics::{Matrix, Tape, Var};

/// First layer: graph convolution whose missing inputs are Gaussian
/// mixtures, activated by the closed-form expected ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmGcnLayer {
    /// `f_out × f`.
    pub w: Matrix,
    /// `N × C` unnormalized mixture weights.
    pub logits: Matrix,
    /// Per component, `N × f` means.
    pub means: Vec<Matrix>,
    /// Per component, `N × f` log-variances.
    pub log_vars: Vec<Matrix>,
}

impl GmmGcnLayer {
    pub fn components(&self) -> usize {
        self.logits.cols()
    }

    /// Decoded mixture weights (rows on the simplex).
    pub fn weights(&self) -> Matrix {
        self.logits.softmax_rows()
    }

    pub fn variances(&self, c: usize) -> Matrix {
        self.log_vars[c].exp()
    }

    /// Mixture mean `Σ_c π_c μ_c` per bus.
    pub fn mixture_mean(&self) -> Matrix {
        let pi = self.weights();
        let (n, f) = self.means[0].shape();
        Matrix::from_fn(n, f, |i, d| {
            (0..self.components()).map(|c| pi[(i, c)] * self.means[c][(i, d)]).sum()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    /// `f_out × f_in`.
    pub w: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhGatLayer {
    /// Per head, `f_out × f_in`.
    pub w: Vec<Matrix>,
    /// Per head, `f_out × 1` halves of the attention vector applied to the
    /// receiving and sending node.
    pub a_src: Vec<Matrix>,
    pub a_dst: Vec<Matrix>,
    pub slope: f64,
}

impl MhGatLayer {
    pub fn heads(&self) -> usize {
        self.w.len()
    }

    pub fn out_width(&self) -> usize {
        self.w.iter().map(Matrix::rows).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `width × s`.
    pub w: Matrix,
    /// `1 × s`.
    pub b: Matrix,
}

/// Tape handles of a [`GmmGcnLayer`].
pub(crate) struct GmmVars {
    pub w: Var,
    pub logits: Var,
    pub means: Vec<Var>,
    pub log_vars: Vec<Var>,
}

/// Mixture weights used at observed rows: a point mass on the first
/// component when the whole neighbourhood is observed (every component
/// then gives the same activation), uniform otherwise.
fn observed_weights(adj: &AdjacencyPack, mask: &[bool], c: usize) -> Matrix {
    let n = mask.len();
    Matrix::from_fn(n, c, |i, k| {
        if !mask[i] {
            0.0
        } else if adj.neighborhoods[i].iter().all(|&j| mask[j]) {
            if k == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 / c as f64
        }
    })
}

/// Expected first-layer activation for a batch of `batch` snapshots.
///
/// `observed` is `(batch·N) × f` with zeros at unobserved rows; `mask`
/// marks observed buses (shared by the batch).
pub(crate) fn expected_activation_on_tape(
    t: &mut Tape,
    adj: &AdjacencyPack,
    observed: Var,
    mask: &[bool],
    batch: usize,
    p: &GmmVars,
) -> Result<Var, ModelError> {
    let n = mask.len();
    let c = p.means.len();
    let unobserved = Arc::new(mask.iter().map(|m| !m).collect::<Vec<bool>>());
    let w_sq = t.hadamard(p.w, p.w)?;

    let soft = t.softmax_rows(p.logits);
    let soft = t.mask_rows(soft, &unobserved)?;
    let fixed = t.constant(observed_weights(adj, mask, c));
    let pi = t.add(soft, fixed)?;

    let mut out = None;
    for k in 0..c {
        let mu = t.mask_rows(p.means[k], &unobserved)?;
        let mu = t.tile_rows(mu, batch);
        let m = t.add(observed, mu)?;
        let var = t.exp(p.log_vars[k]);
        let var = t.mask_rows(var, &unobserved)?;
        let s = t.tile_rows(var, batch);

        let am = t.propagate(&adj.propagator, m)?;
        let m_hat = t.matmul_t(am, p.w)?;
        let as_ = t.propagate(&adj.propagator_sq, s)?;
        let s_hat = t.matmul_t(as_, w_sq)?;
        let g = t.gauss_relu(m_hat, s_hat)?;

        let pik = t.select_col(pi, k);
        let pik = t.tile_rows(pik, batch);
        let term = t.row_scale(g, pik)?;
        out = Some(match out {
            None => term,
            Some(acc) => t.add(acc, term)?,
        });
    }
    debug_assert_eq!(t.value(observed).rows(), n * batch);
    Ok(out.expect("at least one component"))
}

/// `ReLU(Ã X Wᵀ)`.
pub(crate) fn gcn_on_tape(
    t: &mut Tape,
    adj: &AdjacencyPack,
    x: Var,
    w: Var,
) -> Result<Var, ModelError> {
    let ax = t.propagate(&adj.propagator, x)?;
    let pre = t.matmul_t(ax, w)?;
    Ok(t.relu(pre))
}

/// Tape handles of one attention head.
pub(crate) struct HeadVars {
    pub w: Var,
    pub a_src: Var,
    pub a_dst: Var,
}

/// Multi-head attention layer; returns the concatenated output and the
/// per-head attention nodes.
pub(crate) fn mhgat_on_tape(
    t: &mut Tape,
    adj: &AdjacencyPack,
    x: Var,
    heads: &[HeadVars],
    slope: f64,
) -> Result<(Var, Vec<Var>), ModelError> {
    let mut outs = Vec::with_capacity(heads.len());
    let mut atts = Vec::with_capacity(heads.len());
    for h in heads {
        let hx = t.matmul_t(x, h.w)?;
        let src = t.matmul(hx, h.a_src)?;
        let dst = t.matmul(hx, h.a_dst)?;
        let agg = t.attention(src, dst, hx, &adj.neighborhoods, slope)?;
        atts.push(agg);
        outs.push(t.relu(agg));
    }
    Ok((t.concat_cols(&outs)?, atts))
}

fn check_rows(x: &Matrix, n: usize) -> Result<usize, ModelError> {
    if n == 0 || x.rows() % n != 0 {
        return Err(ModelError::Rows {
            rows: x.rows(),
            cols: x.cols(),
            buses: n,
        });
    }
    Ok(x.rows() / n)
}

/// Expected activation of `layer` for one or more stacked snapshots.
pub fn expected_activation(
    layer: &GmmGcnLayer,
    adj: &AdjacencyPack,
    observed: &Matrix,
    mask: &[bool],
) -> Result<Matrix, ModelError> {
    let n = adj.size();
    if mask.len() != n || layer.logits.rows() != n {
        return Err(ModelError::Mask {
            expected: n,
            got: mask.len(),
        });
    }
    let batch = check_rows(observed, n)?;
    let mut t = Tape::new();
    let obs = t.constant(observed.clone());
    let p = GmmVars {
        w: t.constant(layer.w.clone()),
        logits: t.constant(layer.logits.clone()),
        means: layer.means.iter().map(|m| t.constant(m.clone())).collect(),
        log_vars: layer.log_vars.iter().map(|m| t.constant(m.clone())).collect(),
    };
    let out = expected_activation_on_tape(&mut t, adj, obs, mask, batch, &p)?;
    Ok(t.value(out).clone())
}

pub fn gcn_forward(layer: &GcnLayer, adj: &AdjacencyPack, x: &Matrix) -> Result<Matrix, ModelError> {
    check_rows(x, adj.size())?;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.constant(layer.w.clone());
    let out = gcn_on_tape(&mut t, adj, xv, w)?;
    Ok(t.value(out).clone())
}

/// Output of a multi-head attention layer and its per-head attention
/// matrices (first snapshot of the batch).
pub fn mhgat_forward(
    layer: &MhGatLayer,
    adj: &AdjacencyPack,
    x: &Matrix,
) -> Result<(Matrix, Vec<Matrix>), ModelError> {
    check_rows(x, adj.size())?;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let heads: Vec<HeadVars> = (0..layer.heads())
        .map(|k| HeadVars {
            w: t.constant(layer.w[k].clone()),
            a_src: t.constant(layer.a_src[k].clone()),
            a_dst: t.constant(layer.a_dst[k].clone()),
        })
        .collect();
    let (out, atts) = mhgat_on_tape(&mut t, adj, xv, &heads, layer.slope)?;
    let alphas = atts
        .iter()
        .map(|a| t.attention_weights(*a).expect("attention node")[0].clone())
        .collect();
    Ok((t.value(out).clone(), alphas))
}
