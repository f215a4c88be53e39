//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! A [`Tape`] is a Wengert list: every primitive appends a node holding its
//! value and the operand handles. [`Tape::gradient`] replays the list
//! backwards from a scalar loss and returns one adjoint per node. Adjoints
//! of leaves the loss does not depend on are exactly zero.

use std::sync::Arc;

use super::sparse::RowOperator;
use super::special::{erf, erf_grad, gauss_relu, gauss_relu_grad, nr, nr_grad};
use super::{Matrix, NumericsError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Neighbourhood lists `𝒩(i) ∪ {i}` used by the attention primitive.
pub type Neighborhoods = Vec<Vec<usize>>;

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Square(Var),
    Nr(Var),
    Erf(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Propagate(Arc<RowOperator>, Var),
    MaskRows(Var, Arc<Vec<bool>>),
    TileRows(Var, usize),
    SelectCol(Var, usize),
    RowScale(Var, Var),
    ConcatCols(Vec<Var>),
    GaussRelu(Var, Var),
    Attention(Box<AttentionCache>),
}

struct AttentionCache {
    src: Var,
    dst: Var,
    h: Var,
    graph: Arc<Neighborhoods>,
    slope: f64,
    /// Per block, per row, per neighbour: (pre-activation, weight).
    coeffs: Vec<(f64, f64)>,
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Single-threaded recording of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::gradient`], indexed by [`Var`].
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; a zero matrix when the loss does not depend on `v`.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.adjoints[v.0].take() {
            Some(m) => m,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).leaky_relu(slope);
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn nr(&mut self, a: Var) -> Var {
        let v = self.value(a).map(nr);
        self.push(v, Op::Nr(a))
    }

    pub fn erf(&mut self, a: Var) -> Var {
        let v = self.value(a).map(erf);
        self.push(v, Op::Erf(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::filled(1, 1, m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Applies `op` to every `n`-row block of `x`.
    pub fn propagate(&mut self, op: &Arc<RowOperator>, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if op.size() == 0 || xv.rows() % op.size() != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "propagate",
                left: (op.size(), op.size()),
                right: xv.shape(),
            });
        }
        let v = op.apply(xv);
        Ok(self.push(v, Op::Propagate(Arc::clone(op), x)))
    }

    /// Zeroes the rows whose flag in `keep` is false.
    pub fn mask_rows(&mut self, a: Var, keep: &Arc<Vec<bool>>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if keep.len() != av.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "mask_rows",
                left: av.shape(),
                right: (keep.len(), 1),
            });
        }
        let mut out = av.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(r).fill(0.0);
            }
        }
        Ok(self.push(out, Op::MaskRows(a, Arc::clone(keep))))
    }

    /// Repeats `a` vertically `times` times.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let parts = vec![av.clone(); times];
        let v = Matrix::vstack(&parts).expect("equal widths");
        self.push(v, Op::TileRows(a, times))
    }

    pub fn select_col(&mut self, a: Var, col: usize) -> Var {
        let v = Matrix::column(&self.value(a).col_vec(col));
        self.push(v, Op::SelectCol(a, col))
    }

    /// Multiplies row `i` of `g` by the scalar `w[i, 0]`.
    pub fn row_scale(&mut self, g: Var, w: Var) -> Result<Var, NumericsError> {
        let (gv, wv) = (self.value(g), self.value(w));
        if wv.cols() != 1 || wv.rows() != gv.rows() {
            return Err(shape_err("row_scale", gv, wv));
        }
        let mut out = gv.clone();
        for r in 0..out.rows() {
            let k = wv[(r, 0)];
            for o in out.row_mut(r) {
                *o *= k;
            }
        }
        Ok(self.push(out, Op::RowScale(g, w)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), pv));
            }
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Element-wise expected ReLU of `N(mean, var)`.
    pub fn gauss_relu(&mut self, mean: Var, var: Var) -> Result<Var, NumericsError> {
        let (m, s) = (self.value(mean), self.value(var));
        if m.shape() != s.shape() {
            return Err(shape_err("gauss_relu", m, s));
        }
        let data = m
            .as_slice()
            .iter()
            .zip(s.as_slice())
            .map(|(&a, &b)| gauss_relu(a, b))
            .collect();
        let v = Matrix::from_vec(m.rows(), m.cols(), data)?;
        Ok(self.push(v, Op::GaussRelu(mean, var)))
    }

    /// Neighbourhood attention aggregate.
    ///
    /// For every block and row `i`: `e_ij = leaky(src_i + dst_j)` over
    /// `j ∈ graph[i]`, `α_i· = softmax(e_i·)`, output row `Σ_j α_ij h_j`.
    pub fn attention(
        &mut self,
        src: Var,
        dst: Var,
        h: Var,
        graph: &Arc<Neighborhoods>,
        slope: f64,
    ) -> Result<Var, NumericsError> {
        let n = graph.len();
        let (sv, dv, hv) = (self.value(src), self.value(dst), self.value(h));
        if n == 0
            || sv.cols() != 1
            || dv.shape() != sv.shape()
            || hv.rows() != sv.rows()
            || hv.rows() % n != 0
        {
            return Err(shape_err("attention", sv, hv));
        }
        let batch = hv.rows() / n;
        let f = hv.cols();
        let mut out = Matrix::zeros(hv.rows(), f);
        let mut coeffs = Vec::with_capacity(batch * graph.iter().map(Vec::len).sum::<usize>());
        let mut scratch = Vec::new();
        for b in 0..batch {
            let base = b * n;
            for (i, nbrs) in graph.iter().enumerate() {
                scratch.clear();
                let si = sv[(base + i, 0)];
                for &j in nbrs {
                    let z = si + dv[(base + j, 0)];
                    scratch.push((z, if z > 0.0 { z } else { slope * z }));
                }
                let max = scratch.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.1));
                let mut total = 0.0;
                for p in scratch.iter_mut() {
                    p.1 = (p.1 - max).exp();
                    total += p.1;
                }
                let o = out.row_mut(base + i);
                for (&j, p) in nbrs.iter().zip(scratch.iter_mut()) {
                    p.1 /= total;
                    for (oo, hvj) in o.iter_mut().zip(hv.row(base + j)) {
                        *oo += p.1 * hvj;
                    }
                    coeffs.push(*p);
                }
            }
        }
        let cache = AttentionCache {
            src,
            dst,
            h,
            graph: Arc::clone(graph),
            slope,
            coeffs,
        };
        Ok(self.push(out, Op::Attention(Box::new(cache))))
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node,
    /// one dense `n × n` matrix per block.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Matrix>> {
        let Op::Attention(cache) = &self.nodes[v.0].op else {
            return None;
        };
        let n = cache.graph.len();
        let batch = self.nodes[v.0].value.rows() / n;
        let mut mats = Vec::with_capacity(batch);
        let mut k = 0;
        for _ in 0..batch {
            let mut m = Matrix::zeros(n, n);
            for (i, nbrs) in cache.graph.iter().enumerate() {
                for &j in nbrs {
                    m[(i, j)] = cache.coeffs[k].1;
                    k += 1;
                }
            }
            mats.push(m);
        }
        Some(mats)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn gradient(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss { shape });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn backward_node(&self, idx: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                accumulate(adj, *a, g.matmul_t(val(*b)).expect("shape"));
                accumulate(adj, *b, val(*a).t_matmul(g).expect("shape"));
            }
            Op::MatMulT(a, b) => {
                accumulate(adj, *a, g.matmul(val(*b)).expect("shape"));
                accumulate(adj, *b, g.t_matmul(val(*a)).expect("shape"));
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                accumulate(adj, *a, g.hadamard(val(*b)).expect("shape"));
                accumulate(adj, *b, g.hadamard(val(*a)).expect("shape"));
            }
            Op::Scale(a, k) => accumulate(adj, *a, g.scale(*k)),
            Op::AddRow(a, b) => {
                accumulate(adj, *a, g.clone());
                let mut sums = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, x) in sums.row_mut(0).iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                accumulate(adj, *b, sums);
            }
            Op::Relu(a) => {
                let d = zip(g, val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                accumulate(adj, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = zip(g, val(*a), |gi, x| if x > 0.0 { gi } else { slope * gi });
                accumulate(adj, *a, d);
            }
            Op::Exp(a) => accumulate(adj, *a, g.hadamard(&node.value).expect("shape")),
            Op::Square(a) => accumulate(adj, *a, zip(g, val(*a), |gi, x| 2.0 * x * gi)),
            Op::Nr(a) => accumulate(adj, *a, zip(g, val(*a), |gi, x| gi * nr_grad(x))),
            Op::Erf(a) => accumulate(adj, *a, zip(g, val(*a), |gi, x| gi * erf_grad(x))),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(adj, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                accumulate(adj, *a, Matrix::filled(r, c, g[(0, 0)] / (r * c) as f64));
            }
            Op::Propagate(op, x) => accumulate(adj, *x, op.apply_transpose(g)),
            Op::MaskRows(a, keep) => {
                let mut d = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        d.row_mut(r).fill(0.0);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::TileRows(a, times) => {
                let n = val(*a).rows();
                let mut d = Matrix::zeros(n, g.cols());
                for t in 0..*times {
                    for r in 0..n {
                        for (o, x) in d.row_mut(r).iter_mut().zip(g.row(t * n + r)) {
                            *o += x;
                        }
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SelectCol(a, col) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d[(i, *col)] = g[(i, 0)];
                }
                accumulate(adj, *a, d);
            }
            Op::RowScale(gv, w) => {
                let (x, wv) = (val(*gv), val(*w));
                let mut dx = g.clone();
                let mut dw = Matrix::zeros(wv.rows(), 1);
                for r in 0..g.rows() {
                    let k = wv[(r, 0)];
                    let mut acc = 0.0;
                    for (o, xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                        acc += *o * xv;
                        *o *= k;
                    }
                    dw[(r, 0)] = acc;
                }
                accumulate(adj, *gv, dx);
                accumulate(adj, *w, dw);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols();
                    let d = Matrix::from_fn(g.rows(), c, |r, k| g[(r, off + k)]);
                    accumulate(adj, *p, d);
                    off += c;
                }
            }
            Op::GaussRelu(m, s) => {
                let (mv, sv) = (val(*m), val(*s));
                let mut dm = Matrix::zeros(mv.rows(), mv.cols());
                let mut ds = Matrix::zeros(mv.rows(), mv.cols());
                for k in 0..g.len() {
                    let (gm, gs) = gauss_relu_grad(mv.as_slice()[k], sv.as_slice()[k]);
                    dm.as_mut_slice()[k] = g.as_slice()[k] * gm;
                    ds.as_mut_slice()[k] = g.as_slice()[k] * gs;
                }
                accumulate(adj, *m, dm);
                accumulate(adj, *s, ds);
            }
            Op::Attention(cache) => self.backward_attention(cache, g, adj),
        }
    }

    fn backward_attention(&self, cache: &AttentionCache, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let hv = &self.nodes[cache.h.0].value;
        let n = cache.graph.len();
        let batch = hv.rows() / n;
        let mut dh = Matrix::zeros(hv.rows(), hv.cols());
        let mut dsrc = Matrix::zeros(hv.rows(), 1);
        let mut ddst = Matrix::zeros(hv.rows(), 1);
        let mut k = 0;
        let mut dalpha = Vec::new();
        for b in 0..batch {
            let base = b * n;
            for (i, nbrs) in cache.graph.iter().enumerate() {
                let gi = g.row(base + i);
                dalpha.clear();
                let mut weighted = 0.0;
                for (t, &j) in nbrs.iter().enumerate() {
                    let alpha = cache.coeffs[k + t].1;
                    let hj = hv.row(base + j);
                    let da: f64 = gi.iter().zip(hj).map(|(x, y)| x * y).sum();
                    weighted += alpha * da;
                    dalpha.push(da);
                    for (o, x) in dh.row_mut(base + j).iter_mut().zip(gi) {
                        *o += alpha * x;
                    }
                }
                for (t, &j) in nbrs.iter().enumerate() {
                    let (z, alpha) = cache.coeffs[k + t];
                    let de = alpha * (dalpha[t] - weighted);
                    let dz = if z > 0.0 { de } else { cache.slope * de };
                    dsrc[(base + i, 0)] += dz;
                    ddst[(base + j, 0)] += dz;
                }
                k += nbrs.len();
            }
        }
        accumulate(adj, cache.h, dh);
        accumulate(adj, cache.src, dsrc);
        accumulate(adj, cache.dst, ddst);
    }
}

fn zip(g: &Matrix, x: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Matrix::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut adj[v.0] {
        Some(m) => m.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`, step `h`.
    fn numeric_grad(x: &Matrix, h: f64, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[k] += h;
            let mut m = x.clone();
            m.as_mut_slice()[k] -= h;
            g.as_mut_slice()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 1, 3.0));
        let y = t.square(x);
        let g = t.gradient(y).unwrap();
        assert!((g.wrt(x)[(0, 0)] - 6.0).abs() < 1e-10);
    }

    #[test]
    fn nr_gradient_at_origin() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 1, 0.0));
        let y = t.nr(x);
        let g = t.gradient(y).unwrap().wrt(x)[(0, 0)];
        let h = 1e-6;
        let fd = (nr(h) - nr(-h)) / (2.0 * h);
        assert!((g - 0.5).abs() < 1e-10);
        assert!((g - fd).abs() < 1e-9);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]));
        let s = t.softmax_rows(x);
        let y = t.sum(s);
        let g = t.gradient(y).unwrap().wrt(x);
        assert!(g.max_abs() < 1e-10);
    }

    #[test]
    fn unused_leaf_has_zero_adjoint() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 2, 1.0));
        let unused = t.leaf(Matrix::filled(3, 1, 5.0));
        let y = t.sum(x);
        let g = t.gradient(y).unwrap();
        assert_eq!(g.wrt(unused), Matrix::zeros(3, 1));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 2, 1.0));
        assert!(matches!(t.gradient(x), Err(NumericsError::NonScalarLoss { .. })));
    }

    type Unary = fn(&mut Tape, Var) -> Var;

    #[test]
    fn unary_primitives_match_finite_differences() {
        let ops: Vec<(&str, Unary)> = vec![
            ("relu", |t, v| t.relu(v)),
            ("leaky", |t, v| t.leaky_relu(v, 0.2)),
            ("exp", |t, v| t.exp(v)),
            ("square", |t, v| t.square(v)),
            ("nr", |t, v| t.nr(v)),
            ("erf", |t, v| t.erf(v)),
            ("softmax", |t, v| t.softmax_rows(v)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (name, op) in ops {
            for _ in 0..100 {
                // Keep away from the ReLU kink.
                let x = Matrix::from_fn(2, 3, |_, _| {
                    let v: f64 = rng.random_range(-2.0..2.0);
                    if v.abs() < 1e-3 {
                        0.5
                    } else {
                        v
                    }
                });
                let weights = random(&mut rng, 2, 3);
                let eval = |m: &Matrix| {
                    let mut t = Tape::new();
                    let xv = t.leaf(m.clone());
                    let w = t.constant(weights.clone());
                    let y = op(&mut t, xv);
                    let p = t.hadamard(y, w).unwrap();
                    let s = t.sum(p);
                    (t.value(s)[(0, 0)], t, xv, s)
                };
                let (_, t, xv, s) = eval(&x);
                let g = t.gradient(s).unwrap().wrt(xv);
                let fd = numeric_grad(&x, 1e-6, &|m| eval(m).0);
                assert!(rel_err(&g, &fd) < 1e-5, "{name}: {g:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn structural_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 4;
        let dense = Matrix::from_fn(n, n, |i, j| {
            if i == j || (i + 1 == j) || (j + 1 == i) {
                0.3 + 0.1 * (i + j) as f64
            } else {
                0.0
            }
        });
        let op = Arc::new(RowOperator::from_dense(&dense));
        let graph: Arc<Neighborhoods> = Arc::new(
            (0..n)
                .map(|i| (0..n).filter(|&j| dense[(i, j)] != 0.0).collect())
                .collect(),
        );
        let keep = Arc::new(vec![true, false, true, true]);
        for _ in 0..20 {
            let x = random(&mut rng, 2 * n, 3);
            let w = random(&mut rng, 2, 3);
            let b = random(&mut rng, 1, 2);
            let s = random(&mut rng, n, 2).map(|v| v.abs() + 0.1);
            let target = random(&mut rng, 2 * n, 2);
            let run = |xm: &Matrix, wm: &Matrix, bm: &Matrix, sm: &Matrix| {
                let mut t = Tape::new();
                let xv = t.leaf(xm.clone());
                let wv = t.leaf(wm.clone());
                let bv = t.leaf(bm.clone());
                let sv = t.leaf(sm.clone());
                let p = t.propagate(&op, xv).unwrap();
                let h = t.matmul_t(p, wv).unwrap();
                let a1 = t.select_col(h, 0);
                let a2 = t.select_col(h, 1);
                let att = t.attention(a1, a2, h, &graph, 0.2).unwrap();
                let masked = t.mask_rows(sv, &keep).unwrap();
                let tiled = t.tile_rows(masked, 2);
                let gr = t.gauss_relu(att, tiled).unwrap();
                let w0 = t.select_col(tiled, 1);
                let sc = t.row_scale(gr, w0).unwrap();
                let cat = t.concat_cols(&[sc, att]).unwrap();
                let cw = t.constant(Matrix::from_fn(4, 2, |i, j| 0.1 * (i as f64 - j as f64)));
                let y = t.matmul(cat, cw).unwrap();
                let y = t.add_row(y, bv).unwrap();
                let tg = t.constant(target.clone());
                let d = t.sub(y, tg).unwrap();
                let sq = t.square(d);
                let l = t.mean(sq);
                (t, [xv, wv, bv, sv], l)
            };
            let (t, vars, l) = run(&x, &w, &b, &s);
            let grads = t.gradient(l).unwrap();
            let inputs = [x.clone(), w.clone(), b.clone(), s.clone()];
            for (k, input) in inputs.iter().enumerate() {
                let fd = numeric_grad(input, 1e-6, &|m| {
                    let mut args = inputs.clone();
                    args[k] = m.clone();
                    let (t, _, l) = run(&args[0], &args[1], &args[2], &args[3]);
                    t.value(l)[(0, 0)]
                });
                let g = grads.wrt(vars[k]);
                let err = g
                    .as_slice()
                    .iter()
                    .zip(fd.as_slice())
                    .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-4))
                    .fold(0.0, f64::max);
                assert!(err < 1e-5, "input {k}: {err}\n{g:?}\n{fd:?}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let graph: Arc<Neighborhoods> = Arc::new(vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let s = t.constant(random(&mut rng, 3, 1).scale(10.0));
        let d = t.constant(random(&mut rng, 3, 1).scale(10.0));
        let h = t.constant(random(&mut rng, 3, 2));
        let a = t.attention(s, d, h, &graph, 0.2).unwrap();
        for m in t.attention_weights(a).unwrap() {
            for r in 0..3 {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
