use serde::{Deserialize, Serialize};

use super::Matrix;

/// Square operator stored as per-row `(column, weight)` lists.
///
/// Applied block-wise to stacked feature matrices: a `(batch·n) × f`
/// input is treated as `batch` independent `n × f` blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowOperator {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl RowOperator {
    /// Keeps the nonzero entries of a dense square matrix.
    pub fn from_dense(m: &Matrix) -> Self {
        assert_eq!(m.rows(), m.cols(), "row operator must be square");
        let rows = (0..m.rows())
            .map(|r| {
                m.row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(c, v)| (c, *v))
                    .collect()
            })
            .collect();
        Self { n: m.rows(), rows }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Entry-wise square of the operator (same sparsity pattern).
    pub fn squared_entries(&self) -> Self {
        Self {
            n: self.n,
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&(j, v)| (j, v * v)).collect())
                .collect(),
        }
    }

    /// `blockdiag(self) · x`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let f = x.cols();
        assert_eq!(x.rows() % self.n.max(1), 0, "rows must be a multiple of n");
        let batch = x.rows() / self.n.max(1);
        let mut out = Matrix::zeros(x.rows(), f);
        for b in 0..batch {
            let base = b * self.n;
            for i in 0..self.n {
                let o = out.row_mut(base + i);
                for &(j, w) in &self.rows[i] {
                    let xr = x.row(base + j);
                    for (oo, xv) in o.iter_mut().zip(xr) {
                        *oo += w * xv;
                    }
                }
            }
        }
        out
    }

    /// `blockdiag(self)ᵀ · g`.
    pub fn apply_transpose(&self, g: &Matrix) -> Matrix {
        let f = g.cols();
        let batch = g.rows() / self.n.max(1);
        let mut out = Matrix::zeros(g.rows(), f);
        for b in 0..batch {
            let base = b * self.n;
            for i in 0..self.n {
                for &(j, w) in &self.rows[i] {
                    for c in 0..f {
                        out[(base + j, c)] += w * g[(base + i, c)];
                    }
                }
            }
        }
        out
    }
}
