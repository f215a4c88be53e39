use std::sync::Arc;

use super::{GridError, GridGraph};
use crate::numerics::linalg::spectral_norm;
use crate::numerics::tape::Neighborhoods;
use crate::numerics::{Matrix, RowOperator};

/// Adjacency-derived matrices of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyPack {
    /// Binary adjacency, zero diagonal.
    pub a: Matrix,
    /// `A + I`.
    pub a_hat: Matrix,
    /// Diagonal of `D` (row sums of `Â`).
    pub degree: Vec<f64>,
    /// `D^(-1/2) Â D^(-1/2)`.
    pub a_tilde: Matrix,
    /// Sparse `Ã`.
    pub propagator: Arc<RowOperator>,
    /// Sparse `Ã ⊙ Ã`.
    pub propagator_sq: Arc<RowOperator>,
    /// `𝒩(i) ∪ {i}`, sorted.
    pub neighborhoods: Arc<Neighborhoods>,
}

impl AdjacencyPack {
    /// Builds every derived matrix from a binary symmetric adjacency.
    pub fn from_binary(a: Matrix) -> Self {
        let n = a.rows();
        let a_hat = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { a[(i, j)] });
        let degree: Vec<f64> = (0..n).map(|i| a_hat.row(i).iter().sum()).collect();
        let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let a_tilde = Matrix::from_fn(n, n, |i, j| a_hat[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        let propagator = RowOperator::from_dense(&a_tilde);
        let propagator_sq = propagator.squared_entries();
        let neighborhoods = (0..n)
            .map(|i| (0..n).filter(|&j| a_hat[(i, j)] != 0.0).collect())
            .collect();
        Self {
            a,
            a_hat,
            degree,
            a_tilde,
            propagator: Arc::new(propagator),
            propagator_sq: Arc::new(propagator_sq),
            neighborhoods: Arc::new(neighborhoods),
        }
    }

    /// Pack around an arbitrary square propagation matrix used in place of
    /// `Ã`. The binary pattern is the off-diagonal support of `m`.
    pub fn from_propagation(m: Matrix) -> Self {
        let n = m.rows();
        let a = Matrix::from_fn(n, n, |i, j| f64::from(i != j && m[(i, j)] != 0.0));
        let a_hat = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { a[(i, j)] });
        let degree = (0..n).map(|i| a_hat.row(i).iter().sum()).collect();
        let propagator = RowOperator::from_dense(&m);
        let propagator_sq = propagator.squared_entries();
        let neighborhoods = (0..n)
            .map(|i| (0..n).filter(|&j| a_hat[(i, j)] != 0.0).collect())
            .collect();
        Self {
            a,
            a_hat,
            degree,
            a_tilde: m,
            propagator: Arc::new(propagator),
            propagator_sq: Arc::new(propagator_sq),
            neighborhoods: Arc::new(neighborhoods),
        }
    }

    pub fn size(&self) -> usize {
        self.a.rows()
    }

    pub fn degree_matrix(&self) -> Matrix {
        let n = self.size();
        Matrix::from_fn(n, n, |i, j| if i == j { self.degree[i] } else { 0.0 })
    }
}

/// Adjacency of the in-service branches; parallel branches collapse.
pub fn build_adjacency(g: &GridGraph) -> AdjacencyPack {
    let n = g.bus_count();
    let mut a = Matrix::zeros(n, n);
    for k in 0..g.branches().len() {
        if g.branches()[k].in_service {
            let (f, t) = g.endpoints(k);
            a[(f, t)] = 1.0;
            a[(t, f)] = 1.0;
        }
    }
    AdjacencyPack::from_binary(a)
}

/// Operator 2-norm of `A − A′`.
pub fn adjacency_distance(a: &AdjacencyPack, a2: &AdjacencyPack) -> Result<f64, GridError> {
    if a.size() != a2.size() {
        return Err(GridError::DimensionMismatch {
            left: a.size(),
            right: a2.size(),
        });
    }
    let diff = a.a.sub(&a2.a).expect("same shape");
    Ok(spectral_norm(&diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{cases, parse_case, perturb_topology};
    use proptest::prelude::*;

    fn from_edges(n: usize, edges: &[(usize, usize)]) -> AdjacencyPack {
        let mut a = Matrix::zeros(n, n);
        for &(i, j) in edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        AdjacencyPack::from_binary(a)
    }

    #[test]
    fn two_bus_entries_are_half() {
        let p = from_edges(2, &[(0, 1)]);
        assert!(p.a_tilde.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn isolated_bus_is_identity() {
        let p = from_edges(1, &[]);
        assert_eq!(p.a_tilde, Matrix::identity(1));
    }

    #[test]
    fn ieee14_matches_dense_recomputation() {
        let g = parse_case(cases::IEEE14).unwrap();
        let p = build_adjacency(&g);
        let n = g.bus_count();
        let mut a_hat = Matrix::identity(n);
        for br in g.branches() {
            let i = g.bus_index(br.from).unwrap();
            let j = g.bus_index(br.to).unwrap();
            a_hat[(i, j)] = 1.0;
            a_hat[(j, i)] = 1.0;
        }
        let d: Vec<f64> = (0..n).map(|i| a_hat.row(i).iter().sum()).collect();
        let mut dm = Matrix::zeros(n, n);
        for i in 0..n {
            dm[(i, i)] = 1.0 / d[i].sqrt();
        }
        let oracle = dm.matmul(&a_hat).unwrap().matmul(&dm).unwrap();
        for i in 0..n {
            let s1: f64 = p.a_tilde.row(i).iter().sum();
            let s2: f64 = oracle.row(i).iter().sum();
            assert!((s1 - s2).abs() < 1e-12);
        }
        assert_eq!(p.a_tilde, p.a_tilde.transpose());
        assert!(spectral_norm(&p.a_tilde) <= 1.0 + 1e-9);
    }

    #[test]
    fn every_case_has_bounded_propagator() {
        for text in [cases::IEEE14, cases::IEEE30, cases::IEEE118] {
            let p = build_adjacency(&parse_case(text).unwrap());
            assert!(spectral_norm(&p.a_tilde) <= 1.0 + 1e-9);
            for i in 0..p.size() {
                assert_eq!(p.a[(i, i)], 0.0);
                assert!(p.neighborhoods[i].contains(&i));
            }
        }
    }

    #[test]
    fn distance_examples() {
        let base = from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert_eq!(adjacency_distance(&base, &base).unwrap(), 0.0);
        let one = from_edges(4, &[(1, 2), (2, 3), (3, 0)]);
        assert!((adjacency_distance(&base, &one).unwrap() - 1.0).abs() < 1e-9);
        let two = from_edges(4, &[(1, 2), (3, 0)]);
        let d = adjacency_distance(&base, &two).unwrap();
        // Dense eigenvalue oracle on the difference.
        let diff = base.a.sub(&two.a).unwrap();
        let na = nalgebra::DMatrix::from_row_slice(4, 4, diff.as_slice());
        let eig = na.symmetric_eigenvalues().abs().max();
        assert!((d - eig).abs() < 1e-9 && (d - 1.0).abs() < 1e-9);
        assert!(adjacency_distance(&base, &from_edges(3, &[])).is_err());
    }

    #[test]
    fn perturbation_matches_direct_deletion() {
        let g = parse_case(cases::IEEE14).unwrap();
        let base = build_adjacency(&g);
        for k in 0..g.branches().len() {
            let Ok(g2) = perturb_topology(&g, &[k]) else {
                continue;
            };
            let mut a = base.a.clone();
            let (f, t) = g.endpoints(k);
            a[(f, t)] = 0.0;
            a[(t, f)] = 0.0;
            assert_eq!(build_adjacency(&g2).a, a);
        }
    }

    #[test]
    fn ieee118_line_8_5() {
        let g = parse_case(cases::IEEE118).unwrap();
        let k = g.parse_branch_ref("8-5").unwrap();
        let g2 = perturb_topology(&g, &[k]).unwrap();
        let d = adjacency_distance(&build_adjacency(&g), &build_adjacency(&g2)).unwrap();
        assert!(d > 0.0 && (d - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let g = parse_case(cases::IEEE14).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..g.bus_count()).collect();
            perm.shuffle(&mut rng);
            let buses = perm.iter().map(|&i| g.buses()[i].clone()).collect();
            let g2 = GridGraph::new(
                g.name(),
                g.base_mva(),
                buses,
                g.generators().to_vec(),
                g.branches().to_vec(),
            )
            .unwrap();
            let p1 = build_adjacency(&g);
            let p2 = build_adjacency(&g2);
            for (i2, &i1) in perm.iter().enumerate() {
                for (j2, &j1) in perm.iter().enumerate() {
                    prop_assert_eq!(p2.a_tilde[(i2, j2)], p1.a_tilde[(i1, j1)]);
                }
            }
        }
    }
}
