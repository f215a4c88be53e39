use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;

/// Relative tolerance on successive singular-value estimates.
pub const POWER_ITERATION_TOL: f64 = 1e-10;
const MAX_POWER_ITERATIONS: usize = 20_000;

/// Operator 2-norm (largest singular value) by power iteration on `MᵀM`.
///
/// The start vector comes from a fixed-seed generator so the result is a
/// deterministic function of `m`.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() || m.max_abs() == 0.0 {
        return 0.0;
    }
    let n = m.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..MAX_POWER_ITERATIONS {
        let mv = mat_vec(m, &v);
        let mut w = mat_t_vec(m, &mv);
        let lambda = dot(&v, &w);
        let next = lambda.max(0.0).sqrt();
        if normalize(&mut w) == 0.0 {
            return next;
        }
        v = w;
        if (next - sigma).abs() <= POWER_ITERATION_TOL * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (r, &vr) in v.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(m.row(r)) {
            *o += a * vr;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_has_zero_norm() {
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0]]);
        assert!((spectral_norm(&m) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn agrees_with_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
            let na = nalgebra::DMatrix::from_row_slice(6, 4, m.as_slice());
            let expected = na.singular_values().max();
            assert!((spectral_norm(&m) - expected).abs() < 1e-8 * expected);
        }
    }
}
