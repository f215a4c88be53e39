use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numerics::Matrix;

/// Estimation accuracy over a set of snapshots.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// Mean absolute percentage error of magnitudes (%).
    pub mape: f64,
    /// Mean absolute angle error (degrees).
    pub mae_deg: f64,
    /// `Σ_i |ŷ_i − y_i|²` over buses with `y = V e^{jθ}`, averaged over
    /// snapshots.
    pub sigma_y2: f64,
    /// Median inference time per snapshot (ms), when measured.
    pub latency_ms: Option<f64>,
}

/// Metrics of stacked `(snapshots·buses) × 2` predictions (magnitude p.u.,
/// angle rad) against the truth.
pub fn metrics(pred: &Matrix, truth: &Matrix, buses: usize) -> Result<MetricSet, EvalError> {
    if pred.shape() != truth.shape() || truth.cols() != 2 || buses == 0 || truth.rows() % buses != 0 {
        return Err(EvalError::Shape {
            pred: pred.shape(),
            truth: truth.shape(),
        });
    }
    let rows = truth.rows();
    let (mut ape, mut ae, mut sq) = (0.0, 0.0, 0.0);
    for r in 0..rows {
        let (v, th) = (truth[(r, 0)], truth[(r, 1)]);
        let (vh, thh) = (pred[(r, 0)], pred[(r, 1)]);
        if v == 0.0 {
            return Err(EvalError::ZeroMagnitude { row: r });
        }
        ape += ((vh - v) / v).abs();
        ae += (thh - th).abs();
        sq += (Complex64::from_polar(vh, thh) - Complex64::from_polar(v, th)).norm_sqr();
    }
    let n = rows as f64;
    Ok(MetricSet {
        mape: 100.0 * ape / n,
        mae_deg: ae.to_degrees() / n,
        sigma_y2: sq / (rows / buses) as f64,
        latency_ms: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_is_zero() {
        let y = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.98, -0.2]]);
        let m = metrics(&y, &y, 2).unwrap();
        assert_eq!((m.mape, m.mae_deg, m.sigma_y2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn one_percent_magnitude() {
        let y = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.98, -0.2]]);
        let p = Matrix::from_fn(2, 2, |i, j| if j == 0 { 1.01 * y[(i, 0)] } else { y[(i, 1)] });
        let m = metrics(&p, &y, 2).unwrap();
        assert!((m.mape - 1.0).abs() < 1e-12);
        assert_eq!(m.mae_deg, 0.0);
    }

    #[test]
    fn loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let y = Matrix::from_fn(12, 2, |_, j| if j == 0 { rng.random_range(0.9..1.1) } else { rng.random_range(-0.5..0.5) });
        let p = Matrix::from_fn(12, 2, |i, j| y[(i, j)] + rng.random_range(-0.05..0.05));
        let m = metrics(&p, &y, 4).unwrap();
        let (mut a, mut b, mut s) = (0.0, 0.0, 0.0);
        for i in 0..12 {
            a += (p[(i, 0)] - y[(i, 0)]).abs() / y[(i, 0)];
            b += (p[(i, 1)] - y[(i, 1)]).abs() * 180.0 / std::f64::consts::PI;
            let re = p[(i, 0)] * p[(i, 1)].cos() - y[(i, 0)] * y[(i, 1)].cos();
            let im = p[(i, 0)] * p[(i, 1)].sin() - y[(i, 0)] * y[(i, 1)].sin();
            s += re * re + im * im;
        }
        assert!((m.mape - 100.0 * a / 12.0).abs() < 1e-12);
        assert!((m.mae_deg - b / 12.0).abs() < 1e-12);
        assert!((m.sigma_y2 - s / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_magnitude_rejected() {
        let y = Matrix::from_rows(&[vec![0.0, 0.0]]);
        assert!(matches!(metrics(&y, &y, 1), Err(EvalError::ZeroMagnitude { row: 0 })));
    }
}
