//! Error function, Gaussian tail helpers and the expected-ReLU kernel.
//!
//! `erf`/`erfc` follow the rational approximations of FreeBSD's
//! `s_erf.c`, whose notice is reproduced below. The coefficients keep
//! the absolute error under one ulp on every interval, and the pure-Rust
//! evaluation gives the same bits on every target.
//!
//! ```text
//! Copyright (C) 1993 by Sun Microsystems, Inc. All rights reserved.
//!
//! Developed at SunPro, a Sun Microsystems, Inc. business.
//! Permission to use, copy, modify, and distribute this
//! software is freely granted, provided that this notice
//! is preserved.
//! ```

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `1/√(2π)`
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

const ERX: f64 = 8.45062911510467529297e-01;
// erf on [0, 0.84375]
const EFX8: f64 = 1.02703333676410069053e+00;
const PP0: f64 = 1.28379167095512558561e-01;
const PP1: f64 = -3.25042107247001499370e-01;
const PP2: f64 = -2.84817495755985104766e-02;
const PP3: f64 = -5.77027029648944159157e-03;
const PP4: f64 = -2.37630166566501626084e-05;
const QQ1: f64 = 3.97917223959155352819e-01;
const QQ2: f64 = 6.50222499887672944485e-02;
const QQ3: f64 = 5.08130628187576562776e-03;
const QQ4: f64 = 1.32494738004321644526e-04;
const QQ5: f64 = -3.96022827877536812320e-06;
// erf on [0.84375, 1.25]
const PA0: f64 = -2.36211856075265944077e-03;
const PA1: f64 = 4.14856118683748331666e-01;
const PA2: f64 = -3.72207876035701323847e-01;
const PA3: f64 = 3.18346619901161753674e-01;
const PA4: f64 = -1.10894694282396677476e-01;
const PA5: f64 = 3.54783043256182359371e-02;
const PA6: f64 = -2.16637559486879084300e-03;
const QA1: f64 = 1.06420880400844228286e-01;
const QA2: f64 = 5.40397917702171048937e-01;
const QA3: f64 = 7.18286544141962662868e-02;
const QA4: f64 = 1.26171219808761642112e-01;
const QA5: f64 = 1.36370839120290507362e-02;
const QA6: f64 = 1.19844998467991074170e-02;
// erfc on [1.25, 1/0.35]
const RA0: f64 = -9.86494403484714822705e-03;
const RA1: f64 = -6.93858572707181764372e-01;
const RA2: f64 = -1.05586262253232909814e+01;
const RA3: f64 = -6.23753324503260060396e+01;
const RA4: f64 = -1.62396669462573470355e+02;
const RA5: f64 = -1.84605092906711035994e+02;
const RA6: f64 = -8.12874355063065934246e+01;
const RA7: f64 = -9.81432934416914548592e+00;
const SA1: f64 = 1.96512716674392571292e+01;
const SA2: f64 = 1.37657754143519042600e+02;
const SA3: f64 = 4.34565877475229228821e+02;
const SA4: f64 = 6.45387271733267880336e+02;
const SA5: f64 = 4.29008140027567833386e+02;
const SA6: f64 = 1.08635005541779435134e+02;
const SA7: f64 = 6.57024977031928170135e+00;
const SA8: f64 = -6.04244152148580987438e-02;
// erfc on [1/0.35, 28]
const RB0: f64 = -9.86494292470009928597e-03;
const RB1: f64 = -7.99283237680523006574e-01;
const RB2: f64 = -1.77579549177547519889e+01;
const RB3: f64 = -1.60636384855821916062e+02;
const RB4: f64 = -6.37566443368389627722e+02;
const RB5: f64 = -1.02509513161107724954e+03;
const RB6: f64 = -4.83519191608651397019e+02;
const SB1: f64 = 3.03380607434824582924e+01;
const SB2: f64 = 3.25792512996573918826e+02;
const SB3: f64 = 1.53672958608443695994e+03;
const SB4: f64 = 3.19985821950859553908e+03;
const SB5: f64 = 2.55305040643316442583e+03;
const SB6: f64 = 4.74528541206955367215e+02;
const SB7: f64 = -2.24409524465858183362e+01;

fn high_word(x: f64) -> u32 {
    (x.to_bits() >> 32) as u32
}

fn clear_low_word(x: f64) -> f64 {
    f64::from_bits(x.to_bits() & 0xffff_ffff_0000_0000)
}

fn erfc_mid(x: f64) -> f64 {
    let s = x.abs() - 1.0;
    let p = PA0 + s * (PA1 + s * (PA2 + s * (PA3 + s * (PA4 + s * (PA5 + s * PA6)))));
    let q = 1.0 + s * (QA1 + s * (QA2 + s * (QA3 + s * (QA4 + s * (QA5 + s * QA6)))));
    1.0 - ERX - p / q
}

/// erfc(|x|) for 0.84375 <= |x| < 28.
fn erfc_tail(ix: u32, x: f64) -> f64 {
    if ix < 0x3ff4_0000 {
        return erfc_mid(x);
    }
    let x = x.abs();
    let s = 1.0 / (x * x);
    let (r, big_s) = if ix < 0x4006_db6d {
        (
            RA0 + s * (RA1 + s * (RA2 + s * (RA3 + s * (RA4 + s * (RA5 + s * (RA6 + s * RA7)))))),
            1.0 + s
                * (SA1
                    + s * (SA2
                        + s * (SA3 + s * (SA4 + s * (SA5 + s * (SA6 + s * (SA7 + s * SA8))))))),
        )
    } else {
        (
            RB0 + s * (RB1 + s * (RB2 + s * (RB3 + s * (RB4 + s * (RB5 + s * RB6))))),
            1.0 + s * (SB1 + s * (SB2 + s * (SB3 + s * (SB4 + s * (SB5 + s * (SB6 + s * SB7)))))),
        )
    };
    let z = clear_low_word(x);
    (-z * z - 0.5625).exp() * ((z - x) * (z + x) + r / big_s).exp() / x
}

/// Gauss error function.
pub fn erf(x: f64) -> f64 {
    let raw = high_word(x);
    let negative = raw >> 31 != 0;
    let ix = raw & 0x7fff_ffff;
    if ix >= 0x7ff0_0000 {
        return if x.is_nan() {
            x
        } else if negative {
            -1.0
        } else {
            1.0
        };
    }
    if ix < 0x3feb_0000 {
        if ix < 0x3e30_0000 {
            return 0.125 * (8.0 * x + EFX8 * x);
        }
        let z = x * x;
        let r = PP0 + z * (PP1 + z * (PP2 + z * (PP3 + z * PP4)));
        let s = 1.0 + z * (QQ1 + z * (QQ2 + z * (QQ3 + z * (QQ4 + z * QQ5))));
        return x + x * (r / s);
    }
    let y = if ix < 0x4018_0000 {
        1.0 - erfc_tail(ix, x)
    } else {
        1.0 - f64::from_bits(0x0010_0000_0000_0000)
    };
    if negative {
        -y
    } else {
        y
    }
}

/// Complementary error function, accurate in the far tails.
pub fn erfc(x: f64) -> f64 {
    let raw = high_word(x);
    let negative = raw >> 31 != 0;
    let ix = raw & 0x7fff_ffff;
    if ix >= 0x7ff0_0000 {
        return if x.is_nan() {
            x
        } else if negative {
            2.0
        } else {
            0.0
        };
    }
    if ix < 0x3feb_0000 {
        if ix < 0x3c70_0000 {
            return 1.0 - x;
        }
        let z = x * x;
        let r = PP0 + z * (PP1 + z * (PP2 + z * (PP3 + z * PP4)));
        let s = 1.0 + z * (QQ1 + z * (QQ2 + z * (QQ3 + z * (QQ4 + z * QQ5))));
        let y = r / s;
        if negative || ix < 0x3fd0_0000 {
            return 1.0 - (x + x * y);
        }
        return 0.5 - (x - 0.5 + x * y);
    }
    if ix < 0x403c_0000 {
        let t = erfc_tail(ix, x);
        return if negative { 2.0 - t } else { t };
    }
    let tiny = f64::from_bits(0x0010_0000_0000_0000);
    if negative {
        2.0 - tiny
    } else {
        tiny * tiny
    }
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF, `Φ(z) = erfc(−z/√2)/2`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Upper tail `Q(y) = 1 − Φ(y)`.
pub fn normal_tail(y: f64) -> f64 {
    0.5 * erfc(y * FRAC_1_SQRT_2)
}

/// Inverse of the upper tail for `p` in (0, 1), found by bisection on
/// [`normal_tail`] to an absolute tolerance of 1e-12 in the argument.
pub fn normal_tail_inv(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "tail probability must lie in (0, 1)");
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        // Q is decreasing.
        if normal_tail(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Expected value of `max(g, 0)` for `g ~ N(z, 1)`:
/// `φ(z) + z·Φ(z)`, which equals `(1/√(2π))·exp(−z²/2) + (z/2)(1 + erf(z/√2))`.
///
/// Evaluated through `erfc` so the negative tail does not cancel.
pub fn nr(z: f64) -> f64 {
    if z > 0.0 {
        // nr(z) = z + nr(-z) keeps nr(z) >= z under rounding.
        z + nr(-z)
    } else {
        (normal_pdf(z) + z * normal_cdf(z)).max(0.0)
    }
}

/// `d nr / dz = Φ(z)`.
pub fn nr_grad(z: f64) -> f64 {
    normal_cdf(z)
}

/// `d erf / dx`.
pub fn erf_grad(x: f64) -> f64 {
    2.0 / PI.sqrt() * (-x * x).exp()
}

/// Variance below which a Gaussian pre-activation is treated as a point
/// mass and the expected ReLU collapses to `ReLU(mean)`.
pub const POINT_MASS_VARIANCE: f64 = 1e-12;

/// `E[ReLU(g)]` for `g ~ N(mean, var)`: `√var · nr(mean/√var)`, with the
/// point-mass limit below [`POINT_MASS_VARIANCE`].
#[inline]
pub fn gauss_relu(mean: f64, var: f64) -> f64 {
    if var < POINT_MASS_VARIANCE {
        super::matrix::relu(mean)
    } else {
        let sd = var.sqrt();
        sd * nr(mean / sd)
    }
}

/// Partial derivatives of [`gauss_relu`] with respect to mean and variance.
#[inline]
pub fn gauss_relu_grad(mean: f64, var: f64) -> (f64, f64) {
    if var < POINT_MASS_VARIANCE {
        (if mean > 0.0 { 1.0 } else { 0.0 }, 0.0)
    } else {
        let sd = var.sqrt();
        let z = mean / sd;
        (normal_cdf(z), normal_pdf(z) / (2.0 * sd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Maclaurin series `2/√π Σ (−1)^n x^(2n+1) / (n! (2n+1))`.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut acc = x;
        for n in 1..40 {
            term *= -x * x / n as f64;
            acc += term / (2 * n + 1) as f64;
        }
        2.0 / PI.sqrt() * acc
    }

    #[test]
    fn erf_examples() {
        assert_eq!(erf(0.0), 0.0);
        assert!((erf(6.0) - 1.0).abs() < 1e-15);
        assert!((erf(0.5) - erf_series(0.5)).abs() < 1e-12);
    }

    #[test]
    fn erf_matches_series_on_grid() {
        for i in 0..=40 {
            let x = -2.0 + 0.1 * i as f64;
            assert!((erf(x) - erf_series(x)).abs() < 1e-14, "x = {x}");
            assert_eq!(erf(-x), -erf(x));
            assert!((erf(x) + erfc(x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn erfc_far_tail() {
        // erfc(10) = 2.088487583762545e-45
        let rel = (erfc(10.0) - 2.088_487_583_762_545e-45).abs() / 2.088_487_583_762_545e-45;
        assert!(rel < 1e-13);
    }

    #[test]
    fn nr_examples() {
        assert!((nr(0.0) - INV_SQRT_2PI).abs() < 1e-16);
        assert!(nr(8.0) - 8.0 < 1e-12);
        assert!((nr_grad(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nr_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000_000usize;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let g: f64 = rng.sample::<f64, _>(StandardNormal) + 1.0;
            let v = g.max(0.0);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((nr(1.0) - mean).abs() < 3.0 * se, "{} vs {mean} (se {se})", nr(1.0));
    }

    #[test]
    fn nr_identity_and_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let z: f64 = rng.random_range(-10.0..10.0);
            let cdf = 0.5 * (1.0 + erf(z / 2f64.sqrt()));
            let pdf = (-z * z / 2.0).exp() / (2.0 * PI).sqrt();
            assert!((nr(z) - z * cdf - pdf).abs() < 1e-12);
            assert!(nr(z) >= z.max(0.0));
        }
    }

    #[test]
    fn tail_quantile() {
        let q = normal_tail_inv(0.025);
        assert!((q - 1.959_963_984_540_054).abs() < 1e-9, "{q}");
        assert!((normal_tail(q) - 0.025).abs() < 1e-13);
    }

    #[test]
    fn gauss_relu_continuous_at_threshold() {
        for &m in &[-1e-3, -1e-6, 0.0, 1e-6, 0.3, -0.3] {
            let above = gauss_relu(m, POINT_MASS_VARIANCE);
            let limit = m.max(0.0);
            assert!((above - limit).abs() < 1e-6);
        }
    }
}
