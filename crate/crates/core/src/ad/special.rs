//! Scalar special functions shared by the tape and the distributions.

use std::f64::consts::{LN_2, SQRT_2};

/// `0.5 * ln(2 pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(exp(x) - 1)`, the inverse of [`softplus`], for `x > 0`.
pub fn inv_softplus(x: f64) -> f64 {
    x + (-(-x).exp_m1()).ln()
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

pub fn log_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - HALF_LN_2PI
}

/// Standard normal CDF.
pub fn ndtr(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / SQRT_2)
}

/// `log Phi(x)`, accurate in the far left tail.
pub fn log_ndtr(x: f64) -> f64 {
    if x > -20.0 {
        ndtr(x).ln()
    } else {
        // Asymptotic series of the Mills ratio.
        let x2 = x * x;
        log_normal_pdf(x) - (-x).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// Standard normal quantile function.
pub fn ndtri(p: f64) -> f64 {
    let mut x = -SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    // Two Newton steps polish the initial approximation to full precision.
    for _ in 0..2 {
        if !x.is_finite() {
            break;
        }
        let r = if x < 0.0 {
            ndtr(x) - p
        } else {
            (1.0 - p) - ndtr(-x)
        };
        let step = r / log_normal_pdf(x).exp();
        if step.is_finite() {
            x -= step;
        }
    }
    x
}

pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// `ln 2`, re-exported for callers building half-normal densities.
pub const LN2: f64 = LN_2;

/// `ln(2 pi)`
pub const LN_2PI: f64 = 2.0 * HALF_LN_2PI;

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn half_ln_2pi_constant() {
        assert!((HALF_LN_2PI - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn inverse_pairs() {
        for &x in &[1e-6, 0.01, 0.7, 3.0, 25.0] {
            assert!((softplus(inv_softplus(x)) - x).abs() < 1e-12 * x.max(1.0));
        }
        for &p in &[1e-6, 0.2, 0.5, 0.9] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-15);
        }
        for &p in &[1e-10, 0.025, 0.5, 0.975] {
            assert!((ndtr(ndtri(p)) - p).abs() < 1e-12 * p.max(1e-3));
        }
    }

    #[test]
    fn log_ndtr_tail_is_continuous() {
        let a = log_ndtr(-19.999_999);
        let b = log_ndtr(-20.000_001);
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        assert!((log_ndtr(0.0) + LN_2).abs() < 1e-15);
    }
}
