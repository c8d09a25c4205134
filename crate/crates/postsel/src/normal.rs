//! Scalar standard-normal primitives, stable far into both tails.
//!
//! Everything downstream (interval masses, truncated moments, inverse-CDF
//! sampling, log-space acceptance ratios) reduces to these few functions, so
//! they are written to keep full relative precision where f64 can represent
//! the answer and to switch to log-space asymptotics where it cannot:
//!
//! * `std_cdf`/`std_sf` go through `erfc`, which stays accurate down to the
//!   subnormal range (|z| up to ~38) instead of saturating at 1 like the
//!   naive `0.5 * (1 + erf)` form.
//! * `ln_std_sf` switches to the Mills-ratio asymptotic series beyond the
//!   `erfc` underflow point, so log-masses are available for any finite z.
//! * `std_quantile` refines a rational initial guess with Newton steps
//!   against the stable CDF, in log space when the target probability is
//!   below the normal-number range of the direct step.

use std::f64::consts::{PI, SQRT_2};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;

/// Standard normal density.
pub fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Log of the standard normal density.
pub fn ln_phi(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// P(Z <= z). Exact relative precision in the left tail via erfc.
pub fn std_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// P(Z >= z). Mirror of `std_cdf`; exact relative precision in the right tail.
pub fn std_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

// Beyond this point erfc(z / sqrt(2)) underflows and the survival function is
// only reachable in log space.
const TAIL_Z: f64 = 36.0;

/// log P(Z >= z) for any finite z.
pub fn ln_std_sf(z: f64) -> f64 {
    if z <= TAIL_Z {
        std_sf(z).ln()
    } else {
        // Mills ratio: P(Z >= z) = phi(z)/z * (1 - 1/z^2 + 3/z^4 - 15/z^6 + ...)
        // For z >= 36 the truncated series is accurate to ~1e-15 relative.
        let r = 1.0 / (z * z);
        let series = 1.0 + r * (-1.0 + r * (3.0 + r * (-15.0 + r * (105.0 + r * -945.0))));
        ln_phi(z) - z.ln() + series.ln()
    }
}

/// log P(Z <= z) for any finite z.
pub fn ln_std_cdf(z: f64) -> f64 {
    ln_std_sf(-z)
}

/// log(exp(a) + exp(b)) without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log(exp(a) - exp(b)) for a > b; negative infinity when they coincide.
pub fn log_sub_exp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    debug_assert!(a >= b);
    let d = -(-(a - b)).exp_m1(); // 1 - exp(b - a)
    if d <= 0.0 {
        f64::NEG_INFINITY
    } else {
        a + d.ln()
    }
}

// Rational approximation for the inverse normal CDF (relative error ~1.15e-9),
// used only as the starting point for Newton refinement below.
const IQ_A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const IQ_B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const IQ_C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const IQ_D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const IQ_P_LOW: f64 = 0.02425;

fn quantile_guess(p: f64) -> f64 {
    if p < IQ_P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((IQ_C[0] * q + IQ_C[1]) * q + IQ_C[2]) * q + IQ_C[3]) * q + IQ_C[4]) * q + IQ_C[5])
            / ((((IQ_D[0] * q + IQ_D[1]) * q + IQ_D[2]) * q + IQ_D[3]) * q + 1.0)
    } else if p <= 1.0 - IQ_P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((IQ_A[0] * r + IQ_A[1]) * r + IQ_A[2]) * r + IQ_A[3]) * r + IQ_A[4]) * r + IQ_A[5]) * q
            / (((((IQ_B[0] * r + IQ_B[1]) * r + IQ_B[2]) * r + IQ_B[3]) * r + IQ_B[4]) * r + 1.0)
    } else {
        -quantile_guess(1.0 - p)
    }
}

/// Inverse standard normal CDF on (0, 1), refined to full f64 precision.
///
/// For probabilities representable only near 0 the Newton correction is taken
/// in log space against `ln_std_cdf`, so the result stays accurate down to
/// p = 5e-324. For p near 1 the answer is only as precise as 1 - p itself;
/// callers who know the upper-tail mass should use `std_quantile_from_sf`.
pub fn std_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    if p > 0.5 {
        -quantile_lower(1.0 - p)
    } else {
        quantile_lower(p)
    }
}

// p in (0, 0.5], so the target z is <= 0 and std_cdf keeps full relative
// precision for the Newton residual.
fn quantile_lower(p: f64) -> f64 {
    let mut z = quantile_guess(p);
    if p < 1e-280 {
        // phi(z) underflows around |z| ~ 38; iterate on log F(z) = log p using
        // the hazard d/dz log F = phi/F.
        let lp = p.ln();
        for _ in 0..3 {
            let lf = ln_std_cdf(z);
            let hazard = (ln_phi(z) - lf).exp();
            z -= (lf - lp) / hazard;
        }
    } else {
        for _ in 0..2 {
            z -= (std_cdf(z) - p) / phi(z);
        }
    }
    z
}

/// Quantile located by its upper-tail mass: returns z with P(Z >= z) = q.
pub fn std_quantile_from_sf(q: f64) -> f64 {
    -std_quantile(q)
}
