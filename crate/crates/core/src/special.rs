//! Scalar probability helpers: standard normal and Student-t CDFs, quantiles
//! and densities, evaluated with tail-safe complementary forms.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;
use puruspe::betai;
use statrs::function::beta::inv_beta_reg;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::ln_gamma;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Largest |x| for which the normal quantile is produced; beyond it the CDF saturates.
pub const NORMAL_CLAMP: f64 = 37.5;

#[inline]
pub fn norm_logpdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    norm_logpdf(x).exp()
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Normal quantile, refined by one Halley step against `erfc`.
pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -norm_ppf_lower(1.0 - p);
    }
    norm_ppf_lower(p)
}

/// Quantile for a lower-tail probability `p <= 0.5`, accurate in relative terms.
fn norm_ppf_lower(p: f64) -> f64 {
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    if x.is_finite() {
        let e = norm_cdf(x) - p;
        let u = e / norm_pdf(x);
        if u.is_finite() {
            x -= u / (1.0 + 0.5 * x * u);
        }
    }
    x
}

/// Solves `Phi(x) = p` given either the lower tail `p` or the upper tail `q = 1 - p`,
/// whichever is smaller; the result is clamped to `[-NORMAL_CLAMP, NORMAL_CLAMP]`.
///
/// Returns `(x, saturated)`.
pub fn norm_ppf_tails(lower: f64, upper: f64) -> (f64, bool) {
    let x = if lower <= upper { norm_ppf_lower(lower) } else { -norm_ppf_lower(upper) };
    if !x.is_finite() || x.abs() > NORMAL_CLAMP {
        let s = if lower <= upper { -1.0 } else { 1.0 };
        (s * NORMAL_CLAMP, true)
    } else {
        (x, false)
    }
}

/// Student-t log density.
pub fn t_logpdf(x: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
        - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()
}

/// Student-t lower-tail probability for `x <= 0` (exact small values in the tail).
fn t_tail(x: f64, nu: f64) -> f64 {
    debug_assert!(x <= 0.0);
    let xx = x * x;
    let w = xx / (nu + xx);
    let tail = || 0.5 * betai(0.5 * nu, 0.5, 1.0 / (1.0 + xx / nu));
    if w >= 0.5 {
        return tail();
    }
    let centered = 0.5 - 0.5 * betai(0.5, 0.5 * nu, w);
    if centered >= 0.25 { centered } else { tail() }
}

/// Student-t CDF.
pub fn t_cdf(x: f64, nu: f64) -> f64 {
    if x <= 0.0 { t_tail(x, nu) } else { 1.0 - t_tail(-x, nu) }
}

/// Student-t survival function `1 - CDF`.
pub fn t_sf(x: f64, nu: f64) -> f64 {
    t_cdf(-x, nu)
}

/// Student-t quantile for lower-tail probability `p` (Newton-polished).
pub fn t_ppf(p: f64, nu: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -t_ppf_lower(1.0 - p, nu);
    }
    t_ppf_lower(p, nu)
}

/// Quantile for `p <= 0.5`, solving `ln T(x) = ln p` by Newton on the log scale.
fn t_ppf_lower(p: f64, nu: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let w = inv_beta_reg(0.5 * nu, 0.5, 2.0 * p);
    let mut x = if w > 0.0 && w < 1.0 { -(nu * (1.0 - w) / w).sqrt() } else { f64::NAN };
    if !x.is_finite() {
        // crude start from the normal quantile
        x = norm_ppf(p);
    }
    let lp = p.ln();
    for _ in 0..50 {
        let t = t_tail(x.min(0.0), nu);
        if t <= 0.0 {
            break;
        }
        let step = (t.ln() - lp) / (t_logpdf(x, nu) - t.ln()).exp();
        let mut next = x - step;
        if next > 0.0 {
            next = 0.5 * x;
        }
        let done = (next - x).abs() <= 1e-15 * x.abs().max(1e-300);
        x = next;
        if done {
            break;
        }
    }
    x
}

/// d/dnu of the t CDF at `x`, by a fourth-order central stencil in `nu`.
pub fn t_cdf_dnu(x: f64, nu: f64) -> f64 {
    let h = 1e-3 * nu.max(1.0);
    let f = |n: f64| if x <= 0.0 { t_tail(x, n) } else { -t_tail(-x, n) };
    (f(nu - 2.0 * h) - 8.0 * f(nu - h) + 8.0 * f(nu + h) - f(nu + 2.0 * h)) / (12.0 * h)
}

/// Numerically safe `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse softplus, `ln(e^y - 1)` for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}
