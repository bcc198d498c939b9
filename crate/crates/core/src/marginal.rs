//! Parametric Gaussianization `G(y) = Phi^{-1}(F(y | zeta))` for a chosen
//! distribution family, with its derivative and inverse.
//!
//! The skewed t family is the Fernandez-Steel construction in the GAMLSS
//! "ST3" parameterization: location `mu`, scale `sigma`, skewness `alpha`
//! (`alpha = 1` is the symmetric t) and degrees of freedom `nu`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{Result, SctError};
use crate::special::{
    norm_cdf, norm_logpdf, norm_pdf, norm_ppf_tails, softplus, softplus_grad, t_cdf, t_cdf_dnu,
    t_logpdf, t_ppf, t_sf, NORMAL_CLAMP,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistributionFamily {
    #[serde(rename = "gaussian")]
    Gaussian,
    #[serde(rename = "skew-t3")]
    SkewT3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Identity,
    Softplus,
}

impl Link {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            Link::Identity => raw,
            Link::Softplus => softplus(raw),
        }
    }

    /// d(constrained)/d(raw).
    pub fn grad(self, raw: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Softplus => softplus_grad(raw),
        }
    }

    pub fn inverse(self, value: f64) -> f64 {
        match self {
            Link::Identity => value,
            Link::Softplus => crate::special::softplus_inv(value),
        }
    }
}

impl fmt::Display for DistributionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionFamily::Gaussian => "gaussian",
            DistributionFamily::SkewT3 => "skew-t3",
        })
    }
}

impl FromStr for DistributionFamily {
    type Err = SctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(DistributionFamily::Gaussian),
            "skew-t3" => Ok(DistributionFamily::SkewT3),
            other => Err(SctError::validation(format!("unknown distribution family {other:?}"))),
        }
    }
}

impl DistributionFamily {
    /// Parameters that vary over space (each with its own GP prior).
    pub fn local_count(self) -> usize {
        match self {
            DistributionFamily::Gaussian => 2,
            DistributionFamily::SkewT3 => 3,
        }
    }

    /// Parameters shared by all locations.
    pub fn shared_count(self) -> usize {
        match self {
            DistributionFamily::Gaussian => 0,
            DistributionFamily::SkewT3 => 1,
        }
    }

    /// Total parameter count per location, `P`.
    pub fn param_count(self) -> usize {
        self.local_count() + self.shared_count()
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            DistributionFamily::Gaussian => &["mu", "sigma"],
            DistributionFamily::SkewT3 => &["mu", "sigma", "alpha", "nu"],
        }
    }

    /// Links in `param_names` order (local parameters first, then shared).
    pub fn links(self) -> &'static [Link] {
        match self {
            DistributionFamily::Gaussian => &[Link::Identity, Link::Softplus],
            DistributionFamily::SkewT3 => {
                &[Link::Identity, Link::Softplus, Link::Softplus, Link::Softplus]
            }
        }
    }

    /// Constrained parameters from raw local values and raw shared values.
    pub fn constrain(self, local: &[f64], shared: &[f64]) -> FamilyParams {
        let links = self.links();
        let nl = self.local_count();
        let get = |p: usize| if p < nl { links[p].apply(local[p]) } else { links[p].apply(shared[p - nl]) };
        match self {
            DistributionFamily::Gaussian => FamilyParams::gaussian(get(0), get(1)),
            DistributionFamily::SkewT3 => FamilyParams::skew_t3(get(0), get(1), get(2), get(3)),
        }
    }
}

/// Constrained parameter values for one location. Unused fields are ignored
/// by families that do not need them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyParams {
    pub family: DistributionFamily,
    pub mu: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub nu: f64,
}

impl FamilyParams {
    pub fn gaussian(mu: f64, sigma: f64) -> Self {
        FamilyParams { family: DistributionFamily::Gaussian, mu, sigma, alpha: 1.0, nu: f64::INFINITY }
    }

    pub fn skew_t3(mu: f64, sigma: f64, alpha: f64, nu: f64) -> Self {
        FamilyParams { family: DistributionFamily::SkewT3, mu, sigma, alpha, nu }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = !self.mu.is_finite()
            || !(self.sigma > 0.0 && self.sigma.is_finite())
            || (self.family == DistributionFamily::SkewT3
                && !(self.alpha > 0.0 && self.alpha.is_finite() && self.nu > 0.0 && self.nu.is_finite()));
        if bad {
            return Err(SctError::domain(format!("invalid {} parameters {self:?}", self.family)));
        }
        Ok(())
    }

    /// `(F(y), 1 - F(y))`, each computed without cancellation in its own tail.
    fn tails(&self, y: f64) -> (f64, f64) {
        let z = (y - self.mu) / self.sigma;
        match self.family {
            DistributionFamily::Gaussian => (norm_cdf(z), norm_cdf(-z)),
            DistributionFamily::SkewT3 => {
                let a2 = self.alpha * self.alpha;
                if z < 0.0 {
                    let lower = 2.0 / (1.0 + a2) * t_cdf(self.alpha * z, self.nu);
                    (lower, 1.0 - lower)
                } else {
                    let upper = 2.0 * a2 / (1.0 + a2) * t_sf(z / self.alpha, self.nu);
                    (1.0 - upper, upper)
                }
            }
        }
    }

    pub fn logpdf(&self, y: f64) -> f64 {
        let z = (y - self.mu) / self.sigma;
        match self.family {
            DistributionFamily::Gaussian => norm_logpdf(z) - self.sigma.ln(),
            DistributionFamily::SkewT3 => {
                let a = self.alpha;
                let w = if z < 0.0 { a * z } else { z / a };
                (2.0 * a / (1.0 + a * a)).ln() - self.sigma.ln() + t_logpdf(w, self.nu)
            }
        }
    }

    /// Quantile from a lower-tail probability `p` and its complement `q`.
    fn quantile_tails(&self, p: f64, q: f64) -> f64 {
        match self.family {
            DistributionFamily::Gaussian => {
                let (x, _) = norm_ppf_tails(p, q);
                self.mu + self.sigma * x
            }
            DistributionFamily::SkewT3 => {
                let a2 = self.alpha * self.alpha;
                let split = 1.0 / (1.0 + a2);
                let z = if p < split {
                    t_ppf(p * (1.0 + a2) / 2.0, self.nu) / self.alpha
                } else {
                    -self.alpha * t_ppf(q * (1.0 + a2) / (2.0 * a2), self.nu)
                };
                self.mu + self.sigma * z
            }
        }
    }
}

/// Family CDF `F(y | params)`.
pub fn cdf(y: f64, params: &FamilyParams) -> Result<f64> {
    params.validate()?;
    Ok(params.tails(y).0)
}

/// Family quantile `F^{-1}(p | params)`.
pub fn quantile(p: f64, params: &FamilyParams) -> Result<f64> {
    params.validate()?;
    if !(p > 0.0 && p < 1.0) {
        return Err(SctError::domain(format!("probability {p} outside (0, 1)")));
    }
    Ok(params.quantile_tails(p, 1.0 - p))
}

/// Result of a forward Gaussianization; `saturated` is set when the CDF hit 0 or 1
/// and the output was clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussianized {
    pub value: f64,
    pub saturated: bool,
}

/// `G(y) = Phi^{-1}(F(y))`.
pub fn g_forward(y: f64, params: &FamilyParams) -> Result<Gaussianized> {
    params.validate()?;
    Ok(g_forward_unchecked(y, params))
}

pub(crate) fn g_forward_unchecked(y: f64, params: &FamilyParams) -> Gaussianized {
    if params.family == DistributionFamily::Gaussian {
        return Gaussianized { value: (y - params.mu) / params.sigma, saturated: false };
    }
    let (lower, upper) = params.tails(y);
    let (value, saturated) = norm_ppf_tails(lower, upper);
    Gaussianized { value, saturated }
}

/// `G'(y) = f(y) / phi(G(y))`.
pub fn g_derivative(y: f64, params: &FamilyParams) -> Result<f64> {
    params.validate()?;
    Ok(log_g_derivative_unchecked(y, params).exp())
}

pub(crate) fn log_g_derivative_unchecked(y: f64, params: &FamilyParams) -> f64 {
    if params.family == DistributionFamily::Gaussian {
        return -params.sigma.ln();
    }
    let g = g_forward_unchecked(y, params).value;
    params.logpdf(y) - norm_logpdf(g)
}

/// `G^{-1}(x) = F^{-1}(Phi(x))`.
pub fn g_inverse(x: f64, params: &FamilyParams) -> Result<f64> {
    params.validate()?;
    if !x.is_finite() {
        return Err(SctError::domain("cannot invert a non-finite value"));
    }
    Ok(g_inverse_unchecked(x, params))
}

pub(crate) fn g_inverse_unchecked(x: f64, params: &FamilyParams) -> f64 {
    if params.family == DistributionFamily::Gaussian {
        return params.mu + params.sigma * x;
    }
    let x = x.clamp(-NORMAL_CLAMP, NORMAL_CLAMP);
    params.quantile_tails(norm_cdf(x), norm_cdf(-x))
}

/// Per-observation quantities for the Stage-1 objective: `G(y)`, `ln G'(y)`
/// and their gradients with respect to the constrained parameters
/// `(mu, sigma, alpha, nu)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointEval {
    pub g: f64,
    pub log_gprime: f64,
    pub dg: [f64; 4],
    pub dlog_gprime: [f64; 4],
    pub saturated: bool,
}

pub(crate) fn point_eval(y: f64, p: &FamilyParams) -> PointEval {
    match p.family {
        DistributionFamily::Gaussian => {
            let z = (y - p.mu) / p.sigma;
            PointEval {
                g: z,
                log_gprime: -p.sigma.ln(),
                dg: [-1.0 / p.sigma, -z / p.sigma, 0.0, 0.0],
                dlog_gprime: [0.0, -1.0 / p.sigma, 0.0, 0.0],
                saturated: false,
            }
        }
        DistributionFamily::SkewT3 => skew_t3_point(y, p),
    }
}

fn skew_t3_point(y: f64, p: &FamilyParams) -> PointEval {
    let (a, s, nu) = (p.alpha, p.sigma, p.nu);
    let a2 = a * a;
    let z = (y - p.mu) / s;
    let left = z < 0.0;
    let w = if left { a * z } else { z / a };
    let logt = t_logpdf(w, nu);
    let logf = (2.0 * a / (1.0 + a2)).ln() - s.ln() + logt;
    let f = logf.exp();

    let (lower, upper, df_dalpha, df_dnu) = if left {
        let c = 2.0 / (1.0 + a2);
        let tw = t_cdf(w, nu);
        let lower = c * tw;
        let dc = -4.0 * a / ((1.0 + a2) * (1.0 + a2));
        (lower, 1.0 - lower, dc * tw + c * logt.exp() * z, c * t_cdf_dnu(w, nu))
    } else {
        let e = 2.0 * a2 / (1.0 + a2);
        let tw = t_cdf(-w, nu);
        let upper = e * tw;
        let de = 4.0 * a / ((1.0 + a2) * (1.0 + a2));
        // dS/dalpha = e' T(-w) + e t(-w) * z / alpha^2 ; dF = -dS
        let ds = de * tw + e * logt.exp() * z / a2;
        (1.0 - upper, upper, -ds, -e * t_cdf_dnu(-w, nu))
    };
    let (g, saturated) = norm_ppf_tails(lower, upper);
    let log_gprime = logf - norm_logpdf(g);

    // dF/dtheta for (mu, sigma, alpha, nu)
    let df = [-f, -f * z, df_dalpha, df_dnu];
    let dg = if saturated { [0.0; 4] } else { df.map(|v| v / norm_pdf(g)) };

    let score = -(nu + 1.0) * w / (nu + w * w);
    let (dw_dmu, dw_dalpha) = if left { (-a / s, z) } else { (-1.0 / (a * s), -z / a2) };
    let dw_dsigma = -w / s;
    let dlogf = [
        score * dw_dmu,
        -1.0 / s + score * dw_dsigma,
        1.0 / a - 2.0 * a / (1.0 + a2) + score * dw_dalpha,
        0.5 * digamma(0.5 * (nu + 1.0)) - 0.5 * digamma(0.5 * nu) - 0.5 / nu
            - 0.5 * (w * w / nu).ln_1p()
            + 0.5 * (nu + 1.0) * w * w / (nu * (nu + w * w)),
    ];
    let mut dlog_gprime = [0.0; 4];
    for i in 0..4 {
        // ln G' = ln f - ln phi(g) = ln f + g^2/2 + const
        dlog_gprime[i] = dlogf[i] + g * dg[i];
    }
    PointEval { g, log_gprime, dg, dlog_gprime, saturated }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_examples() {
        assert_eq!(cdf(0.0, &FamilyParams::gaussian(0.0, 1.0)).unwrap(), 0.5);
        let big = cdf(1.6449, &FamilyParams::skew_t3(0.0, 1.0, 1.0, 1e6)).unwrap();
        assert!((big - 0.95).abs() < 1e-4, "{big}");
        let sym = cdf(2.0, &FamilyParams::skew_t3(2.0, 3.0, 1.0, 7.0)).unwrap();
        assert!((sym - 0.5).abs() < 1e-15);
        assert!(cdf(0.0, &FamilyParams::gaussian(0.0, -1.0)).is_err());
        assert!(cdf(0.0, &FamilyParams::skew_t3(0.0, 1.0, 0.0, 3.0)).is_err());
    }

    #[test]
    fn forward_examples() {
        assert_eq!(g_forward(7.0, &FamilyParams::gaussian(3.0, 2.0)).unwrap().value, 2.0);
        for &y in &[-3.0, 0.1, 8.0] {
            assert_eq!(g_forward(y, &FamilyParams::gaussian(0.0, 1.0)).unwrap().value, y);
        }
        let p = FamilyParams::skew_t3(0.0, 1.0, 1.0, 5.0);
        let med = quantile(0.5, &p).unwrap();
        assert!(g_forward(med, &p).unwrap().value.abs() < 1e-14);
    }

    #[test]
    fn derivative_examples() {
        let p = FamilyParams::gaussian(1.0, 2.5);
        assert!((g_derivative(-4.0, &p).unwrap() - 0.4).abs() < 1e-15);
        assert!((g_derivative(1.3, &FamilyParams::gaussian(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-15);
        let p = FamilyParams::skew_t3(0.0, 1.0, 2.0, 8.0);
        let h = 1e-5;
        let fd = (g_forward(0.5 + h, &p).unwrap().value - g_forward(0.5 - h, &p).unwrap().value) / (2.0 * h);
        let an = g_derivative(0.5, &p).unwrap();
        assert!(((fd - an) / an).abs() < 1e-6, "{fd} vs {an}");
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(g_inverse(2.0, &FamilyParams::gaussian(-1.0, 0.5)).unwrap(), 0.0);
        let p = FamilyParams::skew_t3(0.0, 1.0, 1.0, 4.0);
        assert!(g_inverse(0.0, &p).unwrap().abs() < 1e-14);
        let p = FamilyParams::skew_t3(1.5, 0.7, 2.3, 5.0);
        for &y0 in &[-3.0, -0.2, 1.5, 2.0, 6.0] {
            let x = g_forward(y0, &p).unwrap().value;
            assert!((g_inverse(x, &p).unwrap() - y0).abs() < 1e-9 * y0.abs().max(1.0));
        }
    }

    #[test]
    fn saturation_is_clamped_and_flagged() {
        let p = FamilyParams::gaussian(0.0, 1.0);
        assert!(!g_forward(50.0, &p).unwrap().saturated);
        let p = FamilyParams::skew_t3(0.0, 1.0, 1.0, 200.0);
        let g = g_forward(1e6, &p).unwrap();
        assert!(g.saturated);
        assert_eq!(g.value, NORMAL_CLAMP);
    }
}
