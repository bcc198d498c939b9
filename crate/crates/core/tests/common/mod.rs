//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use sct::geometry::LocationSet;

/// Standard normal CDF from `erfc`.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 60)
}

/// Matern-3/2 correlation.
pub fn matern32(u: f64) -> f64 {
    let s = 3f64.sqrt() * u;
    (1.0 + s) * (-s).exp()
}

/// Transport-map component kernel written out from its definition.
pub struct TmOracle {
    pub theta: [f64; 6],
    pub g: f64,
    pub delta: f64,
}

impl TmOracle {
    pub fn mean_d2(&self) -> f64 {
        (self.theta[0] + self.theta[1].exp() * self.delta.ln()).exp()
    }

    pub fn alpha(&self) -> f64 {
        2.0 + 1.0 / (self.g * self.g)
    }

    pub fn beta(&self) -> f64 {
        self.mean_d2() * (self.alpha() - 1.0)
    }

    pub fn kernel(&self, x: &[f64], xp: &[f64]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        let sigma2 = (self.theta[4] + self.theta[5].exp() * self.delta.ln()).exp();
        let gamma = self.theta[3].exp();
        let mut lin = 0.0;
        let mut r2 = 0.0;
        for j in 0..x.len() {
            let q = (-((j + 1) as f64) * self.theta[2].exp()).exp();
            lin += q * x[j] * xp[j];
            r2 += q * (x[j] - xp[j]).powi(2);
        }
        (lin + sigma2 * matern32(r2.sqrt() / gamma)) / self.mean_d2()
    }

    /// `ln p(y)` with `y | d^2 ~ N(0, d^2 (K + I))`, `d^2 ~ IG(alpha, beta)`,
    /// by quadrature over `s = ln d^2`.
    pub fn log_evidence(&self, y: &[f64], x: &[Vec<f64>]) -> f64 {
        let n = y.len();
        let gmat = DMatrix::from_fn(n, n, |a, b| self.kernel(&x[a], &x[b]) + if a == b { 1.0 } else { 0.0 });
        let chol = gmat.cholesky().expect("positive definite");
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let yv = nalgebra::DVector::from_column_slice(y);
        let quad = yv.dot(&chol.solve(&yv));
        let (alpha, beta) = (self.alpha(), self.beta());
        let c = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet + alpha * beta.ln()
            - statrs::function::gamma::ln_gamma(alpha);
        let a_coef = 0.5 * n as f64 + alpha;
        let b_coef = 0.5 * quad + beta;
        let log_f = |s: f64| c - a_coef * s - b_coef * (-s).exp();
        let mode = (b_coef / a_coef).ln();
        let peak = log_f(mode);
        let f = |s: f64| (log_f(s) - peak).exp();
        let integral = adaptive_simpson(&f, mode - 12.0, mode + 60.0, 1e-13);
        peak + integral.ln()
    }
}

/// Brute-force maximin ordering: every step recomputes all minimum distances.
pub fn brute_force_maximin(locs: &LocationSet, first: usize) -> (Vec<usize>, Vec<f64>) {
    let n = locs.len();
    let mut order = vec![first];
    let mut dists = Vec::new();
    while order.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for cand in 0..n {
            if order.contains(&cand) {
                continue;
            }
            let d = order.iter().map(|&o| locs.dist(cand, o)).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((cand, d));
            }
        }
        let (c, d) = best.unwrap();
        order.push(c);
        dists.push(d);
    }
    (order, dists)
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    DMatrix::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
