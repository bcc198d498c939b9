//! Spatial priors for the marginal layers: stationary kernels, the Brownian
//! covariance of the onion increments, and the whitened low-rank inducing-point
//! expansion `tau * R_Lu * L^-T * U` with its reverse-mode derivatives.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SctError};
use crate::geometry::LocationSet;
use crate::special::{softplus, softplus_grad};

/// Correlation function family used by the spatial GP priors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KernelKind {
    #[default]
    #[serde(rename = "matern-3/2")]
    Matern32,
    #[serde(rename = "matern-5/2")]
    Matern52,
    #[serde(rename = "squared-exponential")]
    SquaredExponential,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Matern32 => "matern-3/2",
            KernelKind::Matern52 => "matern-5/2",
            KernelKind::SquaredExponential => "squared-exponential",
        })
    }
}

impl FromStr for KernelKind {
    type Err = SctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matern-3/2" | "matern32" => Ok(KernelKind::Matern32),
            "matern-5/2" | "matern52" => Ok(KernelKind::Matern52),
            "squared-exponential" | "se" => Ok(KernelKind::SquaredExponential),
            other => Err(SctError::validation(format!("unknown kernel kind {other:?}"))),
        }
    }
}

impl KernelKind {
    /// Tag used by the binary model format.
    pub fn tag(self) -> u8 {
        match self {
            KernelKind::Matern32 => 0,
            KernelKind::Matern52 => 1,
            KernelKind::SquaredExponential => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(KernelKind::Matern32),
            1 => Some(KernelKind::Matern52),
            2 => Some(KernelKind::SquaredExponential),
            _ => None,
        }
    }

    /// Correlation at scaled distance `u = d / ell`.
    pub fn correlation(self, u: f64) -> f64 {
        match self {
            KernelKind::Matern32 => {
                let s = 3f64.sqrt() * u;
                (1.0 + s) * (-s).exp()
            }
            KernelKind::Matern52 => {
                let s = 5f64.sqrt() * u;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelKind::SquaredExponential => (-0.5 * u * u).exp(),
        }
    }

    /// Correlation and its derivative with respect to the length scale, at distance `d`.
    pub fn correlation_with_dlength(self, d: f64, ell: f64) -> (f64, f64) {
        let u = d / ell;
        match self {
            KernelKind::Matern32 => {
                let s = 3f64.sqrt() * u;
                let e = (-s).exp();
                ((1.0 + s) * e, 3.0 * u * u * e / ell)
            }
            KernelKind::Matern52 => {
                let s = 5f64.sqrt() * u;
                let e = (-s).exp();
                ((1.0 + s + s * s / 3.0) * e, 5.0 / 3.0 * u * u * (1.0 + s) * e / ell)
            }
            KernelKind::SquaredExponential => {
                let e = (-0.5 * u * u).exp();
                (e, u * u * e / ell)
            }
        }
    }
}

/// Stationary covariance `tau^2 * rho(d / ell)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    pub kind: KernelKind,
    pub amplitude: f64,
    pub length: f64,
}

impl Kernel {
    pub fn new(kind: KernelKind, amplitude: f64, length: f64) -> Result<Self> {
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(SctError::domain(format!("kernel amplitude must be positive, got {amplitude}")));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(SctError::domain(format!("kernel length scale must be positive, got {length}")));
        }
        Ok(Kernel { kind, amplitude, length })
    }

    pub fn covariance(&self, d: f64) -> f64 {
        self.amplitude * self.amplitude * self.kind.correlation(d / self.length)
    }

    /// Dense covariance matrix over all pairs of `locs`.
    pub fn gram(&self, locs: &LocationSet) -> DMatrix<f64> {
        let n = locs.len();
        DMatrix::from_fn(n, n, |i, j| self.covariance(locs.dist(i, j)))
    }
}

/// `S[r, c] = min(r, c)` (1-based), the covariance of a discrete Brownian motion.
pub fn brownian_cov(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |r, c| (r.min(c) + 1) as f64)
}

/// Lower-triangular matrix of ones with `W W^T = S`.
pub fn brownian_factor(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |r, c| if c <= r { 1.0 } else { 0.0 })
}

/// Right-multiplies every row of `m` by `W^T`: running sums along each row.
pub fn apply_brownian(m: &mut DMatrix<f64>) {
    for c in 1..m.ncols() {
        let (left, mut right) = m.columns_range_pair_mut(c - 1, c);
        right += &left;
    }
}

/// Adjoint of [`apply_brownian`]: reverse running sums along each row.
pub fn apply_brownian_adjoint(m: &mut DMatrix<f64>) {
    let d = m.ncols();
    for c in (0..d.saturating_sub(1)).rev() {
        let (mut left, right) = m.columns_range_pair_mut(c, c + 1);
        left += &right;
    }
}

pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factor of a correlation matrix, escalating diagonal jitter on failure.
pub fn cholesky_with_jitter(r: &DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, f64)> {
    for &j in JITTER_LADDER.iter() {
        let mut m = r.clone();
        if j > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += j;
            }
        }
        if let Some(ch) = Cholesky::<f64, Dyn>::new(m) {
            let l = ch.unpack();
            if l.iter().all(|v| v.is_finite()) {
                return Ok((l, j));
            }
        }
    }
    Err(SctError::Conditioning { jitter: JITTER_LADDER[JITTER_LADDER.len() - 1], context: context.to_string() })
}

/// The first `m` maximin-ordered locations, used as inducing points.
#[derive(Clone, Debug)]
pub struct InducingSet {
    indices: Vec<usize>,
    /// `L x M` distances from every location to every inducing location.
    dist_lu: DMatrix<f64>,
    /// `M x M` distances among inducing locations.
    dist_uu: DMatrix<f64>,
}

impl InducingSet {
    /// `indices` are original location indices, normally a maximin prefix.
    pub fn new(locs: &LocationSet, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() || indices.len() > locs.len() {
            return Err(SctError::validation(format!(
                "inducing count must be in 1..={}, got {}",
                locs.len(),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= locs.len()) {
            return Err(SctError::validation(format!("inducing index {bad} out of range")));
        }
        let m = indices.len();
        let dist_lu = DMatrix::from_fn(locs.len(), m, |i, k| locs.dist(i, indices[k]));
        let dist_uu = DMatrix::from_fn(m, m, |k, l| locs.dist(indices[k], indices[l]));
        Ok(InducingSet { indices: indices.to_vec(), dist_lu, dist_uu })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn locations(&self) -> usize {
        self.dist_lu.nrows()
    }
}

/// Kernel basis `R_Lu L^-T` for one correlation length, with the pieces kept
/// for reverse-mode differentiation in the length scale.
#[derive(Clone, Debug)]
pub struct LowRankBasis {
    kind: KernelKind,
    length: f64,
    chol: DMatrix<f64>,
    jitter: f64,
    r_lu: DMatrix<f64>,
    dr_lu: DMatrix<f64>,
    dr_uu: DMatrix<f64>,
}

impl LowRankBasis {
    pub fn new(inducing: &InducingSet, kind: KernelKind, length: f64) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(SctError::domain(format!("kernel length scale must be positive, got {length}")));
        }
        let (nl, m) = inducing.dist_lu.shape();
        let mut r_lu = DMatrix::zeros(nl, m);
        let mut dr_lu = DMatrix::zeros(nl, m);
        for k in 0..m {
            for i in 0..nl {
                let (r, dr) = kind.correlation_with_dlength(inducing.dist_lu[(i, k)], length);
                r_lu[(i, k)] = r;
                dr_lu[(i, k)] = dr;
            }
        }
        let mut r_uu = DMatrix::zeros(m, m);
        let mut dr_uu = DMatrix::zeros(m, m);
        for k in 0..m {
            for l in 0..m {
                let (r, dr) = kind.correlation_with_dlength(inducing.dist_uu[(k, l)], length);
                r_uu[(k, l)] = r;
                dr_uu[(k, l)] = dr;
            }
        }
        let context = format!("{kind} kernel, length scale {length:e}, {m} inducing points");
        let (chol, jitter) = cholesky_with_jitter(&r_uu, &context)?;
        Ok(LowRankBasis { kind, length, chol, jitter, r_lu, dr_lu, dr_uu })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L^-T U`.
    fn whitened_solve(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.tr_solve_lower_triangular(u).expect("triangular factor is nonsingular")
    }

    /// `tau * R_Lu * L^-T * U`, an `L x D` field.
    pub fn expand(&self, tau: f64, u: &DMatrix<f64>) -> DMatrix<f64> {
        let v = self.whitened_solve(u);
        (&self.r_lu * v) * tau
    }

    /// Reverse pass for [`LowRankBasis::expand`]: given `G = df/dfield`,
    /// returns `(df/dU, df/dtau, df/dlength)`.
    pub fn backprop(&self, tau: f64, u: &DMatrix<f64>, g: &DMatrix<f64>) -> (DMatrix<f64>, f64, f64) {
        let v = self.whitened_solve(u);
        let a = self.r_lu.tr_mul(g);
        let linv_a = self.chol.solve_lower_triangular(&a).expect("triangular factor is nonsingular");
        let grad_u = &linv_a * tau;
        let dtau = a.dot(&v);

        // d/dlength through R_Lu
        let gv = g * v.transpose();
        let direct = self.dr_lu.dot(&gv);
        // d/dlength through the Cholesky factor of R_uu
        let c = self.chol.tr_mul(&(&v * linv_a.transpose()));
        let m = c.nrows();
        let mut p = DMatrix::zeros(m, m);
        for j in 0..m {
            p[(j, j)] = 0.5 * c[(j, j)];
            for i in (j + 1)..m {
                p[(i, j)] = 0.5 * c[(i, j)];
                p[(j, i)] = 0.5 * c[(i, j)];
            }
        }
        let x = self.chol.tr_solve_lower_triangular(&p).expect("triangular factor is nonsingular");
        let y = self
            .chol
            .tr_solve_lower_triangular(&x.transpose())
            .expect("triangular factor is nonsingular")
            .transpose();
        let through_chol = self.dr_uu.dot(&y);
        (grad_u, dtau, tau * (direct - through_chol))
    }
}

/// Whitened Brownian-Kronecker expansion of the onion coefficients:
/// `beta = tau * R_Lu L^-T U W^T`.
pub fn expand_beta(u: &DMatrix<f64>, kernel: &Kernel, inducing: &InducingSet) -> Result<DMatrix<f64>> {
    if u.nrows() != inducing.len() {
        return Err(SctError::validation(format!(
            "U has {} rows but there are {} inducing points",
            u.nrows(),
            inducing.len()
        )));
    }
    let basis = LowRankBasis::new(inducing, kernel.kind, kernel.length)?;
    let mut beta = basis.expand(kernel.amplitude, u);
    apply_brownian(&mut beta);
    Ok(beta)
}

/// Whitened expansion of one parametric field, `tau * R_Lu L^-T u` (without intercept).
pub fn expand_zeta(u: &[f64], kernel: &Kernel, inducing: &InducingSet) -> Result<Vec<f64>> {
    if u.len() != inducing.len() {
        return Err(SctError::validation(format!(
            "u has {} entries but there are {} inducing points",
            u.len(),
            inducing.len()
        )));
    }
    let basis = LowRankBasis::new(inducing, kernel.kind, kernel.length)?;
    let field = basis.expand(kernel.amplitude, &DMatrix::from_column_slice(u.len(), 1, u));
    Ok(field.as_slice().to_vec())
}

/// Standard-normal log density of whitened coefficients.
pub fn whitened_logprior(u: &[f64]) -> f64 {
    -0.5 * u.iter().map(|v| v * v).sum::<f64>() - 0.5 * u.len() as f64 * (2.0 * PI).ln()
}

/// Softplus link for a positive hyperparameter: `(value, ln |d value / d eta|)`.
///
/// The prior on `eta` is flat, so nothing is added to the objective; the
/// log-derivative is returned for callers that want the implied density.
pub fn softplus_hyperlink(eta: f64) -> (f64, f64) {
    (softplus(eta), softplus_grad(eta).ln())
}

/// `ln N(beta; 0, tau2 * S)` evaluated with a dense Cholesky factorization.
pub fn onion_logprior_dense(beta: &[f64], tau2: f64) -> Result<f64> {
    if !(tau2 > 0.0 && tau2.is_finite()) {
        return Err(SctError::domain(format!("tau^2 must be positive, got {tau2}")));
    }
    let d = beta.len();
    let cov = brownian_cov(d) * tau2;
    let chol = Cholesky::new(cov).ok_or_else(|| SctError::numerical("Brownian covariance not positive definite"))?;
    let l = chol.l();
    let x = nalgebra::DVector::from_column_slice(beta);
    let w = l.solve_lower_triangular(&x).expect("triangular factor is nonsingular");
    let logdet: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * w.dot(&w) - 0.5 * logdet - 0.5 * d as f64 * (2.0 * PI).ln())
}

/// Same density through the random-walk increments `beta_1 ~ N(0, tau2)`,
/// `beta_d - beta_{d-1} ~ N(0, tau2)`.
pub fn onion_logprior_increments(beta: &[f64], tau2: f64) -> Result<f64> {
    if !(tau2 > 0.0 && tau2.is_finite()) {
        return Err(SctError::domain(format!("tau^2 must be positive, got {tau2}")));
    }
    let mut prev = 0.0;
    let mut acc = 0.0;
    for &b in beta {
        let inc = b - prev;
        acc += -0.5 * inc * inc / tau2 - 0.5 * (2.0 * PI * tau2).ln();
        prev = b;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{maximin_order, Metric};

    fn grid(n: usize) -> LocationSet {
        LocationSet::planar_grid(n, n)
    }

    #[test]
    fn brownian_factorization_is_exact() {
        for d in 1..=64 {
            let w = brownian_factor(d);
            assert_eq!(&w * w.transpose(), brownian_cov(d));
        }
        let s = brownian_cov(3);
        assert_eq!(s, DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 2.0, 3.0]));
    }

    #[test]
    fn brownian_application_matches_matrix() {
        let m0 = DMatrix::from_fn(3, 5, |i, j| (i * 7 + j * 3) as f64 * 0.1 - 0.4);
        let mut m = m0.clone();
        apply_brownian(&mut m);
        let w = brownian_factor(5);
        assert!((&m - &m0 * w.transpose()).norm() < 1e-14);
        let mut g = m0.clone();
        apply_brownian_adjoint(&mut g);
        assert!((&g - &m0 * &w).norm() < 1e-14);
    }

    #[test]
    fn whitened_logprior_values() {
        assert!((whitened_logprior(&[0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-15);
        let base = whitened_logprior(&[0.0, 0.0, 0.0]);
        assert!((whitened_logprior(&[1.0, 0.0, 0.0]) - (base - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn softplus_hyperlink_branches() {
        assert!((softplus_hyperlink(0.0).0 - 2f64.ln()).abs() < 1e-16);
        let (v, _) = softplus_hyperlink(-40.0);
        assert!(v > 0.0 && (v / (-40f64).exp() - 1.0).abs() < 1e-12);
        assert!((softplus_hyperlink(40.0).0 - 40.0).abs() < 1e-12);
    }

    #[test]
    fn onion_prior_two_forms_agree() {
        assert!((onion_logprior_dense(&[0.0], 1.0).unwrap() + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let beta = [0.3, -1.2, 0.8, 2.1, -0.4];
        for &t in &[0.1, 1.0, 7.5] {
            let a = onion_logprior_dense(&beta, t).unwrap();
            let b = onion_logprior_increments(&beta, t).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!(onion_logprior_dense(&beta, 0.0).is_err());
    }

    #[test]
    fn zero_coefficients_expand_to_zero() {
        let locs = grid(4);
        let ord = maximin_order(&locs, 0).unwrap();
        let ind = InducingSet::new(&locs, ord.prefix(5)).unwrap();
        let k = Kernel::new(KernelKind::Matern32, 1.3, 1.5).unwrap();
        let beta = expand_beta(&DMatrix::zeros(5, 3), &k, &ind).unwrap();
        assert!(beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_inducing_point_gives_scaled_kernel_column() {
        let locs = grid(3);
        let ind = InducingSet::new(&locs, &[4]).unwrap();
        let k = Kernel::new(KernelKind::Matern32, 2.0, 1.0).unwrap();
        let f = expand_zeta(&[0.5], &k, &ind).unwrap();
        for (i, v) in f.iter().enumerate() {
            let expect = 2.0 * 0.5 * KernelKind::Matern32.correlation(locs.dist(i, 4));
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn full_rank_covariance_matches_dense_gram() {
        let locs = LocationSet::new(
            (0..12).map(|i| [(i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.91).cos() * 2.0]).collect(),
            Metric::EuclideanPlane,
        )
        .unwrap();
        let ord = maximin_order(&locs, 0).unwrap();
        let ind = InducingSet::new(&locs, &ord.order).unwrap();
        let kernel = Kernel::new(KernelKind::Matern52, 0.7, 1.1).unwrap();
        let basis = LowRankBasis::new(&ind, kernel.kind, kernel.length).unwrap();
        let n = locs.len();
        let mut b = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = DMatrix::zeros(n, 1);
            e[(k, 0)] = 1.0;
            b.set_column(k, &basis.expand(kernel.amplitude, &e).column(0));
        }
        let implied = &b * b.transpose();
        let dense = kernel.gram(&locs);
        assert!((implied - &dense).norm() / dense.norm() < 1e-10);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let locs = grid(5);
        let ord = maximin_order(&locs, 0).unwrap();
        let ind = InducingSet::new(&locs, ord.prefix(7)).unwrap();
        let u = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j) as f64 * 0.77).sin());
        let g = DMatrix::from_fn(25, 3, |i, j| ((i + 5 * j) as f64 * 0.31).cos());
        for kind in [KernelKind::Matern32, KernelKind::Matern52, KernelKind::SquaredExponential] {
            let f = |tau: f64, ell: f64, u: &DMatrix<f64>| {
                LowRankBasis::new(&ind, kind, ell).unwrap().expand(tau, u).dot(&g)
            };
            let (tau, ell) = (1.4, 1.7);
            let basis = LowRankBasis::new(&ind, kind, ell).unwrap();
            let (gu, gt, gl) = basis.backprop(tau, &u, &g);
            let h = 1e-6;
            let fd_t = (f(tau + h, ell, &u) - f(tau - h, ell, &u)) / (2.0 * h);
            let fd_l = (f(tau, ell + h, &u) - f(tau, ell - h, &u)) / (2.0 * h);
            assert!((gt - fd_t).abs() < 1e-7 * fd_t.abs().max(1.0), "{kind}: {gt} vs {fd_t}");
            assert!((gl - fd_l).abs() < 1e-6 * fd_l.abs().max(1.0), "{kind}: {gl} vs {fd_l}");
            let mut up = u.clone();
            up[(2, 1)] += h;
            let mut um = u.clone();
            um[(2, 1)] -= h;
            let fd_u = (f(tau, ell, &up) - f(tau, ell, &um)) / (2.0 * h);
            assert!((gu[(2, 1)] - fd_u).abs() < 1e-7 * fd_u.abs().max(1.0));
        }
    }

    #[test]
    fn low_rank_deficit_shrinks_with_more_inducing_points() {
        let locs = grid(5);
        let ord = maximin_order(&locs, 0).unwrap();
        let kernel = Kernel::new(KernelKind::Matern32, 1.0, 2.0).unwrap();
        let dense = kernel.gram(&locs);
        let mut last = f64::INFINITY;
        for m in [1, 3, 6, 10, 15, 20, 25] {
            let ind = InducingSet::new(&locs, ord.prefix(m)).unwrap();
            let basis = LowRankBasis::new(&ind, kernel.kind, kernel.length).unwrap();
            let b = basis.expand(1.0, &DMatrix::identity(m, m));
            let deficit = &dense - &b * b.transpose();
            let min_eig = deficit.clone().symmetric_eigenvalues().min();
            assert!(min_eig > -1e-9, "deficit not PSD at M={m}: {min_eig}");
            let norm = deficit.norm();
            assert!(norm <= last + 1e-12, "M={m}: {norm} > {last}");
            last = norm;
        }
        assert!(last < 1e-8);
    }
}
