//! The onion spline: a strictly increasing cubic B-spline on `[k_1, k_m]`
//! that coincides with the identity outside the flexible region `[a, b]`.
//!
//! Knots are equidistant, `k_{-2} < ... < k_{m+3}` with `k_2 = a` and
//! `k_{m-1} = b`. The spline coefficients are cumulative sums of exponentiated
//! log-increments `gamma`; six of the increments and the intercept are pinned
//! so that level and slope match the identity at both ends, and the `D` free
//! increments are a normalized softmax of the unconstrained `beta`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SctError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    a: f64,
    b: f64,
    d: usize,
    k: f64,
    /// `knots[j + 2]` holds `k_j` for `j = -2 ..= m + 3`.
    knots: Vec<f64>,
}

impl KnotGrid {
    pub fn new(a: f64, b: f64, d: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(SctError::domain(format!("knot boundaries need a < b, got a={a}, b={b}")));
        }
        if d < 1 {
            return Err(SctError::domain("at least one free spline parameter is required"));
        }
        let m = d + 5;
        let k = (b - a) / (m as f64 - 3.0);
        let mut knots: Vec<f64> = (-2..=(m as i64 + 3)).map(|j| a + (j - 2) as f64 * k).collect();
        knots[4] = a;
        knots[m + 1] = b;
        Ok(KnotGrid { a, b, d, k, knots })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Number of free parameters `D`.
    pub fn free_params(&self) -> usize {
        self.d
    }

    /// Number of interior knots `m = D + 5`.
    pub fn interior(&self) -> usize {
        self.d + 5
    }

    /// Number of cubic basis functions `J = D + 7`.
    pub fn basis_count(&self) -> usize {
        self.d + 7
    }

    /// Knot spacing `k`.
    pub fn spacing(&self) -> f64 {
        self.k
    }

    /// Knot `k_j` for `j` in `-2 ..= m + 3`.
    pub fn knot(&self, j: i64) -> f64 {
        self.knots[(j + 2) as usize]
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Lower end `k_1` of the spline branch.
    pub fn lower(&self) -> f64 {
        self.knot(1)
    }

    /// Upper end `k_m` of the spline branch.
    pub fn upper(&self) -> f64 {
        self.knot(self.interior() as i64)
    }

    /// Segment index `s` (with `k_s <= x <= k_{s+1}`, `1 <= s <= m - 1`) for `x` in `[k_1, k_m]`.
    /// `x = k_m` belongs to the last segment.
    fn segment(&self, x: f64) -> usize {
        let m = self.interior();
        let raw = ((x - self.lower()) / self.k).floor();
        let mut s = if raw < 0.0 { 1 } else { (raw as usize + 1).min(m - 1) };
        // guard against rounding at segment edges
        while s > 1 && x < self.knot(s as i64) {
            s -= 1;
        }
        while s < m - 1 && x >= self.knot(s as i64 + 1) {
            s += 1;
        }
        s
    }
}

/// Cox-de Boor evaluation of the `p + 1` nonzero B-splines of degree `p` on knot span
/// `span` (array indexing, `u[span] <= x < u[span + 1]`). Entry `q` belongs to basis
/// `span - p + q`.
fn basis_funs(u: &[f64], span: usize, x: f64, p: usize, out: &mut [f64]) {
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    out[0] = 1.0;
    for j in 1..=p {
        left[j] = x - u[span + 1 - j];
        right[j] = u[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        out[j] = saved;
    }
}

/// Basis values needed to evaluate the spline and its first two derivatives at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalBasis {
    /// Segment `s`; cubic weights belong to `B_s .. B_{s+3}`.
    pub segment: usize,
    pub cubic: [f64; 4],
    /// Quadratic weights for `B^(2)_{s+1} .. B^(2)_{s+3}`.
    pub quad: [f64; 3],
    /// Derivatives of the quadratic weights.
    pub quad_deriv: [f64; 3],
}

impl LocalBasis {
    /// Exact Cox-de Boor evaluation at `x` in `[k_1, k_m]`.
    pub fn eval(knots: &KnotGrid, x: f64) -> Self {
        let s = knots.segment(x);
        let span = s + 2;
        let u = &knots.knots;
        let mut cubic = [0.0; 4];
        let mut quad = [0.0; 3];
        let mut lin = [0.0; 2];
        basis_funs(u, span, x, 3, &mut cubic);
        basis_funs(u, span, x, 2, &mut quad);
        basis_funs(u, span, x, 1, &mut lin);
        // dN_{r,2} = 2 N_{r,1}/(u_{r+2}-u_r) - 2 N_{r+1,1}/(u_{r+3}-u_{r+1}), r = span-2..span
        let lin_at = |r: usize| -> f64 {
            if r + 1 == span {
                lin[0]
            } else if r == span {
                lin[1]
            } else {
                0.0
            }
        };
        let mut quad_deriv = [0.0; 3];
        for (q, qd) in quad_deriv.iter_mut().enumerate() {
            let r = span - 2 + q;
            *qd = 2.0 * lin_at(r) / (u[r + 2] - u[r]) - 2.0 * lin_at(r + 1) / (u[r + 3] - u[r + 1]);
        }
        LocalBasis { segment: s, cubic, quad, quad_deriv }
    }
}

/// Derived coefficients of one onion spline.
#[derive(Clone, Debug, PartialEq)]
pub struct OnionCoefficients {
    beta: Vec<f64>,
    /// `gamma[j - 1]` holds `gamma_j`, `j = 1..=J`.
    gamma: Vec<f64>,
    exp_gamma: Vec<f64>,
    /// Control points `c_j = gamma_1 + sum_{l=2}^{j} exp(gamma_l)`.
    ctrl: Vec<f64>,
    /// Softmax of beta, needed for gradients.
    weights: Vec<f64>,
}

/// Maps unconstrained `beta` to the full log-increment vector `gamma` (length `J`).
pub fn gamma_from_beta(beta: &[f64], knots: &KnotGrid) -> Result<Vec<f64>> {
    Ok(OnionCoefficients::from_beta(beta, knots)?.gamma)
}

impl OnionCoefficients {
    pub fn from_beta(beta: &[f64], knots: &KnotGrid) -> Result<Self> {
        let d = knots.free_params();
        if beta.len() != d {
            return Err(SctError::domain(format!("expected {d} spline parameters, got {}", beta.len())));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(SctError::domain("non-finite spline parameter"));
        }
        Ok(Self::from_beta_unchecked(beta, knots))
    }

    pub(crate) fn from_beta_unchecked(beta: &[f64], knots: &KnotGrid) -> Self {
        let j_count = knots.basis_count();
        let m = knots.interior();
        let k = knots.spacing();
        let log_k = k.ln();
        let bmax = beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = beta.iter().map(|b| (b - bmax).exp()).sum();
        let lse = bmax + sum.ln();
        let shift = lse - ((m - 5) as f64 * k).ln();
        let weights: Vec<f64> = beta.iter().map(|b| (b - lse).exp()).collect();

        let mut gamma = vec![log_k; j_count];
        gamma[0] = knots.knot(0);
        for (d, b) in beta.iter().enumerate() {
            gamma[4 + d] = b - shift;
        }
        let exp_gamma: Vec<f64> = gamma.iter().map(|g| g.exp()).collect();
        let mut ctrl = vec![0.0; j_count];
        ctrl[0] = gamma[0];
        for j in 1..j_count {
            ctrl[j] = ctrl[j - 1] + exp_gamma[j];
        }
        OnionCoefficients { beta: beta.to_vec(), gamma, exp_gamma, ctrl, weights }
    }

    /// Identity spline (`beta = 0`).
    pub fn identity(knots: &KnotGrid) -> Self {
        Self::from_beta_unchecked(&vec![0.0; knots.free_params()], knots)
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn control_points(&self) -> &[f64] {
        &self.ctrl
    }

    fn value_at(&self, basis: &LocalBasis) -> f64 {
        let s = basis.segment;
        (0..4).map(|q| basis.cubic[q] * self.ctrl[s - 1 + q]).sum()
    }

    fn slope_at(&self, basis: &LocalBasis, k: f64) -> f64 {
        let s = basis.segment;
        (0..3).map(|q| basis.quad[q] * self.exp_gamma[s + q]).sum::<f64>() / k
    }

    fn curvature_at(&self, basis: &LocalBasis, k: f64) -> f64 {
        let s = basis.segment;
        (0..3).map(|q| basis.quad_deriv[q] * self.exp_gamma[s + q]).sum::<f64>() / k
    }
}

/// Raw spline branch on `[k_1, k_m]` (no identity short-cut).
pub fn spline_value(x: f64, coeffs: &OnionCoefficients, knots: &KnotGrid) -> f64 {
    coeffs.value_at(&LocalBasis::eval(knots, x))
}

/// Derivative of the raw spline branch on `[k_1, k_m]`.
pub fn spline_derivative(x: f64, coeffs: &OnionCoefficients, knots: &KnotGrid) -> f64 {
    coeffs.slope_at(&LocalBasis::eval(knots, x), knots.spacing())
}

/// Second derivative of the raw spline branch on `[k_1, k_m]`.
pub fn spline_second_derivative(x: f64, coeffs: &OnionCoefficients, knots: &KnotGrid) -> f64 {
    coeffs.curvature_at(&LocalBasis::eval(knots, x), knots.spacing())
}

#[inline]
fn in_flexible(x: f64, knots: &KnotGrid) -> bool {
    x > knots.a && x < knots.b
}

/// The onion transformation `H(x)`; exactly `x` outside `(a, b)`.
pub fn h_forward(x: f64, coeffs: &OnionCoefficients, knots: &KnotGrid) -> f64 {
    if in_flexible(x, knots) { spline_value(x, coeffs, knots) } else { x }
}

/// `H'(x)`; exactly 1 outside `(a, b)`.
pub fn h_derivative(x: f64, coeffs: &OnionCoefficients, knots: &KnotGrid) -> f64 {
    if in_flexible(x, knots) { spline_derivative(x, coeffs, knots) } else { 1.0 }
}

/// Value, first and second derivative of `H` plus the gradients of `H` and
/// `ln H'` with respect to `beta`, written into `dh` and `dlogslope`.
pub(crate) fn h_eval_with_grad(
    x: f64,
    coeffs: &OnionCoefficients,
    knots: &KnotGrid,
    dh: &mut [f64],
    dlogslope: &mut [f64],
) -> (f64, f64, f64) {
    dh.iter_mut().for_each(|v| *v = 0.0);
    dlogslope.iter_mut().for_each(|v| *v = 0.0);
    if !in_flexible(x, knots) {
        return (x, 1.0, 0.0);
    }
    let k = knots.spacing();
    let basis = LocalBasis::eval(knots, x);
    let s = basis.segment;
    let value = coeffs.value_at(&basis);
    let slope = coeffs.slope_at(&basis, k);
    let curv = coeffs.curvature_at(&basis, k);
    let d = knots.free_params();
    // gradients w.r.t. gamma_l for the free l = 5..=J-3 (0-based l-1 = 4..4+d)
    // dH/dgamma_l = exp(gamma_l) * sum_{j >= l} B_j(x)
    // dH'/dgamma_l = B2_l(x) exp(gamma_l) / k
    let mut gh_sum = 0.0;
    let mut gs_sum = 0.0;
    for dd in 0..d {
        let l = dd + 5; // 1-based gamma index
        let tail = if l <= s {
            1.0
        } else if l <= s + 3 {
            basis.cubic[(l - s)..].iter().sum()
        } else {
            0.0
        };
        let gh = coeffs.exp_gamma[l - 1] * tail;
        let gs = if l > s && l <= s + 3 {
            basis.quad[l - s - 1] * coeffs.exp_gamma[l - 1] / k
        } else {
            0.0
        };
        dh[dd] = gh;
        dlogslope[dd] = gs / slope;
        gh_sum += gh;
        gs_sum += gs / slope;
    }
    // chain through gamma_{d+4} = beta_d - lse(beta) + const
    for dd in 0..d {
        let w = coeffs.weights[dd];
        dh[dd] -= w * gh_sum;
        dlogslope[dd] -= w * gs_sum;
    }
    (value, slope, curv)
}

/// Regular grid on `[k_1, k_m]` with precomputed basis values.
#[derive(Clone, Debug)]
pub struct SplineEvalTable {
    lower: f64,
    step: f64,
    nodes: Vec<LocalBasis>,
}

impl SplineEvalTable {
    pub fn new(knots: &KnotGrid, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(SctError::domain("spline table needs at least two grid points"));
        }
        let lower = knots.lower();
        let upper = knots.upper();
        let step = (upper - lower) / (size - 1) as f64;
        let nodes = (0..size)
            .map(|g| {
                let x = if g + 1 == size { upper } else { lower + g as f64 * step };
                LocalBasis::eval(knots, x)
            })
            .collect();
        Ok(SplineEvalTable { lower, step, nodes })
    }

    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    pub fn abscissa(&self, g: usize) -> f64 {
        if g + 1 == self.nodes.len() {
            self.lower + self.step * (g as f64)
        } else {
            self.lower + g as f64 * self.step
        }
    }

    /// Spline values at every grid node for one coefficient set.
    pub fn node_values(&self, coeffs: &OnionCoefficients) -> Vec<f64> {
        self.nodes.iter().map(|b| coeffs.value_at(b)).collect()
    }

    /// Fast forward evaluation by linear interpolation between grid nodes.
    pub fn h_forward_fast(&self, x: f64, coeffs: &OnionCoefficients, knots: &KnotGrid) -> f64 {
        if !in_flexible(x, knots) {
            return x;
        }
        let pos = (x - self.lower) / self.step;
        let g = (pos.floor() as usize).min(self.nodes.len() - 2);
        let f = pos - g as f64;
        (1.0 - f) * coeffs.value_at(&self.nodes[g]) + f * coeffs.value_at(&self.nodes[g + 1])
    }
}

/// Per-spline inversion helper: caches node values so repeated inversions of the
/// same spline only pay for the bracketing search and Newton refinement.
#[derive(Clone, Debug)]
pub struct OnionInverter<'a> {
    coeffs: &'a OnionCoefficients,
    knots: &'a KnotGrid,
    table: &'a SplineEvalTable,
    node_values: Vec<f64>,
}

impl<'a> OnionInverter<'a> {
    pub fn new(coeffs: &'a OnionCoefficients, knots: &'a KnotGrid, table: &'a SplineEvalTable) -> Self {
        OnionInverter { coeffs, knots, table, node_values: table.node_values(coeffs) }
    }

    pub fn invert(&self, y: f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(SctError::domain("cannot invert a non-finite value"));
        }
        let knots = self.knots;
        if y <= knots.a || y >= knots.b {
            return Ok(y);
        }
        let vals = &self.node_values;
        // first node with value > y; the bracket is [g - 1, g]
        let g = vals.partition_point(|&v| v <= y).clamp(1, vals.len() - 1);
        let mut lo = self.table.abscissa(g - 1).max(knots.a);
        let mut hi = self.table.abscissa(g).min(knots.b);
        let (vlo, vhi) = (vals[g - 1], vals[g]);
        let mut x = if vhi > vlo { lo + (hi - lo) * (y - vlo) / (vhi - vlo) } else { 0.5 * (lo + hi) };
        x = x.clamp(lo, hi);
        let mut resid = f64::NAN;
        for _ in 0..100 {
            let basis = LocalBasis::eval(knots, x);
            let fx = self.coeffs.value_at(&basis) - y;
            resid = fx;
            if fx == 0.0 {
                return Ok(x);
            }
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let slope = self.coeffs.slope_at(&basis, knots.spacing());
            let mut next = x - fx / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-15 * (1.0 + x.abs()) {
                let basis = LocalBasis::eval(knots, next);
                resid = self.coeffs.value_at(&basis) - y;
                if resid.abs() <= 1e-8 {
                    return Ok(next);
                }
                break;
            }
            x = next;
        }
        if resid.abs() <= 1e-8 {
            return Ok(x);
        }
        Err(SctError::numerical(format!(
            "onion inverse did not converge for y={y}: bracket [{lo}, {hi}], residual {resid:e}"
        )))
    }
}

/// `H^{-1}(y)`; exactly `y` outside `[a, b]`.
pub fn h_inverse(
    y: f64,
    coeffs: &OnionCoefficients,
    knots: &KnotGrid,
    table: &SplineEvalTable,
) -> Result<f64> {
    OnionInverter::new(coeffs, knots, table).invert(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knot_examples() {
        let g = KnotGrid::new(-4.0, 4.0, 40).unwrap();
        assert_eq!(g.interior(), 45);
        assert_eq!(g.basis_count(), 47);
        assert!((g.spacing() - 8.0 / 42.0).abs() < 1e-15);

        let g = KnotGrid::new(0.0, 1.0, 1).unwrap();
        assert_eq!(g.interior(), 6);
        assert!((g.spacing() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.knot(2), 0.0);
        assert_eq!(g.knot(5), 1.0);

        let g = KnotGrid::new(-1.0, 1.0, 3).unwrap();
        assert_eq!(g.interior(), 8);
        assert!((g.spacing() - 0.4).abs() < 1e-15);
        assert_eq!(g.knots().len(), 14);
    }

    #[test]
    fn knot_errors() {
        assert!(matches!(KnotGrid::new(1.0, 1.0, 3), Err(SctError::Domain(_))));
        assert!(matches!(KnotGrid::new(0.0, 1.0, 0), Err(SctError::Domain(_))));
    }

    #[test]
    fn knots_equidistant() {
        let g = KnotGrid::new(-4.0, 4.0, 40).unwrap();
        for w in g.knots().windows(2) {
            assert!(((w[1] - w[0]) / g.spacing() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_examples() {
        let g = KnotGrid::new(-1.0, 1.0, 3).unwrap();
        let gam = gamma_from_beta(&[0.0; 3], &g).unwrap();
        for j in 4..7 {
            assert!((gam[j] - g.spacing().ln()).abs() < 1e-15);
        }
        let shifted = gamma_from_beta(&[17.3; 3], &g).unwrap();
        for (x, y) in gam.iter().zip(&shifted) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(gam[0], g.knot(0));
        assert!(gamma_from_beta(&[f64::NAN, 0.0, 0.0], &g).is_err());
    }

    #[test]
    fn gamma_hand_computed() {
        // D = 2 gives m = 7; with a = 0, b = 4 the spacing is k = 1.
        let g = KnotGrid::new(0.0, 4.0, 2).unwrap();
        assert_eq!(g.spacing(), 1.0);
        let gam = gamma_from_beta(&[2f64.ln(), 0.0], &g).unwrap();
        assert!((gam[4] - (2f64.ln() - 1.5f64.ln())).abs() < 1e-15);
        assert!((gam[5] + 1.5f64.ln()).abs() < 1e-15);
        assert!((gam[4].exp() + gam[5].exp() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_stable_for_huge_beta() {
        let g = KnotGrid::new(-4.0, 4.0, 5).unwrap();
        let gam = gamma_from_beta(&[700.0, -700.0, 699.0, 0.0, 650.0], &g).unwrap();
        assert!(gam.iter().all(|v| v.is_finite()));
        let sum: f64 = gam[4..9].iter().map(|v| v.exp()).sum();
        assert!((sum / (5.0 * g.spacing()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_cases() {
        let g = KnotGrid::new(-4.0, 4.0, 40).unwrap();
        let c = OnionCoefficients::identity(&g);
        for &x in &[-7.0, -4.0, -1.234, 0.0, 0.37, 3.9, 4.0, 12.0] {
            assert!((h_forward(x, &c, &g) - x).abs() < 1e-13);
            assert!((h_derivative(x, &c, &g) - 1.0).abs() < 1e-13);
        }
        let table = SplineEvalTable::new(&g, 1000).unwrap();
        assert!((h_inverse(0.37, &c, &g, &table).unwrap() - 0.37).abs() < 1e-12);
        let beta: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        let c = OnionCoefficients::from_beta(&beta, &g).unwrap();
        assert_eq!(h_inverse(9.0, &c, &g, &table).unwrap(), 9.0);
        assert_eq!(h_forward(-4.0, &c, &g), -4.0);
    }

    #[test]
    fn inverse_round_trip() {
        let g = KnotGrid::new(-4.0, 4.0, 12).unwrap();
        let table = SplineEvalTable::new(&g, 1000).unwrap();
        let beta: Vec<f64> = (0..12).map(|i| 2.0 * (i as f64 * 1.3).cos()).collect();
        let c = OnionCoefficients::from_beta(&beta, &g).unwrap();
        for i in 0..200 {
            let x0 = -3.99 + 7.98 * (i as f64) / 199.0;
            let y = h_forward(x0, &c, &g);
            let x = h_inverse(y, &c, &g, &table).unwrap();
            assert!((x - x0).abs() < 1e-8, "x0={x0} got {x}");
        }
    }

    #[test]
    fn table_fast_path_close_to_exact() {
        let g = KnotGrid::new(-4.0, 4.0, 10).unwrap();
        let table = SplineEvalTable::new(&g, 1000).unwrap();
        let beta: Vec<f64> = (0..10).map(|i| (i as f64).sqrt()).collect();
        let c = OnionCoefficients::from_beta(&beta, &g).unwrap();
        for i in 0..100 {
            let x = -4.5 + 9.0 * i as f64 / 99.0;
            assert!((table.h_forward_fast(x, &c, &g) - h_forward(x, &c, &g)).abs() < 1e-3);
        }
    }
}
