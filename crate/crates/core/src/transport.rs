//! Triangular Bayesian transport map with conjugate Gaussian-process
//! inverse-gamma priors on each component `(f_i, d_i^2)`.
//!
//! Component `i` (in maximin order) regresses `z_i` on its nearest ordered
//! predecessors. Given the six hyperparameters, `d_i^2 ~ IG(alpha_i, beta_i)`
//! and `f_i | d_i^2 ~ GP(0, d_i^2 K_i)`, so the evidence and the posterior
//! predictive are multivariate-t.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, SctError};
use crate::geometry::{conditioning_sets, LocationSet, MaximinOrdering};
use crate::optim::{minimize, OptimizerSettings, TraceRecord};
use crate::special::{norm_cdf, norm_ppf_tails, t_cdf, t_logpdf, t_ppf, t_sf};

pub const TM_PARAM_NAMES: [&str; 6] =
    ["theta_d1", "theta_d2", "theta_q", "theta_gamma", "theta_sigma1", "theta_sigma2"];

/// Hard upper bound on conditioning-set size regardless of `theta_q`.
pub const MAX_NEIGHBORS_DEFAULT: usize = 30;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// `theta^T = (d1, d2, q, gamma, sigma1, sigma2)`, all unconstrained.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TmHyper {
    pub theta: [f64; 6],
}

impl TmHyper {
    pub fn new(theta: [f64; 6]) -> Self {
        TmHyper { theta }
    }

    pub fn d1(&self) -> f64 {
        self.theta[0]
    }
    pub fn d2(&self) -> f64 {
        self.theta[1]
    }
    pub fn q(&self) -> f64 {
        self.theta[2]
    }
    /// Log range of the Matérn part.
    pub fn log_range(&self) -> f64 {
        self.theta[3]
    }
    pub fn sigma1(&self) -> f64 {
        self.theta[4]
    }
    pub fn sigma2(&self) -> f64 {
        self.theta[5]
    }

    fn validate(&self) -> Result<()> {
        if self.theta.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SctError::domain(format!("transport hyperparameters must be finite, got {:?}", self.theta)))
        }
    }
}

/// Prior quantities of one map component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorQuantities {
    pub alpha: f64,
    pub beta: f64,
    /// `E(d_i^2)`.
    pub mean_d2: f64,
    /// Nonlinearity variance `sigma_i^2`.
    pub sigma2: f64,
}

pub fn prior_quantities(delta: f64, hyper: &TmHyper, g: f64) -> Result<PriorQuantities> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(SctError::domain(format!("delta must be positive, got {delta}")));
    }
    if !(g > 0.0 && g.is_finite()) {
        return Err(SctError::domain(format!("prior spread g must be positive, got {g}")));
    }
    let ld = delta.ln();
    let mean_d2 = (hyper.d1() + hyper.d2().exp() * ld).exp();
    let sigma2 = (hyper.sigma1() + hyper.sigma2().exp() * ld).exp();
    let alpha = 2.0 + 1.0 / (g * g);
    Ok(PriorQuantities { alpha, beta: mean_d2 * (alpha - 1.0), mean_d2, sigma2 })
}

/// Largest `j >= 1` with `exp(-j exp(theta_q)) >= eps`, floored at 1.
pub fn conditioning_cap(theta_q: f64, eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SctError::domain(format!("epsilon must lie in (0, 1), got {eps}")));
    }
    let rate = theta_q.exp();
    let bound = (1.0 / eps).ln() / rate;
    if !bound.is_finite() || bound > 1e6 {
        return Ok(1_000_000);
    }
    let mut j = bound.floor().max(1.0) as usize;
    // guard the floor against rounding in either direction
    while j > 1 && (-(j as f64) * rate).exp() < eps {
        j -= 1;
    }
    while (-((j + 1) as f64) * rate).exp() >= eps {
        j += 1;
    }
    Ok(j)
}

/// Everything the component kernel needs besides its two inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelContext {
    /// Diagonal of `Q_i`: `exp(-j exp(theta_q))`, `j = 1..=m`.
    pub q: Vec<f64>,
    pub sigma2: f64,
    pub mean_d2: f64,
    pub range: f64,
}

impl KernelContext {
    pub fn new(m: usize, hyper: &TmHyper, prior: &PriorQuantities) -> Self {
        let rate = hyper.q().exp();
        KernelContext {
            q: (1..=m).map(|j| (-(j as f64) * rate).exp()).collect(),
            sigma2: prior.sigma2,
            mean_d2: prior.mean_d2,
            range: hyper.log_range().exp(),
        }
    }
}

#[inline]
fn matern32(u: f64) -> f64 {
    let s = SQRT3 * u;
    (1.0 + s) * (-s).exp()
}

/// Component covariance between two conditioning vectors, both ordered by
/// increasing distance to the target location.
pub fn tm_kernel(x: &[f64], xp: &[f64], ctx: &KernelContext) -> f64 {
    let mut lin = 0.0;
    let mut r2 = 0.0;
    for ((&a, &b), &q) in x.iter().zip(xp).zip(&ctx.q) {
        lin += q * a * b;
        r2 += q * (a - b) * (a - b);
    }
    (lin + ctx.sigma2 * matern32(r2.sqrt() / ctx.range)) / ctx.mean_d2
}

/// Ordering plus the capped nearest-predecessor sets (as ordering positions).
#[derive(Clone, Debug, PartialEq)]
pub struct TransportStructure {
    ordering: MaximinOrdering,
    neighbors: Vec<Vec<usize>>,
    deltas: Vec<f64>,
}

impl TransportStructure {
    pub fn new(locs: &LocationSet, ordering: MaximinOrdering, m: usize) -> Result<Self> {
        if ordering.len() != locs.len() {
            return Err(SctError::validation("ordering and location set differ in length"));
        }
        let neighbors = conditioning_sets(&ordering, locs, m);
        Self::from_parts(ordering, neighbors)
    }

    pub fn from_parts(ordering: MaximinOrdering, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = ordering.len();
        if neighbors.len() != n {
            return Err(SctError::validation("one conditioning set per location is required"));
        }
        for (pos, c) in neighbors.iter().enumerate() {
            if c.iter().any(|&p| p >= pos) {
                return Err(SctError::validation(format!("conditioning set at position {pos} is not causal")));
            }
        }
        let first = ordering.min_dists.iter().cloned().fold(f64::NAN, f64::max);
        let first = if first.is_finite() { first } else { 1.0 };
        let deltas = (0..n).map(|p| ordering.delta(p).unwrap_or(first)).collect::<Vec<_>>();
        if let Some(bad) = deltas.iter().position(|d| !(*d > 0.0)) {
            return Err(SctError::domain(format!("nonpositive maximin distance at position {bad}")));
        }
        Ok(TransportStructure { ordering, neighbors, deltas })
    }

    pub fn ordering(&self) -> &MaximinOrdering {
        &self.ordering
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Conditioning set of ordering position `pos`, as ordering positions.
    pub fn neighbors(&self, pos: usize) -> &[usize] {
        &self.neighbors[pos]
    }

    /// `delta` used by the prior at `pos`; position 0 uses the largest observed delta.
    pub fn delta(&self, pos: usize) -> f64 {
        self.deltas[pos]
    }

    pub fn max_neighbors(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Original location index at ordering position `pos`.
    pub fn location(&self, pos: usize) -> usize {
        self.ordering.order[pos]
    }

    /// Training inputs for `pos`: an `N x m` matrix of predecessor columns.
    fn inputs(&self, z: &DMatrix<f64>, pos: usize) -> DMatrix<f64> {
        let c = &self.neighbors[pos];
        DMatrix::from_fn(z.nrows(), c.len(), |r, j| z[(r, self.location(c[j]))])
    }
}

fn gram(x: &DMatrix<f64>, ctx: &KernelContext) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|r| x.row(r).iter().cloned().collect()).collect();
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let v = tm_kernel(&rows[a], &rows[b], ctx);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    k
}

/// Log evidence of one component and, optionally, its gradient in `theta`.
pub fn component_evidence(
    y: &[f64],
    x: &DMatrix<f64>,
    delta: f64,
    hyper: &TmHyper,
    g: f64,
    want_grad: bool,
) -> Result<(f64, [f64; 6])> {
    let n = y.len();
    let m = x.ncols();
    let pq = prior_quantities(delta, hyper, g)?;
    let ctx = KernelContext::new(m, hyper, &pq);
    let k = if m == 0 { DMatrix::zeros(n, n) } else { gram(x, &ctx) };
    let gmat = &k + DMatrix::identity(n, n);
    let chol = Cholesky::<f64, Dyn>::new(gmat).ok_or_else(|| SctError::Conditioning {
        jitter: 0.0,
        context: format!("transport component Gram matrix, theta = {:?}", hyper.theta),
    })?;
    let yv = DVector::from_column_slice(y);
    let w = chol.solve(&yv);
    let quad = yv.dot(&w);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let (alpha, beta) = (pq.alpha, pq.beta);
    let alpha_post = alpha + 0.5 * n as f64;
    let beta_post = beta + 0.5 * quad;
    let ll = -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * logdet + alpha * beta.ln() - alpha_post * beta_post.ln()
        + ln_gamma(alpha_post)
        - ln_gamma(alpha);
    if !want_grad {
        return Ok((ll, [0.0; 6]));
    }

    let ld = delta.ln();
    let coef_beta = alpha / beta - alpha_post / beta_post;
    let mut grad = [0.0; 6];
    grad[0] = coef_beta * beta;
    grad[1] = coef_beta * beta * hyper.d2().exp() * ld;
    if m > 0 {
        // omega = (alpha~/beta~) w w^T - G^-1; dlogev = 1/2 <omega, dK> + coef_beta dbeta
        let ginv = chol.inverse();
        let scale = alpha_post / beta_post;
        let omega = DMatrix::from_fn(n, n, |a, b| scale * w[a] * w[b] - ginv[(a, b)]);
        let rate = hyper.q().exp();
        let dq: Vec<f64> = ctx.q.iter().enumerate().map(|(j, q)| -((j + 1) as f64) * rate * q).collect();
        let (mut s_k, mut s_p, mut s_gamma, mut s_q) = (0.0, 0.0, 0.0, 0.0);
        let gamma = ctx.range;
        for a in 0..n {
            for b in 0..n {
                let o = omega[(a, b)];
                let mut r2 = 0.0;
                let mut dlin = 0.0;
                let mut dr2 = 0.0;
                for j in 0..m {
                    let (xa, xb) = (x[(a, j)], x[(b, j)]);
                    let diff = xa - xb;
                    r2 += ctx.q[j] * diff * diff;
                    dlin += dq[j] * xa * xb;
                    dr2 += dq[j] * diff * diff;
                }
                let u = r2.sqrt() / gamma;
                let e = (-SQRT3 * u).exp();
                let rho = (1.0 + SQRT3 * u) * e;
                s_k += o * k[(a, b)];
                s_p += o * rho;
                s_gamma += o * 3.0 * u * u * e;
                s_q += o * (dlin - ctx.sigma2 * 3.0 * e * dr2 / (2.0 * gamma * gamma));
            }
        }
        let inv_e = 1.0 / ctx.mean_d2;
        grad[0] += -0.5 * s_k;
        grad[1] += -0.5 * s_k * hyper.d2().exp() * ld;
        grad[2] = 0.5 * s_q * inv_e;
        grad[3] = 0.5 * ctx.sigma2 * inv_e * s_gamma;
        grad[4] = 0.5 * ctx.sigma2 * inv_e * s_p;
        grad[5] = grad[4] * hyper.sigma2().exp() * ld;
    }
    Ok((ll, grad))
}

fn check_data(z: &DMatrix<f64>, structure: &TransportStructure) -> Result<()> {
    if z.ncols() != structure.len() {
        return Err(SctError::validation(format!(
            "pseudo-data has {} columns but the map has {} locations",
            z.ncols(),
            structure.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(SctError::validation("pseudo-data contains non-finite values"));
    }
    Ok(())
}

/// Per-component log evidence (and gradients), in ordering position order.
pub fn component_terms(
    z: &DMatrix<f64>,
    structure: &TransportStructure,
    hyper: &TmHyper,
    g: f64,
    want_grad: bool,
) -> Result<Vec<(f64, [f64; 6])>> {
    check_data(z, structure)?;
    hyper.validate()?;
    (0..structure.len())
        .into_par_iter()
        .map(|pos| {
            let y: Vec<f64> = z.column(structure.location(pos)).iter().cloned().collect();
            let x = structure.inputs(z, pos);
            component_evidence(&y, &x, structure.delta(pos), hyper, g, want_grad)
        })
        .collect()
}

/// Log marginal likelihood `ln p(Z | theta^T)`, summed over components in ordering order.
pub fn tm_marginal_loglik(z: &DMatrix<f64>, structure: &TransportStructure, hyper: &TmHyper, g: f64) -> Result<f64> {
    Ok(component_terms(z, structure, hyper, g, false)?.iter().map(|t| t.0).sum())
}

/// Log marginal likelihood and its gradient in `theta^T`.
pub fn tm_marginal_loglik_grad(
    z: &DMatrix<f64>,
    structure: &TransportStructure,
    hyper: &TmHyper,
    g: f64,
) -> Result<(f64, [f64; 6])> {
    let terms = component_terms(z, structure, hyper, g, true)?;
    let mut total = 0.0;
    let mut grad = [0.0; 6];
    for (v, gr) in &terms {
        total += v;
        for k in 0..6 {
            grad[k] += gr[k];
        }
    }
    Ok((total, grad))
}

/// Posterior predictive of one component at a new input: a location-scale t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Predictive {
    pub mean: f64,
    pub scale: f64,
    pub df: f64,
}

impl Predictive {
    pub fn logpdf(&self, v: f64) -> f64 {
        t_logpdf((v - self.mean) / self.scale, self.df) - self.scale.ln()
    }

    /// `Phi^-1(T((v - mean) / scale))`, clamped like the marginal layer.
    pub fn to_reference(&self, v: f64) -> f64 {
        let u = (v - self.mean) / self.scale;
        norm_ppf_tails(t_cdf(u, self.df), t_sf(u, self.df)).0
    }

    pub fn from_reference(&self, z: f64) -> f64 {
        let t = if z <= 0.0 { t_ppf(norm_cdf(z), self.df) } else { -t_ppf(norm_cdf(-z), self.df) };
        self.mean + self.scale * t
    }
}

#[derive(Clone, Debug)]
struct Component {
    ctx: KernelContext,
    inputs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    w: DVector<f64>,
    alpha_post: f64,
    beta_post: f64,
}

/// Fitted transport map: closed-form posterior given `theta^T` and training pseudo-data.
#[derive(Clone, Debug)]
pub struct TmPosterior {
    structure: TransportStructure,
    hyper: TmHyper,
    g: f64,
    train: DMatrix<f64>,
    components: Vec<Component>,
}

impl TmPosterior {
    /// Assembles the posterior from `N x L` training pseudo-data (columns in location order).
    pub fn new(train: DMatrix<f64>, structure: TransportStructure, hyper: TmHyper, g: f64) -> Result<Self> {
        check_data(&train, &structure)?;
        hyper.validate()?;
        if train.nrows() < 1 {
            return Err(SctError::validation("transport posterior needs at least one training row"));
        }
        let n = train.nrows();
        let components = (0..structure.len())
            .into_par_iter()
            .map(|pos| -> Result<Component> {
                let x = structure.inputs(&train, pos);
                let m = x.ncols();
                let pq = prior_quantities(structure.delta(pos), &hyper, g)?;
                let ctx = KernelContext::new(m, &hyper, &pq);
                let k = if m == 0 { DMatrix::zeros(n, n) } else { gram(&x, &ctx) };
                let chol = Cholesky::<f64, Dyn>::new(k + DMatrix::identity(n, n)).ok_or_else(|| {
                    SctError::Conditioning { jitter: 0.0, context: format!("transport component at position {pos}") }
                })?;
                let y = DVector::from_iterator(n, train.column(structure.location(pos)).iter().cloned());
                let w = chol.solve(&y);
                let quad = y.dot(&w);
                Ok(Component {
                    inputs: (0..n).map(|r| x.row(r).iter().cloned().collect()).collect(),
                    ctx,
                    chol,
                    w,
                    alpha_post: pq.alpha + 0.5 * n as f64,
                    beta_post: pq.beta + 0.5 * quad,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TmPosterior { structure, hyper, g, train, components })
    }

    pub fn structure(&self) -> &TransportStructure {
        &self.structure
    }

    pub fn hyper(&self) -> &TmHyper {
        &self.hyper
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn training_data(&self) -> &DMatrix<f64> {
        &self.train
    }

    pub fn len(&self) -> usize {
        self.structure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structure.is_empty()
    }

    /// Predictive of the component at `pos`, reading predecessor values from `field`
    /// (indexed by original location).
    pub fn predictive(&self, pos: usize, field: &[f64]) -> Predictive {
        let comp = &self.components[pos];
        let c = self.structure.neighbors(pos);
        let xs: Vec<f64> = c.iter().map(|&p| field[self.structure.location(p)]).collect();
        let df = 2.0 * comp.alpha_post;
        let base = comp.beta_post / comp.alpha_post;
        if c.is_empty() {
            return Predictive { mean: 0.0, scale: base.sqrt(), df };
        }
        let n = comp.inputs.len();
        let kstar = DVector::from_iterator(n, comp.inputs.iter().map(|row| tm_kernel(row, &xs, &comp.ctx)));
        let kss = tm_kernel(&xs, &xs, &comp.ctx);
        let mean = kstar.dot(&comp.w);
        let v = comp.chol.l_dirty().solve_lower_triangular(&kstar).expect("nonsingular factor");
        let var = (1.0 + kss - v.dot(&v)).max(f64::MIN_POSITIVE);
        Predictive { mean, scale: (base * var).sqrt(), df }
    }

    fn check_field(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.len() {
            return Err(SctError::validation(format!(
                "field has {} entries but the map has {} locations",
                field.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Maps a pseudo-data field to the reference (standard normal) space.
    pub fn apply(&self, field: &[f64]) -> Result<Vec<f64>> {
        self.check_field(field)?;
        let mut out = vec![0.0; field.len()];
        for pos in 0..self.len() {
            let i = self.structure.location(pos);
            out[i] = self.predictive(pos, field).to_reference(field[i]);
        }
        Ok(out)
    }

    /// Inverse of [`TmPosterior::apply`], solved sequentially in maximin order.
    pub fn invert(&self, reference: &[f64]) -> Result<Vec<f64>> {
        self.check_field(reference)?;
        let mut out = vec![0.0; reference.len()];
        for pos in 0..self.len() {
            let i = self.structure.location(pos);
            out[i] = self.predictive(pos, &out).from_reference(reference[i]);
        }
        Ok(out)
    }

    /// Per-location posterior-predictive log densities (indexed by original location).
    pub fn log_density_terms(&self, field: &[f64]) -> Result<Vec<f64>> {
        self.check_field(field)?;
        let mut out = vec![0.0; field.len()];
        for pos in 0..self.len() {
            let i = self.structure.location(pos);
            out[i] = self.predictive(pos, field).logpdf(field[i]);
        }
        Ok(out)
    }

    /// Joint posterior-predictive log density of a pseudo-data field.
    pub fn log_density(&self, field: &[f64]) -> Result<f64> {
        let terms = self.log_density_terms(field)?;
        let mut total = 0.0;
        for pos in 0..self.len() {
            total += terms[self.structure.location(pos)];
        }
        Ok(total)
    }
}

/// Settings for empirical-Bayes fitting of `theta^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TmConfig {
    pub g: f64,
    pub epsilon: f64,
    pub max_neighbors: usize,
    pub optimizer: OptimizerSettings,
    /// Refits allowed when the fitted `theta_q` moves the conditioning cap by more than one.
    pub max_outer: usize,
    pub initial: TmHyper,
}

impl Default for TmConfig {
    fn default() -> Self {
        TmConfig {
            g: 4.0,
            epsilon: 0.01,
            max_neighbors: MAX_NEIGHBORS_DEFAULT,
            optimizer: OptimizerSettings { max_iter: 200, ..Default::default() },
            max_outer: 3,
            initial: TmHyper::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TmFit {
    pub posterior: TmPosterior,
    pub loglik: f64,
    pub trace: Vec<TraceRecord>,
    /// Conditioning cap used in each outer round.
    pub caps: Vec<usize>,
}

/// Maximizes the marginal likelihood over `theta^T` and assembles the posterior.
pub fn tm_fit(z: &DMatrix<f64>, locs: &LocationSet, ordering: &MaximinOrdering, config: &TmConfig) -> Result<TmFit> {
    if z.nrows() < 2 {
        return Err(SctError::validation(format!("transport fit needs at least 2 replicates, got {}", z.nrows())));
    }
    let scale = 1.0 / (z.nrows() * z.ncols()) as f64;
    let mut hyper = config.initial;
    let mut trace = Vec::new();
    let mut caps = Vec::new();
    let mut cap = conditioning_cap(hyper.q(), config.epsilon)?.min(config.max_neighbors);
    let mut structure;
    loop {
        caps.push(cap);
        structure = TransportStructure::new(locs, ordering.clone(), cap)?;
        let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let h = TmHyper::new(x.try_into().expect("six hyperparameters"));
            let (v, gr) = tm_marginal_loglik_grad(z, &structure, &h, config.g)?;
            Ok((-v * scale, gr.iter().map(|g| -g * scale).collect()))
        };
        let stage = format!("stage2.round{}", caps.len());
        let min = minimize(&objective, hyper.theta.to_vec(), &config.optimizer, None, &stage, &mut trace)?;
        hyper = TmHyper::new(min.x.as_slice().try_into().expect("six hyperparameters"));
        let next = conditioning_cap(hyper.q(), config.epsilon)?.min(config.max_neighbors);
        if next.abs_diff(cap) <= 1 || caps.len() >= config.max_outer.max(1) {
            break;
        }
        cap = next;
    }
    let loglik = tm_marginal_loglik(z, &structure, &hyper, config.g)?;
    let posterior = TmPosterior::new(z.clone(), structure, hyper, config.g)?;
    Ok(TmFit { posterior, loglik, trace, caps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::maximin_order;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, l: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, l, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn prior_quantity_examples() {
        let h = TmHyper::default();
        let p = prior_quantities(1.0, &h, 4.0).unwrap();
        assert_eq!(p.alpha, 2.0625);
        let p = prior_quantities(std::f64::consts::E, &h, 4.0).unwrap();
        assert!((p.mean_d2 - std::f64::consts::E).abs() < 1e-14);
        assert!((p.beta - p.mean_d2 * 1.0625).abs() < 1e-14);
        let flat = TmHyper::new([0.0, -800.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(prior_quantities(0.01, &flat, 4.0).unwrap().mean_d2, 1.0);
        assert!(prior_quantities(0.0, &h, 4.0).is_err());
    }

    #[test]
    fn cap_examples() {
        assert_eq!(conditioning_cap(0.0, 0.01).unwrap(), 4);
        assert_eq!(conditioning_cap(50.0, 0.01).unwrap(), 1);
        for tq in [-1.0, -0.3, 0.2, 0.9] {
            let m = conditioning_cap(tq, 0.01).unwrap();
            assert!((-(m as f64) * f64::exp(tq)).exp() >= 0.01);
            assert!((-((m + 1) as f64) * f64::exp(tq)).exp() < 0.01 || m == 1);
        }
    }

    #[test]
    fn kernel_examples() {
        let h = TmHyper::new([0.3, 0.1, -0.2, 0.4, -0.5, 0.2]);
        let pq = prior_quantities(0.7, &h, 4.0).unwrap();
        let ctx = KernelContext::new(3, &h, &pq);
        let zero = [0.0; 3];
        assert!((tm_kernel(&zero, &zero, &ctx) - pq.sigma2 / pq.mean_d2).abs() < 1e-15);
        let linear = KernelContext { sigma2: 0.0, ..ctx.clone() };
        let (a, b) = ([0.3, -1.0, 2.0], [1.1, 0.4, -0.7]);
        let expect: f64 = ctx.q.iter().zip(a.iter().zip(&b)).map(|(q, (x, y))| q * x * y).sum::<f64>() / pq.mean_d2;
        assert!((tm_kernel(&a, &b, &linear) - expect).abs() < 1e-15);
        assert!(ctx.q.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn evidence_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = DMatrix::from_fn(6, 3, |_, _| StandardNormal.sample(&mut rng));
        let h = TmHyper::new([0.2, -0.4, -0.3, 0.5, -0.2, 0.3]);
        let delta = 0.37;
        let (_, grad) = component_evidence(&y, &x, delta, &h, 4.0, true).unwrap();
        for k in 0..6 {
            let step = 1e-5;
            let mut hp = h;
            hp.theta[k] += step;
            let mut hm = h;
            hm.theta[k] -= step;
            let fd = (component_evidence(&y, &x, delta, &hp, 4.0, false).unwrap().0
                - component_evidence(&y, &x, delta, &hm, 4.0, false).unwrap().0)
                / (2.0 * step);
            assert!((grad[k] - fd).abs() < 1e-6 * fd.abs().max(1e-2), "{}: {} vs {}", TM_PARAM_NAMES[k], grad[k], fd);
        }
    }

    #[test]
    fn evidence_is_sum_of_components() {
        let locs = LocationSet::planar_grid(4, 4);
        let ord = maximin_order(&locs, 0).unwrap();
        let st = TransportStructure::new(&locs, ord, 3).unwrap();
        let z = noise(5, 16, 1);
        let h = TmHyper::new([0.1, 0.2, -0.1, 0.0, -0.5, 0.1]);
        let total = tm_marginal_loglik(&z, &st, &h, 4.0).unwrap();
        let mut sum = 0.0;
        for pos in 0..16 {
            let y: Vec<f64> = z.column(st.location(pos)).iter().cloned().collect();
            sum += component_evidence(&y, &st.inputs(&z, pos), st.delta(pos), &h, 4.0, false).unwrap().0;
        }
        assert!((total - sum).abs() < 1e-10);
    }

    #[test]
    fn apply_invert_round_trip_and_triangularity() {
        let locs = LocationSet::planar_grid(5, 4);
        let ord = maximin_order(&locs, 0).unwrap();
        let st = TransportStructure::new(&locs, ord, 4).unwrap();
        let train = noise(8, 20, 2);
        let post = TmPosterior::new(train, st, TmHyper::new([0.0, 0.3, -0.5, 0.2, 0.0, 0.2]), 4.0).unwrap();
        let field: Vec<f64> = noise(1, 20, 9).iter().cloned().collect();
        let z = post.apply(&field).unwrap();
        let back = post.invert(&z).unwrap();
        for (a, b) in field.iter().zip(&back) {
            assert!((a - b).abs() < 1e-8);
        }
        // perturbing the last-ordered location changes only its own output
        let last = post.structure().location(19);
        let mut f2 = field.clone();
        f2[last] += 0.3;
        let z2 = post.apply(&f2).unwrap();
        for i in 0..20 {
            if i == last {
                assert!(z2[i] > z[i]);
            } else {
                assert_eq!(z2[i], z[i]);
            }
        }
        // zero noise gives the conditional medians
        let med = post.invert(&vec![0.0; 20]).unwrap();
        for pos in 0..20 {
            let i = post.structure().location(pos);
            assert!((med[i] - post.predictive(pos, &med).mean).abs() < 1e-12);
        }
    }

    #[test]
    fn inversion_ignores_training_row_order() {
        let locs = LocationSet::planar_grid(3, 3);
        let ord = maximin_order(&locs, 0).unwrap();
        let st = TransportStructure::new(&locs, ord, 3).unwrap();
        let train = noise(6, 9, 4);
        let mut flipped = train.clone();
        for r in 0..6 {
            flipped.set_row(r, &train.row(5 - r));
        }
        let h = TmHyper::new([0.1, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let a = TmPosterior::new(train, st.clone(), h, 4.0).unwrap();
        let b = TmPosterior::new(flipped, st, h, 4.0).unwrap();
        let zs: Vec<f64> = noise(1, 9, 5).iter().cloned().collect();
        let (xa, xb) = (a.invert(&zs).unwrap(), b.invert(&zs).unwrap());
        for (u, v) in xa.iter().zip(&xb) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn minimal_fit_completes() {
        let locs = LocationSet::planar_grid(3, 2);
        let ord = maximin_order(&locs, 0).unwrap();
        let fit = tm_fit(&noise(2, 6, 6), &locs, &ord, &TmConfig::default()).unwrap();
        assert!(fit.loglik.is_finite());
        assert!(tm_fit(&noise(1, 6, 6), &locs, &ord, &TmConfig::default()).is_err());
    }
}
