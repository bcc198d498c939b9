//! Two-stage estimation. Stage 1 fits the marginal layers by MAP under working
//! independence, with every spatial field expanded from whitened inducing
//! coefficients; Stage 2 fits the transport-map hyperparameters by maximizing
//! the marginal likelihood of the Stage-1 pseudo-data.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{Result, SctError};
use crate::geometry::{maximin_order, LocationSet, MaximinOrdering};
use crate::marginal::{point_eval, DistributionFamily};
use crate::onion::{h_eval_with_grad, KnotGrid, OnionCoefficients};
use crate::optim::{minimize, Minimum, StopReason, TraceRecord};
use crate::priors::{apply_brownian, apply_brownian_adjoint, InducingSet, KernelKind, LowRankBasis};
use crate::special::{softplus, softplus_grad, softplus_inv, LN_SQRT_2PI};
use crate::transport::{tm_fit, TmFit};

/// Degrees of freedom used to start the shared skew-t parameter.
const NU_START: f64 = 10.0;

/// Positions of the parameter blocks inside the flat Stage-1 vector.
///
/// Per local parametric field `p`: `[c_p, eta_tau_p, eta_ell_p, u_p (M)]`,
/// then the shared raw parameters, then (with the spline layer)
/// `[eta_tau_H, eta_ell_H, U (M x D, column-major)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage1Layout {
    pub m: usize,
    pub d: usize,
    pub local: usize,
    pub shared: usize,
    pub use_h: bool,
}

impl Stage1Layout {
    fn block(&self) -> usize {
        3 + self.m
    }

    pub fn zeta_offset(&self, p: usize) -> usize {
        p * self.block()
    }

    pub fn shared_offset(&self) -> usize {
        self.local * self.block()
    }

    pub fn beta_offset(&self) -> usize {
        self.shared_offset() + self.shared
    }

    pub fn len(&self) -> usize {
        self.beta_offset() + if self.use_h { 2 + self.m * self.d } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable name of entry `k`, for diagnostics.
    pub fn name(&self, k: usize, family: DistributionFamily) -> String {
        let names = family.param_names();
        if k < self.shared_offset() {
            let p = k / self.block();
            let r = k % self.block();
            return match r {
                0 => format!("{}.intercept", names[p]),
                1 => format!("{}.eta_tau", names[p]),
                2 => format!("{}.eta_ell", names[p]),
                _ => format!("{}.u[{}]", names[p], r - 3),
            };
        }
        if k < self.beta_offset() {
            return format!("{}.raw", names[self.local + k - self.shared_offset()]);
        }
        match k - self.beta_offset() {
            0 => "beta.eta_tau".into(),
            1 => "beta.eta_ell".into(),
            r => {
                let r = r - 2;
                format!("beta.U[{},{}]", r % self.m, r / self.m)
            }
        }
    }
}

/// Spatial fields implied by a Stage-1 parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalFields {
    /// `L x P_local` raw (link-scale) parametric fields.
    pub zeta_raw: DMatrix<f64>,
    pub shared_raw: Vec<f64>,
    /// `L x D` spline coefficients, when the spline layer is active.
    pub beta: Option<DMatrix<f64>>,
    /// `(tau^2, ell)` per local parametric field.
    pub zeta_hyper: Vec<(f64, f64)>,
    pub beta_hyper: Option<(f64, f64)>,
}

/// Stage-1 log posterior over a fixed set of replicates.
pub struct Stage1Problem<'a> {
    family: DistributionFamily,
    knots: Option<KnotGrid>,
    data: &'a DMatrix<f64>,
    rows: Vec<usize>,
    inducing: InducingSet,
    zeta_kernel: KernelKind,
    beta_kernel: KernelKind,
    layout: Stage1Layout,
}

struct Expanded {
    fields: MarginalFields,
    zeta_bases: Vec<(LowRankBasis, f64)>,
    beta_basis: Option<(LowRankBasis, f64)>,
}

#[derive(Default)]
struct LocationGrad {
    ll: f64,
    local: Vec<f64>,
    shared: Vec<f64>,
    beta: Vec<f64>,
    saturated: usize,
}

fn amplitude(eta_tau: f64) -> (f64, f64) {
    // tau^2 = softplus(eta) so tau = sqrt(softplus(eta))
    let tau = softplus(eta_tau).sqrt();
    (tau, softplus_grad(eta_tau) / (2.0 * tau))
}

impl<'a> Stage1Problem<'a> {
    /// `data` is `N x L` (rows are replicates); only `rows` enter the likelihood.
    pub fn new(
        config: &ModelConfig,
        locs: &LocationSet,
        ordering: &MaximinOrdering,
        data: &'a DMatrix<f64>,
        rows: Vec<usize>,
    ) -> Result<Self> {
        if data.ncols() != locs.len() {
            return Err(SctError::validation(format!(
                "data has {} columns but there are {} locations",
                data.ncols(),
                locs.len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= data.nrows()) {
            return Err(SctError::validation(format!("replicate index {bad} out of range")));
        }
        let m = config.inducing.min(locs.len());
        let inducing = InducingSet::new(locs, ordering.prefix(m))?;
        let knots = if config.use_h { Some(KnotGrid::new(config.a, config.b, config.d)?) } else { None };
        let layout = Stage1Layout {
            m,
            d: config.d,
            local: config.family.local_count(),
            shared: config.family.shared_count(),
            use_h: config.use_h,
        };
        Ok(Stage1Problem {
            family: config.family,
            knots,
            data,
            rows,
            inducing,
            zeta_kernel: config.zeta_kernel,
            beta_kernel: config.beta_kernel,
            layout,
        })
    }

    pub fn layout(&self) -> Stage1Layout {
        self.layout
    }

    pub fn family(&self) -> DistributionFamily {
        self.family
    }

    pub fn knots(&self) -> Option<&KnotGrid> {
        self.knots.as_ref()
    }

    pub fn inducing(&self) -> &InducingSet {
        &self.inducing
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Observations entering the likelihood.
    pub fn observation_count(&self) -> usize {
        self.rows.len() * self.data.ncols()
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.len() {
            return Err(SctError::validation(format!(
                "parameter vector has {} entries, expected {}",
                x.len(),
                self.layout.len()
            )));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(SctError::numerical(format!(
                "non-finite parameter {}",
                self.layout.name(k, self.family)
            )));
        }
        Ok(())
    }

    fn expand(&self, x: &[f64]) -> Result<Expanded> {
        let lay = self.layout;
        let nl = self.data.ncols();
        let mut zeta_raw = DMatrix::zeros(nl, lay.local);
        let mut zeta_bases = Vec::with_capacity(lay.local);
        let mut zeta_hyper = Vec::with_capacity(lay.local);
        for p in 0..lay.local {
            let o = lay.zeta_offset(p);
            let (tau, _) = amplitude(x[o + 1]);
            let ell = softplus(x[o + 2]);
            let basis = LowRankBasis::new(&self.inducing, self.zeta_kernel, ell)?;
            let u = DMatrix::from_column_slice(lay.m, 1, &x[o + 3..o + 3 + lay.m]);
            let field = basis.expand(tau, &u);
            for i in 0..nl {
                zeta_raw[(i, p)] = x[o] + field[(i, 0)];
            }
            zeta_hyper.push((tau * tau, ell));
            zeta_bases.push((basis, tau));
        }
        let shared_raw = x[lay.shared_offset()..lay.beta_offset()].to_vec();
        let (beta, beta_basis, beta_hyper) = if lay.use_h {
            let o = lay.beta_offset();
            let (tau, _) = amplitude(x[o]);
            let ell = softplus(x[o + 1]);
            let basis = LowRankBasis::new(&self.inducing, self.beta_kernel, ell)?;
            let u = DMatrix::from_column_slice(lay.m, lay.d, &x[o + 2..o + 2 + lay.m * lay.d]);
            let mut beta = basis.expand(tau, &u);
            apply_brownian(&mut beta);
            (Some(beta), Some((basis, tau)), Some((tau * tau, ell)))
        } else {
            (None, None, None)
        };
        Ok(Expanded {
            fields: MarginalFields { zeta_raw, shared_raw, beta, zeta_hyper, beta_hyper },
            zeta_bases,
            beta_basis,
        })
    }

    /// Spatial fields at `x`.
    pub fn fields(&self, x: &[f64]) -> Result<MarginalFields> {
        self.check_len(x)?;
        Ok(self.expand(x)?.fields)
    }

    /// Log likelihood and raw-parameter gradients of one location over `rows`.
    fn location_terms(&self, fields: &MarginalFields, i: usize, rows: &[usize], want_grad: bool) -> LocationGrad {
        let lay = self.layout;
        let links = self.family.links();
        let local: Vec<f64> = fields.zeta_raw.row(i).iter().cloned().collect();
        let params = self.family.constrain(&local, &fields.shared_raw);
        let coeffs = match (&fields.beta, &self.knots) {
            (Some(beta), Some(knots)) => {
                let b: Vec<f64> = beta.row(i).iter().cloned().collect();
                Some(OnionCoefficients::from_beta_unchecked(&b, knots))
            }
            _ => None,
        };
        let np = self.family.param_count();
        let mut out = LocationGrad {
            local: vec![0.0; lay.local],
            shared: vec![0.0; lay.shared],
            beta: vec![0.0; if lay.use_h { lay.d } else { 0 }],
            ..Default::default()
        };
        let mut dconstrained = [0.0; 4];
        let mut dh = vec![0.0; lay.d];
        let mut dls = vec![0.0; lay.d];
        for &r in rows {
            let y = self.data[(r, i)];
            let pe = point_eval(y, &params);
            if pe.saturated {
                out.saturated += 1;
            }
            let x = pe.g;
            let (ll, dll_dx) = match (&coeffs, &self.knots) {
                (Some(c), Some(knots)) => {
                    let (h, slope, curv) = h_eval_with_grad(x, c, knots, &mut dh, &mut dls);
                    if want_grad {
                        for k in 0..lay.d {
                            out.beta[k] += -h * dh[k] + dls[k];
                        }
                    }
                    (-0.5 * h * h - LN_SQRT_2PI + slope.ln() + pe.log_gprime, -h * slope + curv / slope)
                }
                _ => (-0.5 * x * x - LN_SQRT_2PI + pe.log_gprime, -x),
            };
            out.ll += ll;
            if want_grad {
                for k in 0..np {
                    dconstrained[k] += dll_dx * pe.dg[k] + pe.dlog_gprime[k];
                }
            }
        }
        if want_grad {
            for k in 0..np {
                if k < lay.local {
                    out.local[k] = dconstrained[k] * links[k].grad(local[k]);
                } else {
                    let s = k - lay.local;
                    out.shared[s] = dconstrained[k] * links[k].grad(fields.shared_raw[s]);
                }
            }
        }
        out
    }

    /// Working-independence log likelihood over the given replicates (no prior).
    pub fn loglik(&self, x: &[f64], rows: &[usize]) -> Result<f64> {
        self.check_len(x)?;
        let ex = self.expand(x)?;
        let terms: Vec<f64> = (0..self.data.ncols())
            .into_par_iter()
            .map(|i| self.location_terms(&ex.fields, i, rows, false).ll)
            .collect();
        Ok(terms.iter().sum())
    }

    /// Log posterior (likelihood over the fitting replicates plus whitened
    /// log priors) and its gradient.
    pub fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.value_grad_counted(x).map(|(v, g, _)| (v, g))
    }

    /// As [`Stage1Problem::value_grad`], also returning the number of saturated observations.
    pub fn value_grad_counted(&self, x: &[f64]) -> Result<(f64, Vec<f64>, usize)> {
        self.check_len(x)?;
        let lay = self.layout;
        let nl = self.data.ncols();
        let ex = self.expand(x)?;
        let per_loc: Vec<LocationGrad> = (0..nl)
            .into_par_iter()
            .map(|i| self.location_terms(&ex.fields, i, &self.rows, true))
            .collect();

        let mut value = 0.0;
        let mut saturated = 0;
        let mut g_zeta = DMatrix::zeros(nl, lay.local);
        let mut g_beta = DMatrix::zeros(nl, if lay.use_h { lay.d } else { 0 });
        let mut grad = vec![0.0; lay.len()];
        for (i, t) in per_loc.iter().enumerate() {
            value += t.ll;
            saturated += t.saturated;
            for p in 0..lay.local {
                g_zeta[(i, p)] = t.local[p];
            }
            for s in 0..lay.shared {
                grad[lay.shared_offset() + s] += t.shared[s];
            }
            for k in 0..t.beta.len() {
                g_beta[(i, k)] = t.beta[k];
            }
        }
        if let Some(bad) = per_loc.iter().position(|t| !t.ll.is_finite()) {
            return Err(SctError::numerical(format!("non-finite log likelihood at location {bad}")));
        }

        for p in 0..lay.local {
            let o = lay.zeta_offset(p);
            let (basis, tau) = &ex.zeta_bases[p];
            let u = DMatrix::from_column_slice(lay.m, 1, &x[o + 3..o + 3 + lay.m]);
            let gcol = g_zeta.columns(p, 1).into_owned();
            let (gu, dtau, dell) = basis.backprop(*tau, &u, &gcol);
            grad[o] = gcol.sum();
            grad[o + 1] = dtau * amplitude(x[o + 1]).1;
            grad[o + 2] = dell * softplus_grad(x[o + 2]);
            for k in 0..lay.m {
                grad[o + 3 + k] = gu[(k, 0)] - u[(k, 0)];
                value -= 0.5 * u[(k, 0)] * u[(k, 0)];
            }
        }
        if let Some((basis, tau)) = &ex.beta_basis {
            let o = lay.beta_offset();
            let u = DMatrix::from_column_slice(lay.m, lay.d, &x[o + 2..o + 2 + lay.m * lay.d]);
            apply_brownian_adjoint(&mut g_beta);
            let (gu, dtau, dell) = basis.backprop(*tau, &u, &g_beta);
            grad[o] = dtau * amplitude(x[o]).1;
            grad[o + 1] = dell * softplus_grad(x[o + 1]);
            for (k, (gv, uv)) in gu.iter().zip(u.iter()).enumerate() {
                grad[o + 2 + k] = gv - uv;
                value -= 0.5 * uv * uv;
            }
        }
        if let Some(k) = grad.iter().position(|v| !v.is_finite()) {
            return Err(SctError::numerical(format!(
                "non-finite gradient in block {}",
                self.layout.name(k, self.family)
            )));
        }
        Ok((value, grad, saturated))
    }

    /// Initial parameter vector: per-location moment estimates projected onto
    /// the inducing basis, identity spline, unit amplitude and a length scale
    /// of a tenth of the domain diameter.
    pub fn initialize(&self, locs: &LocationSet) -> Result<Initialization> {
        let lay = self.layout;
        let nl = self.data.ncols();
        let n = self.rows.len() as f64;
        let global_sd = {
            let vals: Vec<f64> = self.rows.iter().flat_map(|&r| self.data.row(r).iter().cloned().collect::<Vec<_>>()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let floor = 1e-6 * if global_sd > 0.0 { global_sd } else { 1.0 };
        let mut flagged = Vec::new();
        let mut targets = DMatrix::zeros(nl, lay.local);
        for i in 0..nl {
            let vals: Vec<f64> = self.rows.iter().map(|&r| self.data[(r, i)]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let mut sd = var.sqrt();
            if !(sd > floor) {
                flagged.push(i);
                sd = floor;
            }
            let (mu, sigma) = match self.family {
                DistributionFamily::Gaussian => (mean, sd),
                DistributionFamily::SkewT3 => (mean, (sd * ((NU_START - 2.0) / NU_START).sqrt()).max(floor)),
            };
            targets[(i, 0)] = mu;
            targets[(i, 1)] = softplus_inv(sigma);
            if lay.local > 2 {
                targets[(i, 2)] = softplus_inv(1.0);
            }
        }
        let diameter = locs.diameter();
        let ell0 = if diameter > 0.0 { 0.1 * diameter } else { 1.0 };
        let eta_tau0 = softplus_inv(1.0);
        let eta_ell0 = softplus_inv(ell0);
        let mut x = vec![0.0; lay.len()];
        let basis = LowRankBasis::new(&self.inducing, self.zeta_kernel, ell0)?;
        let a = basis.expand(1.0, &DMatrix::identity(lay.m, lay.m));
        let svd = a.svd(true, true);
        for p in 0..lay.local {
            let o = lay.zeta_offset(p);
            let col = targets.column(p);
            let intercept = col.mean();
            let centered = DMatrix::from_fn(nl, 1, |i, _| col[i] - intercept);
            let u = svd.solve(&centered, 1e-12).map_err(|e| SctError::numerical(format!("initial projection: {e}")))?;
            x[o] = intercept;
            x[o + 1] = eta_tau0;
            x[o + 2] = eta_ell0;
            x[o + 3..o + 3 + lay.m].copy_from_slice(u.as_slice());
        }
        if lay.shared > 0 {
            x[lay.shared_offset()] = softplus_inv(NU_START);
        }
        if lay.use_h {
            let o = lay.beta_offset();
            x[o] = eta_tau0;
            x[o + 1] = eta_ell0;
        }
        Ok(Initialization { x, flagged, sigma_floor: floor })
    }
}

#[derive(Clone, Debug)]
pub struct Initialization {
    pub x: Vec<f64>,
    /// Locations whose sample spread fell below the floor.
    pub flagged: Vec<usize>,
    pub sigma_floor: f64,
}

/// Outcome of the marginal stage.
#[derive(Clone, Debug)]
pub struct Stage1Fit {
    pub family: DistributionFamily,
    pub knots: Option<KnotGrid>,
    pub fields: MarginalFields,
    pub params: Vec<f64>,
    pub layout: Stage1Layout,
    /// Log posterior at the starting point (higher is better).
    pub initial_objective: f64,
    /// Log posterior at the returned parameters.
    pub final_objective: f64,
    pub iterations: u64,
    pub stop: StopReason,
    pub trace: Vec<TraceRecord>,
    pub flagged: Vec<usize>,
    pub saturated: usize,
    pub fit_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    pub seconds: f64,
}

/// Splits replicate indices into (fit, validation) with a seeded shuffle.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    seeded_split(n, fraction, seed ^ 0x5EED_0001)
}

/// Splits replicate indices into (train, test) for held-out scoring.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    seeded_split(n, fraction, seed ^ 0x7E57_0002)
}

fn seeded_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let nv = ((fraction * n as f64).round() as usize).max(1);
    if fraction <= 0.0 || n < nv + 2 {
        return (idx, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut val = idx.split_off(n - nv);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// MAP estimation of the marginal layers on standardized `N x L` data.
pub fn stage1_fit(
    data: &DMatrix<f64>,
    locs: &LocationSet,
    ordering: &MaximinOrdering,
    config: &ModelConfig,
) -> Result<Stage1Fit> {
    config.validate()?;
    if data.nrows() < 2 {
        return Err(SctError::validation(format!("need at least 2 replicates, got {}", data.nrows())));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SctError::validation("training data contains non-finite values"));
    }
    let start = Instant::now();
    let (fit_rows, validation_rows) = validation_split(data.nrows(), config.validation_fraction, config.seed);
    let problem = Stage1Problem::new(config, locs, ordering, data, fit_rows.clone())?;
    let init = problem.initialize(locs)?;
    let scale = 1.0 / problem.observation_count() as f64;
    let (v0, _) = problem.value_grad(&init.x).map_err(|e| match e {
        SctError::Numerical(msg) => SctError::numerical(format!("initialization: {msg}")),
        other => other,
    })?;
    if !v0.is_finite() {
        return Err(SctError::numerical("initialization: objective is not finite"));
    }
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = problem.value_grad(x)?;
        Ok((-v * scale, g.iter().map(|g| -g * scale).collect()))
    };
    let vscale = if validation_rows.is_empty() { 0.0 } else { 1.0 / (validation_rows.len() * data.ncols()) as f64 };
    let validation = |x: &[f64]| -> Result<f64> { Ok(-problem.loglik(x, &validation_rows)? * vscale) };
    let mut trace = Vec::new();
    let min: Minimum = minimize(
        &objective,
        init.x.clone(),
        &config.stage1_optimizer(),
        if validation_rows.is_empty() { None } else { Some(&validation) },
        "stage1",
        &mut trace,
    )?;
    let (vfinal, _, saturated) = problem.value_grad_counted(&min.x)?;
    let fields = problem.fields(&min.x)?;
    Ok(Stage1Fit {
        family: config.family,
        knots: problem.knots().cloned(),
        fields,
        layout: problem.layout(),
        params: min.x,
        initial_objective: v0,
        final_objective: vfinal,
        iterations: min.iterations,
        stop: min.reason,
        trace,
        flagged: init.flagged,
        saturated,
        fit_rows,
        validation_rows,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Stage 2: pseudo-data from the frozen marginal layers, then the transport-map fit.
pub fn stage2_fit(
    pseudo: &DMatrix<f64>,
    locs: &LocationSet,
    ordering: &MaximinOrdering,
    config: &ModelConfig,
) -> Result<(TmFit, f64)> {
    let start = Instant::now();
    let fit = tm_fit(pseudo, locs, ordering, &config.tm_config())?;
    Ok((fit, start.elapsed().as_secs_f64()))
}

/// Maximin ordering starting at the configured first location.
pub fn ordering_for(locs: &LocationSet, config: &ModelConfig) -> Result<MaximinOrdering> {
    if config.first_location >= locs.len() {
        return Err(SctError::validation(format!(
            "first_location {} out of range for {} locations",
            config.first_location,
            locs.len()
        )));
    }
    maximin_order(locs, config.first_location)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets() {
        let lay = Stage1Layout { m: 4, d: 3, local: 3, shared: 1, use_h: true };
        assert_eq!(lay.shared_offset(), 21);
        assert_eq!(lay.beta_offset(), 22);
        assert_eq!(lay.len(), 22 + 2 + 12);
        assert_eq!(lay.name(0, DistributionFamily::SkewT3), "mu.intercept");
        assert_eq!(lay.name(21, DistributionFamily::SkewT3), "nu.raw");
        assert_eq!(lay.name(24 + 5, DistributionFamily::SkewT3), "beta.U[1,1]");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = validation_split(20, 0.2, 7);
        assert_eq!(b.len(), 4);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(validation_split(20, 0.2, 7), (a, b));
        assert_eq!(validation_split(3, 0.2, 1).1.len(), 1);
        assert!(validation_split(2, 0.2, 1).1.is_empty());
        assert!(validation_split(20, 0.0, 1).1.is_empty());
    }

    fn fd_check(config: &ModelConfig) {
        use rand::Rng;
        let locs = LocationSet::planar_grid(2, 2);
        let ordering = maximin_order(&locs, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let problem = Stage1Problem::new(config, &locs, &ordering, &data, vec![0, 1, 2]).unwrap();
        let init = problem.initialize(&locs).unwrap();
        let x: Vec<f64> = init.x.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        let (_, g) = problem.value_grad(&x).unwrap();
        for k in 0..x.len() {
            let h = 1e-5;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (problem.value_grad(&xp).unwrap().0 - problem.value_grad(&xm).unwrap().0) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()),
                "{}: analytic {} fd {}",
                problem.layout().name(k, config.family),
                g[k],
                fd
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let base = ModelConfig { d: 3, a: -2.0, b: 2.0, inducing: 3, ..ModelConfig::default() };
        fd_check(&base);
        fd_check(&ModelConfig { family: DistributionFamily::Gaussian, ..base.clone() });
        fd_check(&ModelConfig { use_h: false, ..base });
    }
}
