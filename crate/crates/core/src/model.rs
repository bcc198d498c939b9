//! The fitted composite model `T o H o G` with sampling, density evaluation and scoring.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{Result, SctError};
use crate::estimation::{ordering_for, stage1_fit, stage2_fit, MarginalFields, Stage1Fit};
use crate::geometry::{LocationSet, MaximinOrdering};
use crate::marginal::{g_inverse_unchecked, point_eval, DistributionFamily, FamilyParams};
use crate::onion::{h_derivative, h_forward, KnotGrid, OnionCoefficients, OnionInverter, SplineEvalTable};
use crate::optim::TraceRecord;
use crate::transport::TmPosterior;

/// Global affine standardization `(y - mean) / sd` applied before fitting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocessing {
    pub mean: f64,
    pub sd: f64,
}

impl Preprocessing {
    pub fn identity() -> Self {
        Preprocessing { mean: 0.0, sd: 1.0 }
    }

    /// Pooled mean and SD over every replicate and location.
    pub fn from_data(data: &DMatrix<f64>) -> Result<Self> {
        let n = data.len() as f64;
        if data.is_empty() {
            return Err(SctError::validation("cannot standardize an empty ensemble"));
        }
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(SctError::validation("ensemble has zero or non-finite spread; cannot standardize"));
        }
        Ok(Preprocessing { mean, sd })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn undo(&self, v: f64) -> f64 {
        self.mean + self.sd * v
    }
}

/// Frozen marginal layers `H o G` at every location.
#[derive(Clone, Debug)]
pub struct MarginalLayer {
    family: DistributionFamily,
    use_g: bool,
    fields: MarginalFields,
    knots: Option<KnotGrid>,
    params: Vec<FamilyParams>,
    coeffs: Vec<OnionCoefficients>,
    table: Option<SplineEvalTable>,
}

/// One location's trip through the marginal layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalPoint {
    pub z: f64,
    pub log_h: f64,
    pub log_g: f64,
    pub saturated: bool,
}

impl MarginalLayer {
    /// Identity marginals (the nonlinear transport map alone).
    pub fn identity(l: usize) -> Self {
        MarginalLayer {
            family: DistributionFamily::Gaussian,
            use_g: false,
            fields: MarginalFields {
                zeta_raw: DMatrix::zeros(l, 0),
                shared_raw: Vec::new(),
                beta: None,
                zeta_hyper: Vec::new(),
                beta_hyper: None,
            },
            knots: None,
            params: Vec::new(),
            coeffs: Vec::new(),
            table: None,
        }
    }

    pub fn new(
        family: DistributionFamily,
        fields: MarginalFields,
        knots: Option<KnotGrid>,
        table_size: usize,
    ) -> Result<Self> {
        let l = fields.zeta_raw.nrows();
        if fields.zeta_raw.ncols() != family.local_count() || fields.shared_raw.len() != family.shared_count() {
            return Err(SctError::validation(format!("parameter fields do not match the {family} family")));
        }
        let params = (0..l)
            .map(|i| {
                let local: Vec<f64> = fields.zeta_raw.row(i).iter().cloned().collect();
                let p = family.constrain(&local, &fields.shared_raw);
                p.validate().map_err(|e| SctError::validation(format!("location {i}: {e}")))?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let (coeffs, table) = match (&fields.beta, &knots) {
            (Some(beta), Some(k)) => {
                if beta.nrows() != l {
                    return Err(SctError::validation("spline coefficient rows do not match locations"));
                }
                let coeffs = (0..l)
                    .map(|i| {
                        let b: Vec<f64> = beta.row(i).iter().cloned().collect();
                        OnionCoefficients::from_beta(&b, k)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (coeffs, Some(SplineEvalTable::new(k, table_size)?))
            }
            (None, None) => (Vec::new(), None),
            _ => return Err(SctError::validation("spline coefficients and knots must be given together")),
        };
        Ok(MarginalLayer { family, use_g: true, fields, knots, params, coeffs, table })
    }

    pub fn family(&self) -> DistributionFamily {
        self.family
    }

    pub fn uses_g(&self) -> bool {
        self.use_g
    }

    pub fn uses_h(&self) -> bool {
        !self.coeffs.is_empty()
    }

    pub fn fields(&self) -> &MarginalFields {
        &self.fields
    }

    pub fn knots(&self) -> Option<&KnotGrid> {
        self.knots.as_ref()
    }

    pub fn table_size(&self) -> Option<usize> {
        self.table.as_ref().map(|t| t.size())
    }

    /// Constrained parametric-layer parameters at location `i`.
    pub fn params(&self, i: usize) -> Option<FamilyParams> {
        self.params.get(i).copied()
    }

    pub fn spline(&self, i: usize) -> Option<&OnionCoefficients> {
        self.coeffs.get(i)
    }

    /// `H(G(y))` at location `i` with both log-Jacobians.
    pub fn forward(&self, i: usize, y: f64) -> MarginalPoint {
        if !self.use_g {
            return MarginalPoint { z: y, log_h: 0.0, log_g: 0.0, saturated: false };
        }
        let pe = point_eval(y, &self.params[i]);
        let (z, log_h) = match (self.coeffs.get(i), &self.knots) {
            (Some(c), Some(k)) => (h_forward(pe.g, c, k), h_derivative(pe.g, c, k).ln()),
            _ => (pe.g, 0.0),
        };
        MarginalPoint { z, log_h, log_g: pe.log_gprime, saturated: pe.saturated }
    }

    fn inverters(&self) -> Vec<OnionInverter<'_>> {
        match (&self.knots, &self.table) {
            (Some(k), Some(t)) => self.coeffs.iter().map(|c| OnionInverter::new(c, k, t)).collect(),
            _ => Vec::new(),
        }
    }

    fn inverse_with(&self, inverters: &[OnionInverter<'_>], i: usize, z: f64) -> Result<f64> {
        if !self.use_g {
            return Ok(z);
        }
        let x = match inverters.get(i) {
            Some(inv) => inv.invert(z)?,
            None => z,
        };
        Ok(g_inverse_unchecked(x, &self.params[i]))
    }

    /// `G^-1(H^-1(z))` at location `i`.
    pub fn inverse(&self, i: usize, z: f64) -> Result<f64> {
        if !self.use_g {
            return Ok(z);
        }
        let x = match (self.coeffs.get(i), &self.knots, &self.table) {
            (Some(c), Some(k), Some(t)) => OnionInverter::new(c, k, t).invert(z)?,
            _ => z,
        };
        Ok(g_inverse_unchecked(x, &self.params[i]))
    }
}

/// Wall-clock seconds spent in each estimation stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timings {
    pub stage1: f64,
    pub stage2: f64,
}

/// A fitted scalable composite transformation.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub config: ModelConfig,
    pub fingerprint: String,
    pub locations: LocationSet,
    pub preprocessing: Preprocessing,
    pub marginal: MarginalLayer,
    pub transport: TmPosterior,
    pub timings: Timings,
}

/// Everything produced by [`FittedModel::fit`] besides the model itself.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub stage1: Option<Stage1Fit>,
    pub stage2_trace: Vec<TraceRecord>,
    pub stage2_loglik: f64,
    pub caps: Vec<usize>,
}

impl FitReport {
    /// All trace records, Stage 1 first.
    pub fn trace(&self) -> Vec<TraceRecord> {
        let mut out = self.stage1.as_ref().map(|s| s.trace.clone()).unwrap_or_default();
        out.extend(self.stage2_trace.iter().cloned());
        out
    }
}

/// Additive decomposition of a joint log density on the original data scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityParts {
    pub transport: f64,
    pub log_h: f64,
    pub log_g: f64,
    /// `-L ln sd` from the global standardization.
    pub preprocessing: f64,
    pub saturated: usize,
}

impl DensityParts {
    pub fn total(&self) -> f64 {
        self.transport + self.log_h + self.log_g + self.preprocessing
    }
}

/// Held-out log-score summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub split: String,
    /// Joint log density of each test replicate on the original scale.
    pub log_densities: Vec<f64>,
    /// Mean negative log score on the original scale (lower is better).
    pub mean_nls: f64,
    /// `L ln s`, already included in `mean_nls`.
    pub adjustment: f64,
    /// `sum_i ln s_i` for the same standardization (equal to `adjustment` under a global scale).
    pub sum_log_scales: f64,
    /// Observations whose Gaussianization hit the normal-quantile clamp.
    pub saturated: usize,
}

impl ScoreReport {
    /// Mean negative log score before undoing the standardization.
    pub fn standardized_nls(&self) -> f64 {
        self.mean_nls - self.adjustment
    }
}

/// `count x L` standard-normal reference noise, filled row by row from a seeded stream.
pub fn reference_noise(count: usize, l: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(count, l);
    for r in 0..count {
        for i in 0..l {
            out[(r, i)] = StandardNormal.sample(&mut rng);
        }
    }
    out
}

fn row(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().cloned().collect()
}

impl FittedModel {
    /// Runs both estimation stages on an `N x L` training ensemble (original scale).
    pub fn fit(data: &DMatrix<f64>, locations: &LocationSet, config: &ModelConfig) -> Result<(Self, FitReport)> {
        config.validate()?;
        if data.ncols() != locations.len() {
            return Err(SctError::validation(format!(
                "ensemble has {} columns but {} locations",
                data.ncols(),
                locations.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            let (r, i) = (k % data.nrows(), k / data.nrows());
            return Err(SctError::validation(format!("non-finite value at replicate {r}, location {i}")));
        }
        let preprocessing = if config.standardize { Preprocessing::from_data(data)? } else { Preprocessing::identity() };
        let std_data = data.map(|v| preprocessing.apply(v));
        let ordering: MaximinOrdering = ordering_for(locations, config)?;

        let (marginal, stage1, t1) = if config.use_g {
            let s1 = stage1_fit(&std_data, locations, &ordering, config)?;
            let layer = MarginalLayer::new(config.family, s1.fields.clone(), s1.knots.clone(), config.table_size)?;
            let t = s1.seconds;
            (layer, Some(s1), t)
        } else {
            (MarginalLayer::identity(locations.len()), None, 0.0)
        };

        let start = Instant::now();
        let mut pseudo = DMatrix::zeros(std_data.nrows(), std_data.ncols());
        for r in 0..std_data.nrows() {
            for i in 0..std_data.ncols() {
                pseudo[(r, i)] = marginal.forward(i, std_data[(r, i)]).z;
            }
        }
        let pseudo_seconds = start.elapsed().as_secs_f64();
        let (tm, t2) = stage2_fit(&pseudo, locations, &ordering, config)?;
        let model = FittedModel {
            config: config.clone(),
            fingerprint: config.fingerprint(),
            locations: locations.clone(),
            preprocessing,
            marginal,
            transport: tm.posterior,
            timings: Timings { stage1: t1, stage2: t2 + pseudo_seconds },
        };
        let report = FitReport { stage1, stage2_trace: tm.trace, stage2_loglik: tm.loglik, caps: tm.caps };
        Ok((model, report))
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.len() {
            return Err(SctError::validation(format!("field has {} values, model has {} locations", y.len(), self.len())));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(SctError::domain(format!("non-finite value at location {i}")));
        }
        Ok(())
    }

    /// Pseudo-data `H(G(y))` for an original-scale field.
    pub fn marginal_forward(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        Ok(y.iter().enumerate().map(|(i, &v)| self.marginal.forward(i, self.preprocessing.apply(v)).z).collect())
    }

    /// Full map to the reference space, `T(H(G(y)))`.
    pub fn forward(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.transport.apply(&self.marginal_forward(y)?)
    }

    /// Inverse of [`FittedModel::forward`].
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.len() {
            return Err(SctError::validation(format!("field has {} values, model has {} locations", z.len(), self.len())));
        }
        let inverters = self.marginal.inverters();
        self.inverse_with(&inverters, z)
    }

    fn inverse_with(&self, inverters: &[OnionInverter<'_>], z: &[f64]) -> Result<Vec<f64>> {
        let pseudo = self.transport.invert(z)?;
        pseudo
            .iter()
            .enumerate()
            .map(|(i, &v)| Ok(self.preprocessing.undo(self.marginal.inverse_with(inverters, i, v)?)))
            .collect()
    }

    /// Joint log density split into its layer contributions.
    pub fn log_density_parts(&self, y: &[f64]) -> Result<DensityParts> {
        self.check(y)?;
        let mut pseudo = Vec::with_capacity(y.len());
        let (mut log_h, mut log_g, mut saturated) = (0.0, 0.0, 0);
        for (i, &v) in y.iter().enumerate() {
            let p = self.marginal.forward(i, self.preprocessing.apply(v));
            pseudo.push(p.z);
            log_h += p.log_h;
            log_g += p.log_g;
            saturated += p.saturated as usize;
        }
        Ok(DensityParts {
            transport: self.transport.log_density(&pseudo)?,
            log_h,
            log_g,
            preprocessing: -(self.len() as f64) * self.preprocessing.sd.ln(),
            saturated,
        })
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        Ok(self.log_density_parts(y)?.total())
    }

    /// `count` new fields from a seeded reference stream.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        self.sample_with_noise(&reference_noise(count, self.len(), seed))
    }

    /// New fields from caller-supplied reference noise (one row per field).
    pub fn sample_with_noise(&self, noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if noise.ncols() != self.len() {
            return Err(SctError::validation(format!(
                "noise has {} columns, model has {} locations",
                noise.ncols(),
                self.len()
            )));
        }
        let inverters = self.marginal.inverters();
        let rows = (0..noise.nrows())
            .into_par_iter()
            .map(|r| {
                self.inverse_with(&inverters, &row(noise, r)).map_err(|e| match e {
                    SctError::Numerical(m) => SctError::numerical(format!("sample {r}: {m}")),
                    SctError::Domain(m) => SctError::domain(format!("sample {r}: {m}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(noise.nrows(), self.len(), |r, i| rows[r][i]))
    }

    /// Mean negative held-out log score over the rows of `test`.
    pub fn log_score(&self, test: &DMatrix<f64>, split: &str) -> Result<ScoreReport> {
        if test.nrows() == 0 {
            return Err(SctError::domain("log score needs at least one test replicate"));
        }
        let parts = (0..test.nrows())
            .into_par_iter()
            .map(|r| self.log_density_parts(&row(test, r)))
            .collect::<Result<Vec<_>>>()?;
        let log_densities: Vec<f64> = parts.iter().map(|p| p.total()).collect();
        let mean_nls = -log_densities.iter().sum::<f64>() / log_densities.len() as f64;
        let adjustment = self.len() as f64 * self.preprocessing.sd.ln();
        Ok(ScoreReport {
            split: split.to_string(),
            log_densities,
            mean_nls,
            adjustment,
            sum_log_scales: adjustment,
            saturated: parts.iter().map(|p| p.saturated).sum(),
        })
    }
}

/// Outcome of [`FittedModel::roundtrip_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoundtripReport {
    pub fields: usize,
    /// Largest `|T(H(G(y'))) - z|` with `y' = inverse(z)`.
    pub max_z_error: f64,
    /// Largest `|inverse(forward(y)) - y|` over the supplied fields.
    pub max_y_error: f64,
    /// Largest gap between the total log density and the sum of its layer terms.
    pub max_decomposition_error: f64,
    pub nonfinite_densities: usize,
}

impl RoundtripReport {
    pub fn passes(&self, z_tol: f64, y_tol: f64) -> bool {
        self.max_z_error <= z_tol
            && self.max_y_error <= y_tol
            && self.max_decomposition_error <= 1e-10
            && self.nonfinite_densities == 0
    }
}

impl FittedModel {
    /// Checks the invertibility invariants on `data` rows (if any) and on
    /// `samples` freshly generated fields.
    pub fn roundtrip_check(&self, data: Option<&DMatrix<f64>>, samples: usize, seed: u64) -> Result<RoundtripReport> {
        let mut rep = RoundtripReport {
            fields: 0,
            max_z_error: 0.0,
            max_y_error: 0.0,
            max_decomposition_error: 0.0,
            nonfinite_densities: 0,
        };
        let check = |y: &[f64], rep: &mut RoundtripReport| -> Result<()> {
            let z = self.forward(y)?;
            let y2 = self.inverse(&z)?;
            let z2 = self.forward(&y2)?;
            for i in 0..y.len() {
                rep.max_y_error = rep.max_y_error.max((y2[i] - y[i]).abs());
                rep.max_z_error = rep.max_z_error.max((z2[i] - z[i]).abs());
            }
            let parts = self.log_density_parts(y)?;
            let total = self.log_density(y)?;
            if !total.is_finite() {
                rep.nonfinite_densities += 1;
            }
            let sum = parts.transport + parts.log_h + parts.log_g + parts.preprocessing;
            rep.max_decomposition_error = rep.max_decomposition_error.max((sum - total).abs());
            rep.fields += 1;
            Ok(())
        };
        if let Some(d) = data {
            for r in 0..d.nrows() {
                check(&row(d, r), &mut rep)?;
            }
        }
        let generated = self.sample(samples, seed)?;
        for r in 0..generated.nrows() {
            let y = row(&generated, r);
            let before = rep.max_y_error;
            check(&y, &mut rep)?;
            // generated fields are checked in reference space only
            rep.max_y_error = before;
        }
        Ok(rep)
    }
}

/// Direction of an exceedance event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Above,
    Below,
}

impl std::str::FromStr for Direction {
    type Err = SctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "above" => Ok(Direction::Above),
            "below" => Ok(Direction::Below),
            other => Err(SctError::validation(format!("direction must be above or below, got {other:?}"))),
        }
    }
}

/// Per-location share of `samples` rows beyond `threshold`.
pub fn exceedance_map(samples: &DMatrix<f64>, threshold: f64, direction: Direction) -> Vec<f64> {
    let n = samples.nrows() as f64;
    samples
        .column_iter()
        .map(|c| {
            let hits = c
                .iter()
                .filter(|&&v| match direction {
                    Direction::Above => v > threshold,
                    Direction::Below => v < threshold,
                })
                .count();
            hits as f64 / n
        })
        .collect()
}

/// Pooled empirical quantile, linear between order statistics
/// (`h = (n - 1) p`).
pub fn global_quantile(values: &[f64], p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SctError::domain(format!("quantile level {p} outside [0, 1]")));
    }
    if values.is_empty() {
        return Err(SctError::domain("quantile of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}
