//! Synthetic skewed spatial fields: skew-t3 marginals over a Gaussian copula.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::geometry::LocationSet;
use crate::marginal::{g_inverse, FamilyParams};
use crate::priors::{cholesky_with_jitter, Kernel, KernelKind};

/// Generated ensemble with its true marginal parameters.
#[derive(Clone, Debug)]
pub struct SyntheticField {
    pub locations: LocationSet,
    /// `N x L`, one replicate per row.
    pub data: DMatrix<f64>,
    pub params: Vec<FamilyParams>,
    pub copula_length: f64,
}

/// Shared degrees of freedom of the generated marginals.
pub const SYNTHETIC_NU: f64 = 5.0;

/// True marginal parameters at grid cell `(x, y)` of an `nx x ny` grid.
pub fn synthetic_params(x: usize, y: usize, nx: usize, ny: usize) -> FamilyParams {
    let u = x as f64 / (nx.max(2) - 1) as f64;
    let v = y as f64 / (ny.max(2) - 1) as f64;
    let tau = std::f64::consts::TAU;
    let mu = 3.0 * (tau * u).sin() + 2.0 * v;
    let sigma = (0.6 * (tau * v).cos() + 0.4 * u).exp();
    let alpha = 1.5 + 1.5 * (0.5 * u + 0.5 * v);
    FamilyParams::skew_t3(mu, sigma, alpha, SYNTHETIC_NU)
}

/// `n` replicates on an `nx x ny` unit-spaced grid. Dependence is a Gaussian
/// copula with Matern-3/2 correlation at range `length`.
pub fn skewed_field(nx: usize, ny: usize, n: usize, length: f64, seed: u64) -> Result<SyntheticField> {
    let locations = LocationSet::planar_grid(nx, ny);
    let l = locations.len();
    let gram = Kernel::new(KernelKind::Matern32, 1.0, length)?.gram(&locations);
    let (chol, _) = cholesky_with_jitter(&gram, "synthetic copula")?;
    let params: Vec<FamilyParams> = (0..l).map(|i| synthetic_params(i % nx, i / nx, nx, ny)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = DMatrix::from_fn(l, n, |_, _| StandardNormal.sample(&mut rng));
    let z = &chol * white;
    let mut data = DMatrix::zeros(n, l);
    for r in 0..n {
        for i in 0..l {
            data[(r, i)] = g_inverse(z[(i, r)], &params[i])?;
        }
    }
    Ok(SyntheticField { locations, data, params, copula_length: length })
}
