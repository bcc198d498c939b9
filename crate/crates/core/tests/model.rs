mod common;

use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::adaptive_simpson;
use sct::config::ModelConfig;
use sct::geometry::{LocationSet, Metric};
use sct::io::{load_model, save_model};
use sct::marginal::DistributionFamily;
use sct::model::{reference_noise, FittedModel};
use sct::synthetic::skewed_field;

fn small() -> ModelConfig {
    ModelConfig { d: 10, inducing: 16, max_iter: 60, tm_max_iter: 60, ..ModelConfig::default() }
}

fn iid(n: usize, l: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, l, |_, _| StandardNormal.sample(&mut rng))
}

#[test]
fn iid_normal_marginals_are_recovered() {
    let locs = LocationSet::planar_grid(4, 4);
    let data = iid(400, 16, 1);
    let cfg = ModelConfig {
        family: DistributionFamily::Gaussian,
        use_h: false,
        standardize: false,
        ..small()
    };
    let (m, _) = FittedModel::fit(&data, &locs, &cfg).unwrap();
    for i in 0..16 {
        let p = m.marginal.params(i).unwrap();
        assert!(p.mu.abs() < 0.2, "mu {} at {i}", p.mu);
        assert!((p.sigma - 1.0).abs() < 0.15, "sigma {} at {i}", p.sigma);
    }
}

#[test]
fn single_location_density_integrates_to_one() {
    let locs = LocationSet::new(vec![[0.0, 0.0]], Metric::EuclideanPlane).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = DMatrix::from_fn(80, 1, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        2.0 + if z > 0.0 { 2.0 * z } else { 0.5 * z }
    });
    let (m, _) = FittedModel::fit(&data, &locs, &small()).unwrap();
    let f = |y: f64| m.log_density(&[y]).unwrap().exp();
    let mut total = 0.0;
    for k in -200..200 {
        total += adaptive_simpson(&f, k as f64, (k + 1) as f64, 1e-12);
    }
    assert_abs_diff_eq!(total, 1.0, epsilon = 1e-3);
}

#[test]
fn without_marginal_layer_pseudo_data_is_standardized_data() {
    let s = skewed_field(4, 4, 20, 2.0, 3).unwrap();
    let cfg = ModelConfig { use_g: false, ..small() };
    let (m, report) = FittedModel::fit(&s.data, &s.locations, &cfg).unwrap();
    assert!(report.stage1.is_none());
    let y: Vec<f64> = s.data.row(0).iter().copied().collect();
    let z = m.marginal_forward(&y).unwrap();
    for (zi, yi) in z.iter().zip(&y) {
        assert_eq!(*zi, m.preprocessing.apply(*yi));
    }
    let parts = m.log_density_parts(&y).unwrap();
    assert_eq!((parts.log_h, parts.log_g), (0.0, 0.0));
}

#[test]
fn fitting_is_deterministic() {
    let s = skewed_field(4, 4, 20, 2.0, 4).unwrap();
    let (a, _) = FittedModel::fit(&s.data, &s.locations, &small()).unwrap();
    let (b, _) = FittedModel::fit(&s.data, &s.locations, &small()).unwrap();
    let ra = a.log_score(&s.data, "train").unwrap();
    let rb = b.log_score(&s.data, "train").unwrap();
    assert_eq!(ra.log_densities, rb.log_densities);
    assert_eq!(a.sample(3, 9).unwrap(), b.sample(3, 9).unwrap());
}

#[test]
fn saved_model_scores_and_samples_identically() {
    let s = skewed_field(4, 4, 30, 2.0, 5).unwrap();
    let (m, _) = FittedModel::fit(&s.data, &s.locations, &small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sctm");
    save_model(&path, &m).unwrap();
    let back = load_model(&path).unwrap();
    let a = m.log_score(&s.data, "all").unwrap();
    let b = back.log_score(&s.data, "all").unwrap();
    for (x, y) in a.log_densities.iter().zip(&b.log_densities) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
    let noise = reference_noise(4, s.locations.len(), 7);
    let sa = m.sample_with_noise(&noise).unwrap();
    let sb = back.sample_with_noise(&noise).unwrap();
    assert!((sa - sb).abs().max() < 1e-12);
}

#[test]
fn samples_map_back_to_their_noise() {
    let s = skewed_field(4, 4, 30, 2.0, 6).unwrap();
    let (m, _) = FittedModel::fit(&s.data, &s.locations, &small()).unwrap();
    let report = m.roundtrip_check(Some(&s.data), 10, 1).unwrap();
    assert!(report.passes(1e-6, 1e-4), "{report:?}");
    assert_eq!(report.nonfinite_densities, 0);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let locs = LocationSet::planar_grid(3, 3);
    assert!(FittedModel::fit(&iid(10, 8, 0), &locs, &small()).is_err());
    let mut bad = iid(10, 9, 0);
    bad[(2, 3)] = f64::NAN;
    assert!(FittedModel::fit(&bad, &locs, &small()).is_err());
}
