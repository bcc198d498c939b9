//! Model configuration: a flat TOML document with validated keys and defaults.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SctError};
use crate::marginal::DistributionFamily;
use crate::optim::{Algorithm, OptimizerSettings};
use crate::priors::KernelKind;
use crate::transport::{TmConfig, TmHyper, MAX_NEIGHBORS_DEFAULT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: DistributionFamily,
    /// Fit the parametric layer; when false both marginal layers are the identity.
    pub use_g: bool,
    pub use_h: bool,
    /// Free onion-spline parameters per location.
    pub d: usize,
    pub a: f64,
    pub b: f64,
    /// Inducing locations for the low-rank marginal priors.
    pub inducing: usize,
    pub zeta_kernel: KernelKind,
    pub beta_kernel: KernelKind,
    pub tm_prior_spread: f64,
    pub tm_epsilon: f64,
    pub tm_max_neighbors: usize,
    pub optimizer: Algorithm,
    pub max_iter: u64,
    pub tm_max_iter: u64,
    pub grad_tol: f64,
    pub patience: u64,
    pub lbfgs_memory: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub standardize: bool,
    pub first_location: usize,
    /// Grid size of the spline lookup table used for inversion.
    pub table_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: DistributionFamily::SkewT3,
            use_g: true,
            use_h: true,
            d: 40,
            a: -4.0,
            b: 4.0,
            inducing: 64,
            zeta_kernel: KernelKind::Matern32,
            beta_kernel: KernelKind::Matern32,
            tm_prior_spread: 4.0,
            tm_epsilon: 0.01,
            tm_max_neighbors: MAX_NEIGHBORS_DEFAULT,
            optimizer: Algorithm::QuasiNewton,
            max_iter: 500,
            tm_max_iter: 200,
            grad_tol: 1e-6,
            patience: 25,
            lbfgs_memory: 10,
            learning_rate: 0.02,
            validation_fraction: 0.2,
            test_fraction: 0.15,
            seed: 0,
            standardize: true,
            first_location: 0,
            table_size: 1000,
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| SctError::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SctError::validation(msg));
        if self.d < 1 {
            return fail(format!("d must be at least 1, got {}", self.d));
        }
        if !(self.a < self.b) || !self.a.is_finite() || !self.b.is_finite() {
            return fail(format!("need finite a < b, got a = {}, b = {}", self.a, self.b));
        }
        if self.inducing < 1 {
            return fail("inducing must be at least 1".into());
        }
        if !(self.tm_prior_spread > 0.0 && self.tm_prior_spread.is_finite()) {
            return fail(format!("tm_prior_spread must be positive, got {}", self.tm_prior_spread));
        }
        if !(self.tm_epsilon > 0.0 && self.tm_epsilon < 1.0) {
            return fail(format!("tm_epsilon must lie in (0, 1), got {}", self.tm_epsilon));
        }
        if self.tm_max_neighbors < 1 {
            return fail("tm_max_neighbors must be at least 1".into());
        }
        if !(self.grad_tol > 0.0) {
            return fail(format!("grad_tol must be positive, got {}", self.grad_tol));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.lbfgs_memory < 1 {
            return fail("lbfgs_memory must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if self.table_size < 2 {
            return fail("table_size must be at least 2".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage1_optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            algorithm: self.optimizer,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            patience: self.patience,
            lbfgs_memory: self.lbfgs_memory,
            learning_rate: self.learning_rate,
        }
    }

    pub fn tm_config(&self) -> TmConfig {
        TmConfig {
            g: self.tm_prior_spread,
            epsilon: self.tm_epsilon,
            max_neighbors: self.tm_max_neighbors,
            optimizer: OptimizerSettings { max_iter: self.tm_max_iter, ..self.stage1_optimizer() },
            max_outer: 3,
            initial: TmHyper::default(),
        }
    }

    /// Every key with its current value and a short description.
    pub fn explain(&self) -> String {
        let v: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        let mut out = String::new();
        for (key, note) in EXPLANATIONS {
            let value = v.get(*key).map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!("{key} = {value}\n    {note}\n"));
        }
        out
    }
}

const EXPLANATIONS: &[(&str, &str)] = &[
    ("family", "parametric marginal family: gaussian or skew-t3 (skew-t3 shares its degrees of freedom across locations)"),
    ("use_g", "fit the parametric layer; false fixes both marginal layers to the identity (nonlinear transport map only)"),
    ("use_h", "fit the onion-spline correction; false leaves only the parametric layer"),
    ("d", "free spline parameters per location; 40 is the reference setting"),
    ("a", "lower edge of the flexible region of the spline; identity below"),
    ("b", "upper edge of the flexible region of the spline; identity above"),
    ("inducing", "inducing locations for the low-rank spatial priors (64 regional, 256 global in reference runs)"),
    ("zeta_kernel", "correlation function of the spatial prior on the parametric fields"),
    ("beta_kernel", "correlation function of the spatial prior on the spline coefficients"),
    ("tm_prior_spread", "g: prior SD of d_i^2 relative to its mean; 4 gives a weak prior"),
    ("tm_epsilon", "conditioning sets keep neighbors j with exp(-j exp(theta_q)) >= epsilon"),
    ("tm_max_neighbors", "hard cap on conditioning-set size"),
    ("optimizer", "quasi-newton (L-BFGS) or first-order-adaptive (Adam)"),
    ("max_iter", "iteration cap for the marginal stage"),
    ("tm_max_iter", "iteration cap per round of the transport-map stage"),
    ("grad_tol", "gradient-norm tolerance on the per-observation objective"),
    ("patience", "iterations without validation improvement before early stopping"),
    ("lbfgs_memory", "L-BFGS history length"),
    ("learning_rate", "Adam step size"),
    ("validation_fraction", "share of training replicates held out for early stopping in the marginal stage"),
    ("test_fraction", "share of replicates held out per split by `sct score --splits`"),
    ("seed", "seed for splits and sampling"),
    ("standardize", "global z-standardization of the training data before fitting"),
    ("first_location", "index of the first location in the maximin ordering"),
    ("table_size", "grid size of the spline lookup table (1000 reference)"),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ModelConfig::default();
        assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(ModelConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_document_and_rejections() {
        let c = ModelConfig::from_toml("family = \"gaussian\"\nd = 10\nzeta_kernel = \"matern-5/2\"").unwrap();
        assert_eq!(c.family, DistributionFamily::Gaussian);
        assert_eq!(c.d, 10);
        assert_eq!(c.zeta_kernel, KernelKind::Matern52);
        assert!(ModelConfig::from_toml("bogus = 1").is_err());
        assert!(ModelConfig::from_toml("a = 5.0\nb = 1.0").is_err());
        assert!(ModelConfig::from_toml("tm_epsilon = 1.5").is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.d = 12;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn explain_lists_every_key() {
        let text = ModelConfig::default().explain();
        let table: toml::Table = toml::from_str(&ModelConfig::default().to_toml()).unwrap();
        for key in table.keys() {
            assert!(text.contains(&format!("{key} = ")), "missing {key}");
        }
    }
}
