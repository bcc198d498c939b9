//! Marginal Gaussianization plus a Bayesian transport map for non-Gaussian spatial
//! ensembles. See [`model::FittedModel`] for the entry point.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod io;
pub mod marginal;
pub mod model;
pub mod onion;
pub mod optim;
pub mod priors;
pub mod special;
pub mod synthetic;
pub mod transport;

pub use error::{Result, SctError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/marginal.md")]
    mod marginal {}
    #[doc = include_str!("../../../book/src/onion.md")]
    mod onion {}
    #[doc = include_str!("../../../book/src/priors.md")]
    mod priors {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
