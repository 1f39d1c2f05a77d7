//! Bayesian search for a localized signal on an uncertain smooth background.
//!
//! The background log-intensity is a Gaussian process around a Bernstein
//! polynomial mean, the signal is a Gaussian bump of known shape, and the
//! unknown location may also be absent. Posterior inference uses a tempered
//! sequential Monte Carlo sampler; the Bayes decision set is calibrated to
//! frequency error rates with a Laplace approximation and importance sampling.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod calibrate;
pub mod decision;
mod error;
pub mod kde;
pub mod kernel;
pub mod laplace;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod smc;

pub use error::{Error, Result};
pub use model::{
    BinnedSpectrum, CrossSection, GpBackgroundPrior, MassHypothesis, MassPrior, Particle, Priors,
    SignalTemplate,
};
