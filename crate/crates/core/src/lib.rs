//! Bayesian projection clustering for longitudinal data.
//!
//! A Gaussian linear mixed model `y_i = X_i β + Z_i b_i + ε_i` is fitted by
//! blocked Gibbs sampling. For every posterior draw, each subject is
//! represented by a predictive replicate that keeps a chosen subset `A` of its
//! random effects and integrates the rest out under the conditional prior.
//! Subjects are then clustered by projecting those replicate distributions,
//! in Kullback-Leibler divergence, onto a family with only `K` distinct
//! shared-effect values.
//!
//! Module map:
//!
//! - [`data`]: datasets, CSV I/O, standardization, basis design matrices and
//!   the power-spectrum transform.
//! - [`sampler`]: priors, the Gibbs sampler and fitted replicate means.
//! - [`replicate`]: covariance partitioning, replicate predictive densities,
//!   the per-subject projection metric and the closed-form KL term.
//! - [`projection`]: the K-means-type KL projection clustering.
//! - [`selection`]: KL-ratio and bootstrap-instability rules for choosing `K`.
//! - [`evaluation`]: coincidence matrices and Rand / adjusted Rand indices.
//! - [`synthgen`]: the four-group synthetic cosine generator.

pub mod data;
pub mod draws;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod projection;
pub mod replicate;
pub mod rng;
pub mod sampler;
pub mod selection;
pub mod synthgen;

pub use error::{Error, Result};
