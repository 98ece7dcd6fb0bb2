//! Interacting-particle Langevin algorithms for maximum marginal likelihood
//! estimation in latent variable models with energy-based priors.
//!
//! The model is `p_theta(x, y) = p_alpha(x) p_beta(y|x)`: an unnormalized
//! energy prior in latent space and an isotropic Gaussian decoder. Training
//! jointly evolves the parameters and an `M x N` cloud of posterior particles
//! under coupled Langevin dynamics whose stationary parameter marginal
//! concentrates on the maximizers of the empirical marginal log-likelihood.
//!
//! Modules:
//! - [`model`]: model traits, analytic Gaussian testbeds, joint-likelihood gradients
//! - [`neural`]: MLP energy network, linear generator, Adam
//! - [`dynamics`]: ULA prior chains, particle sweeps, parameter updates
//! - [`trainer`]: full / practical / warmup training loops and the short-run
//!   MCMC baseline, with budget accounting
//! - [`theory`]: non-asymptotic bound evaluation and empirical verification
//! - [`data`]: rotated Swiss roll generation and persistence
//! - [`eval`]: MMD, sample generation, MAP latent reconstruction
//! - [`cli`]: command-line front end (`gen-data`, `train`, `sweep`,
//!   `eval-mmd`, `verify-bound`)
//! - [`rng`]: counter-based noise streams (bitwise reproducibility at any
//!   thread count)

pub mod cli;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod model;
pub mod neural;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
