//! Bayesian stochastic-volatility estimation.
//!
//! Implements the Taylor SV model with a latent AR(1) log-volatility process,
//! a single-site accept/reject–Metropolis-Hastings sampler with a
//! moment-matched inverse-gamma proposal for the volatilities, conjugate
//! (or AR-MH) parameter updates, and two semiparametric variants (NSVM-1,
//! NSVM-2) in which the error densities are replaced by Gaussian-kernel
//! density estimates of standardized stage-1 residuals.
//!
//! The crate is organized as:
//! - [`model`]: parameters, priors, error families, and the data-generating
//!   process for simulation studies.
//! - [`density`]: kernel density estimation (Silverman bandwidth, stable
//!   log-pdf evaluation).
//! - [`samplers`]: single-site posterior samplers.
//! - [`pipeline`]: chain orchestration, two-stage semiparametric fit,
//!   summaries, and the replication harness.
//! - [`metrics`]: volatility-path and parameter error metrics.
//! - [`io`] and [`plot`]: CSV/JSON/manifest/SVG emission for the CLI.

pub mod density;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod samplers;
pub mod seed;

pub use error::{Error, Result};
pub use model::{ErrorSpec, ModelParams, Priors, SimulatedPath};
