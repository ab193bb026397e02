//! Record linkage with a bipartite Bayesian Gibbs sampler, followed by
//! regression inference over the multiply-imputed linked files that stays
//! robust to false links.
//!
//! The pipeline runs in stages:
//!
//! - [`comparison`] turns two files into per-pair agreement vectors;
//! - [`gibbs`] samples plausible linkages and match parameters;
//! - [`imputation`] extracts linked datasets and pools estimates;
//! - [`plmic`] and [`plmi`] fit two-component regression mixtures by EM,
//!   with and without per-pair confidence measures;
//! - [`baselines`] provides OLS, the two-stage estimator and the true-link
//!   oracle;
//! - [`simgen`] and [`study`] generate synthetic files and run Monte Carlo
//!   studies over them.

pub mod baselines;
pub mod comparison;
pub mod error;
pub mod gibbs;
pub mod imputation;
pub mod io;
pub mod marginal;
pub mod mixture;
pub mod optim;
pub mod pipeline;
pub mod plmi;
pub mod plmic;
pub mod simgen;
pub mod study;

pub use error::{Error, Result};
