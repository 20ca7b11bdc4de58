//! Calibration of effect-size estimates from observational studies against
//! negative and positive controls.
//!
//! The crate provides:
//! - ingestion and family-grouped splitting of control estimate sets
//!   ([`controls`]),
//! - frequentist p-value calibration via an empirical null distribution
//!   ([`empirical_null`]),
//! - frequentist confidence-interval calibration via an effect-size
//!   dependent systematic error model ([`systematic_error`]),
//! - Bayesian posterior-interval calibration under constant and linear
//!   hierarchical bias models with an MCMC engine and convergence
//!   diagnostics ([`bayes`]),
//! - positive-control synthesis by outcome injection on synthetic cohorts
//!   and a control-universe simulator ([`synthesis`]),
//! - a coverage/RMSE evaluation harness ([`evaluation`]).
//!
//! The `calib` binary exposes all of it as subcommands; every artifact it
//! writes carries a provenance header ([`artifact`]).

pub mod artifact;
pub mod bayes;
pub mod controls;
pub mod empirical_null;
pub mod error;
pub mod evaluation;
pub mod interval;
pub mod stats;
pub mod synthesis;
pub mod systematic_error;

mod optim;

pub use error::{Error, Result};
