//! Estimation of individual survival treatment effects (ISTE) from
//! right-censored observational data.
//!
//! The library fits a survival model separately to each treatment arm,
//! predicts both counterfactual survival curves for every subject, and
//! contrasts the two median survival times. Several learners are provided,
//! from parametric accelerated-failure-time regressions to Bayesian
//! additive tree ensembles with a nonparametric residual. A simulation
//! module generates benchmark data with known ground truth, and the
//! harness runs scenario grids, aggregates precision/bias/regret/coverage
//! metrics, and emits CSV tables and SVG plots.

pub mod error;
pub mod harness;
pub mod iste;
pub mod learners;
pub mod metrics;
pub mod numeric;
pub mod propensity;
pub mod rng;
pub mod simgen;
pub mod subgroup;
pub mod survcore;

pub use error::{Error, Result};
