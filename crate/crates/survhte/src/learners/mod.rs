//! Survival learners fitted per treatment arm.
//!
//! Every learner consumes a [`Dataset`](crate::survcore::Dataset) and
//! produces a [`FittedModel`] that predicts survival curves and median
//! survival times for new covariate vectors. Bayesian learners additionally
//! expose per-draw predictions so downstream effect estimates carry
//! posterior uncertainty.

pub mod aft;
pub mod bart;
pub mod cox;
pub mod deepsurv;
pub mod gaph;
pub mod rsf;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survcore::{CurveQuantile, Dataset, SurvivalCurve, TimeGrid};

/// Learner families available to the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Parametric accelerated failure time model with lognormal errors.
    AftLognormal,
    /// Parametric accelerated failure time model with Weibull errors.
    AftWeibull,
    /// Cox proportional hazards with linear predictors.
    CoxPh,
    /// Cox proportional hazards with penalized spline covariate effects.
    GamCox,
    /// Random survival forest.
    Rsf,
    /// Bayesian tree-ensemble AFT with Gaussian residuals.
    AftBartGauss,
    /// Bayesian tree-ensemble AFT with a Dirichlet-process mixture residual.
    AftBartMix,
    /// Same as [`Method::AftBartMix`] plus an estimated propensity score
    /// appended to the covariates of both arm fits.
    AftBartMixPs,
    /// Feed-forward network for the Cox log-relative risk.
    NeuralCox,
    /// Always fails to fit; exercises the harness failure path.
    #[doc(hidden)]
    Failing,
}

impl Method {
    /// All user-facing methods, in reporting order.
    pub const ALL: [Method; 9] = [
        Method::AftLognormal,
        Method::AftWeibull,
        Method::CoxPh,
        Method::GamCox,
        Method::Rsf,
        Method::AftBartGauss,
        Method::AftBartMix,
        Method::AftBartMixPs,
        Method::NeuralCox,
    ];

    /// Whether the fitted model carries posterior draws.
    pub fn is_bayesian(self) -> bool {
        matches!(self, Method::AftBartGauss | Method::AftBartMix | Method::AftBartMixPs)
    }

    /// Whether the estimator wants an estimated propensity score appended
    /// to the covariates before the arm fits.
    pub fn needs_propensity(self) -> bool {
        matches!(self, Method::AftBartMixPs)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AftLognormal => "aft_lognormal",
            Method::AftWeibull => "aft_weibull",
            Method::CoxPh => "cox_ph",
            Method::GamCox => "gam_cox",
            Method::Rsf => "rsf",
            Method::AftBartGauss => "aft_bart_gauss",
            Method::AftBartMix => "aft_bart_mix",
            Method::AftBartMixPs => "aft_bart_mix_ps",
            Method::NeuralCox => "neural_cox",
            Method::Failing => "failing",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        for m in Method::ALL {
            if m.as_str() == s {
                return Ok(m);
            }
        }
        if s == "failing" {
            return Ok(Method::Failing);
        }
        Err(Error::config(format!("unknown method '{s}'")))
    }
}

/// Hyperparameters for the Bayesian tree ensembles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BartConfig {
    /// Number of trees in the sum.
    pub trees: usize,
    /// Posterior draws retained after burn-in.
    pub draws: usize,
    /// Burn-in sweeps discarded from the front of the chain.
    pub burnin: usize,
    /// Depth prior base: P(split at depth d) = alpha * (1 + d)^(-beta).
    pub alpha: f64,
    /// Depth prior exponent.
    pub beta: f64,
    /// Leaf shrinkage: prior sd of a leaf is 0.5 / (k * sqrt(trees)).
    pub k: f64,
    /// Proposal mix: grow, prune, remainder is change.
    pub p_grow: f64,
    pub p_prune: f64,
    /// Truncation level of the stick-breaking residual mixture.
    pub mix_clusters: usize,
}

impl Default for BartConfig {
    fn default() -> Self {
        BartConfig {
            trees: 200,
            draws: 1000,
            burnin: 100,
            alpha: 0.95,
            beta: 2.0,
            k: 2.0,
            p_grow: 0.25,
            p_prune: 0.25,
            mix_clusters: 50,
        }
    }
}

/// Hyperparameters for the random survival forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsfConfig {
    pub trees: usize,
    /// Candidate variables per split; defaults to ceil(p / 3).
    pub mtry: Option<usize>,
    /// Minimum subjects in a terminal node.
    pub nodesize: usize,
    /// Bootstrap each tree's sample; disable to train every tree on the
    /// full data (diagnostic use).
    pub bootstrap: bool,
}

impl Default for RsfConfig {
    fn default() -> Self {
        RsfConfig { trees: 1000, mtry: None, nodesize: 15, bootstrap: true }
    }
}

/// Hyperparameters for the network relative-risk model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Hidden layer widths; empty means a linear model.
    pub hidden: Vec<usize>,
    /// Dropout rate applied to hidden activations during training only.
    pub dropout: f64,
    /// L2 penalty on all parameters.
    pub l2: f64,
    /// Base learning rate of the adaptive-moment optimizer.
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Early-stopping patience in epochs on the validation loss.
    pub patience: usize,
    /// Fraction of subjects held out for validation.
    pub val_frac: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![32, 32],
            dropout: 0.2,
            l2: 1e-4,
            lr: 1e-3,
            batch: 64,
            epochs: 500,
            patience: 20,
            val_frac: 0.2,
        }
    }
}

/// Hyperparameters for the spline hazard model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GamConfig {
    /// Interior knots per continuous covariate.
    pub knots: usize,
    /// Cross-validation folds for the smoothing parameter.
    pub cv_folds: usize,
    /// Log-spaced smoothing grid size.
    pub lambda_grid: usize,
    /// Skip cross-validation and use this smoothing multiplier directly.
    pub fixed_lambda: Option<f64>,
}

impl Default for GamConfig {
    fn default() -> Self {
        GamConfig { knots: 10, cv_folds: 5, lambda_grid: 7, fixed_lambda: None }
    }
}

/// Full learner request: method tag, RNG seed, and hyperparameters.
///
/// Non-default hyperparameters only matter for the method they belong to;
/// the rest are carried along inert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub method: Method,
    pub seed: u64,
    #[serde(default)]
    pub bart: BartConfig,
    #[serde(default)]
    pub rsf: RsfConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub gam: GamConfig,
}

impl LearnerSpec {
    pub fn new(method: Method, seed: u64) -> Self {
        LearnerSpec {
            method,
            seed,
            bart: BartConfig::default(),
            rsf: RsfConfig::default(),
            net: NetConfig::default(),
            gam: GamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // bart.trees == 0 is legal: it degenerates to the residual model
        // alone, which the diagnostics rely on.
        let b = &self.bart;
        if b.draws == 0 {
            return Err(Error::config("bart.draws must be positive"));
        }
        if !(b.p_grow >= 0.0 && b.p_prune >= 0.0 && b.p_grow + b.p_prune <= 1.0) {
            return Err(Error::config("bart proposal probabilities must be a sub-distribution"));
        }
        if b.mix_clusters < 2 {
            return Err(Error::config("bart.mix_clusters must be at least 2"));
        }
        if self.rsf.trees == 0 || self.rsf.nodesize == 0 {
            return Err(Error::config("rsf.trees and rsf.nodesize must be positive"));
        }
        if !(self.net.dropout >= 0.0 && self.net.dropout < 1.0) {
            return Err(Error::config("net.dropout must lie in [0, 1)"));
        }
        if !(self.net.val_frac >= 0.0 && self.net.val_frac < 1.0) {
            return Err(Error::config("net.val_frac must lie in [0, 1)"));
        }
        if self.gam.knots < 4 || self.gam.cv_folds < 2 || self.gam.lambda_grid < 1 {
            return Err(Error::config("gam needs knots >= 4, cv_folds >= 2, lambda_grid >= 1"));
        }
        Ok(())
    }
}

/// A fitted survival learner for one treatment arm.
#[derive(Debug)]
pub enum FittedModel {
    Aft(aft::AftFit),
    Cox(cox::CoxFit),
    Gam(gaph::GamCoxFit),
    Rsf(rsf::RsfFit),
    Bart(bart::BartFit),
    Net(deepsurv::NetFit),
}

impl FittedModel {
    /// Fits `spec.method` to `data`. Deterministic given (`spec`, `data`).
    pub fn fit(spec: &LearnerSpec, data: &Dataset) -> Result<FittedModel> {
        spec.validate()?;
        match spec.method {
            Method::AftLognormal => {
                Ok(FittedModel::Aft(aft::fit_aft(data, aft::AftDist::Lognormal)?))
            }
            Method::AftWeibull => Ok(FittedModel::Aft(aft::fit_aft(data, aft::AftDist::Weibull)?)),
            Method::CoxPh => Ok(FittedModel::Cox(cox::fit_coxph(data)?)),
            Method::GamCox => Ok(FittedModel::Gam(gaph::fit_gam_cox(data, &spec.gam, spec.seed)?)),
            Method::Rsf => Ok(FittedModel::Rsf(rsf::fit_rsf(data, &spec.rsf, spec.seed)?)),
            Method::AftBartGauss => Ok(FittedModel::Bart(bart::fit_bart(
                data,
                bart::ResidualModel::Gaussian,
                &spec.bart,
                spec.seed,
            )?)),
            Method::AftBartMix | Method::AftBartMixPs => Ok(FittedModel::Bart(bart::fit_bart(
                data,
                bart::ResidualModel::Mixture,
                &spec.bart,
                spec.seed,
            )?)),
            Method::NeuralCox => {
                Ok(FittedModel::Net(deepsurv::fit_neural_cox(data, &spec.net, spec.seed)?))
            }
            Method::Failing => {
                Err(Error::fit("failing", "method is defined to fail; harness test hook"))
            }
        }
    }

    /// Point-estimate survival curve at `x` on `grid`. For Bayesian models
    /// this is the pointwise posterior mean curve.
    pub fn predict_curve(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<SurvivalCurve> {
        match self {
            FittedModel::Aft(m) => m.predict_curve(x, grid),
            FittedModel::Cox(m) => m.predict_curve(x, grid),
            FittedModel::Gam(m) => m.predict_curve(x, grid),
            FittedModel::Rsf(m) => m.predict_curve(x, grid),
            FittedModel::Bart(m) => m.predict_mean_curve(x, grid),
            FittedModel::Net(m) => m.predict_curve(x, grid),
        }
    }

    /// Per-draw survival curves; error for models without posterior draws.
    pub fn predict_draw_curves(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<Vec<SurvivalCurve>> {
        match self {
            FittedModel::Bart(m) => m.predict_draw_curves(x, grid),
            _ => Err(Error::invalid("per-draw curves are only defined for Bayesian learners")),
        }
    }

    /// Median survival time at `x`, capped at the grid's last time.
    pub fn median_time(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<CurveQuantile> {
        match self {
            FittedModel::Aft(m) => m.median_time(x, grid),
            FittedModel::Cox(m) => m.median_time(x, grid),
            FittedModel::Gam(m) => m.median_time(x, grid),
            FittedModel::Rsf(m) => {
                let curve = m.predict_curve(x, grid)?;
                crate::survcore::curve_quantile(&curve, 0.5)
            }
            FittedModel::Bart(m) => m.median_time(x, grid),
            FittedModel::Net(m) => m.median_time(x, grid),
        }
    }

    /// Per-draw median survival times; error for non-Bayesian models.
    pub fn draw_medians(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<Vec<CurveQuantile>> {
        match self {
            FittedModel::Bart(m) => m.draw_medians(x, grid),
            _ => Err(Error::invalid("posterior draws are only defined for Bayesian learners")),
        }
    }

    /// Number of retained posterior draws; zero for frequentist models.
    pub fn n_draws(&self) -> usize {
        match self {
            FittedModel::Bart(m) => m.n_draws(),
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("aft_bart".parse::<Method>().is_err());
    }

    #[test]
    fn failing_method_fails() {
        let data = crate::survcore::Dataset::new(
            (0..30)
                .map(|i| crate::survcore::ObservedRecord {
                    x: vec![i as f64],
                    z: 0,
                    y: 1.0 + i as f64,
                    delta: 1,
                })
                .collect(),
            vec!["x1".into()],
        )
        .unwrap();
        let err = FittedModel::fit(&LearnerSpec::new(Method::Failing, 1), &data).unwrap_err();
        assert!(matches!(err, Error::Fit { .. }));
    }

    #[test]
    fn spec_validation_rejects_bad_hyperparameters() {
        let mut spec = LearnerSpec::new(Method::Rsf, 7);
        spec.rsf.trees = 0;
        assert!(spec.validate().is_err());
        let mut spec = LearnerSpec::new(Method::NeuralCox, 7);
        spec.net.dropout = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = LearnerSpec::new(Method::AftBartMix, 7);
        spec.bart.p_grow = 0.8;
        spec.bart.p_prune = 0.5;
        assert!(spec.validate().is_err());
    }
}
