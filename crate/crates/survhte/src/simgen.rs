//! Synthetic-data generator for the benchmark: ten covariates, a logistic
//! treatment assignment with calibrated intercept, Weibull counterfactual
//! event times with arm-specific scale constants and either a constant or a
//! covariate-dependent shape, exponential censoring (constant rate or
//! covariate-dependent rate), confounder masking, and closed-form ground
//! truth for the median-survival contrast.

use crate::error::{Error, Result};
use crate::numeric::{expit, normal_pdf};
use crate::rng::{derive_seed, stream_rng};
use crate::survcore::{Dataset, ObservedRecord, SurvivalCurve, TimeGrid};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Heterogeneity settings: four m-function pairs of increasing complexity.
/// H1 has nonlinearity in the treated arm only; H2 in both arms; H3 uses
/// non-overlapping covariate sets across arms; H4 adds a correlated pair
/// (X2, X4) and a nonadditive sine interaction in the control arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heterogeneity {
    H1,
    H2,
    H3,
    H4,
}

impl Heterogeneity {
    pub fn all() -> [Heterogeneity; 4] {
        [Heterogeneity::H1, Heterogeneity::H2, Heterogeneity::H3, Heterogeneity::H4]
    }
}

impl std::fmt::Display for Heterogeneity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Heterogeneity::H1 => "h1",
            Heterogeneity::H2 => "h2",
            Heterogeneity::H3 => "h3",
            Heterogeneity::H4 => "h4",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Heterogeneity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h1" | "i" | "1" => Ok(Heterogeneity::H1),
            "h2" | "ii" | "2" => Ok(Heterogeneity::H2),
            "h3" | "iii" | "3" => Ok(Heterogeneity::H3),
            "h4" | "iv" | "4" => Ok(Heterogeneity::H4),
            other => Err(Error::config(format!("unknown heterogeneity setting '{other}'"))),
        }
    }
}

/// Censoring mechanism: a constant exponential rate, or an exponential
/// rate that is a fixed function of the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Censoring {
    Independent { rate: f64 },
    CovariateDependent,
}

impl std::fmt::Display for Censoring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Censoring::Independent { rate } => write!(f, "independent({rate})"),
            Censoring::CovariateDependent => f.write_str("covariate_dependent"),
        }
    }
}

/// Confounders hidden from the analysis view (ground truth keeps them).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    None,
    X3,
    X3X5,
    X3X5X6,
}

impl Mask {
    pub fn all() -> [Mask; 4] {
        [Mask::None, Mask::X3, Mask::X3X5, Mask::X3X5X6]
    }

    pub fn masked_names(&self) -> &'static [&'static str] {
        match self {
            Mask::None => &[],
            Mask::X3 => &["x3"],
            Mask::X3X5 => &["x3", "x5"],
            Mask::X3X5X6 => &["x3", "x5", "x6"],
        }
    }
}

impl std::fmt::Display for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mask::None => "none",
            Mask::X3 => "x3",
            Mask::X3X5 => "x3_x5",
            Mask::X3X5X6 => "x3_x5_x6",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "" => Ok(Mask::None),
            "x3" => Ok(Mask::X3),
            "x3_x5" | "x3,x5" => Ok(Mask::X3X5),
            "x3_x5_x6" | "x3,x5,x6" => Ok(Mask::X3X5X6),
            other => Err(Error::config(format!("unknown mask '{other}'"))),
        }
    }
}

/// One benchmark scenario: everything needed to draw a replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub hs: Heterogeneity,
    pub psi: f64,
    pub ph: bool,
    pub censoring: Censoring,
    pub mask: Mask,
    pub reps: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("scenario needs n >= 2".to_string()));
        }
        if self.reps < 1 {
            return Err(Error::config("scenario needs reps >= 1".to_string()));
        }
        if !(self.psi > 0.0) {
            return Err(Error::config("scenario needs psi > 0".to_string()));
        }
        if let Censoring::Independent { rate } = self.censoring {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::config("censoring rate must be positive".to_string()));
            }
        }
        Ok(())
    }
}

pub const P_COVARIATES: usize = 10;

/// Slope multipliers printed for the assignment model, applied in order to
/// (X1, X2, X3, X5, X6, X7, X9); X10 gets slope 0.
pub const PROPENSITY_BASE_SLOPES: [f64; 7] = [-0.1, -0.9, -0.3, -0.1, -0.2, -0.4, 0.5];

/// Covariate indices carrying the 8 propensity slopes:
/// (X1, X2, X3, X5, X6, X7, X9, X10).
pub const PROPENSITY_VARS: [usize; 8] = [0, 1, 2, 4, 5, 6, 8, 9];

pub fn propensity_slopes(psi: f64) -> [f64; 8] {
    let mut a = [0.0; 8];
    for (i, s) in PROPENSITY_BASE_SLOPES.iter().enumerate() {
        a[i] = s * psi;
    }
    a
}

/// Calibrated generator parameters for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub hs: Heterogeneity,
    pub ph: bool,
    pub psi: f64,
    /// Slopes for (X1, X2, X3, X5, X6, X7, X9, X10).
    pub alpha: [f64; 8],
    pub alpha0: f64,
    pub d0: f64,
    pub d1: f64,
    pub censoring: Censoring,
}

impl DgpParams {
    /// Calibrates the assignment intercept for the scenario's psi.
    pub fn new(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let alpha = propensity_slopes(config.psi);
        let alpha0 = calibrate_intercept(&alpha, rng)?;
        Ok(DgpParams {
            hs: config.hs,
            ph: config.ph,
            psi: config.psi,
            alpha,
            alpha0,
            d0: 1200.0,
            d1: 2000.0,
            censoring: config.censoring,
        })
    }
}

/// Standard-normal X1..X5 and Bernoulli(0.5) X6..X10; under H4 the pair
/// (X2, X4) is bivariate normal with unit marginals and correlation 0.6.
pub fn gen_covariates(n: usize, hs: Heterogeneity, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = vec![0.0; P_COVARIATES];
        for slot in x.iter_mut().take(5) {
            *slot = StandardNormal.sample(rng);
        }
        for slot in x.iter_mut().take(10).skip(5) {
            *slot = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
        if hs == Heterogeneity::H4 {
            let eps: f64 = StandardNormal.sample(rng);
            // 0.6^2 + 0.8^2 = 1 keeps the X4 marginal standard normal.
            x[3] = 0.6 * x[1] + 0.8 * eps;
        }
        out.push(x);
    }
    out
}

pub fn true_propensity(x: &[f64], params: &DgpParams) -> f64 {
    let mut lp = params.alpha0;
    for (a, &j) in params.alpha.iter().zip(PROPENSITY_VARS.iter()) {
        lp += a * x[j];
    }
    expit(lp)
}

/// Population treated fraction for a given intercept, by quadrature: the
/// continuous part of the linear predictor collapses to a single normal
/// with variance = sum of squared continuous slopes, and the four binary
/// covariates contribute 16 equally likely offsets.
fn quadrature_treated_fraction(alpha0: f64, alpha: &[f64; 8]) -> f64 {
    let s = (alpha[0] * alpha[0] + alpha[1] * alpha[1] + alpha[2] * alpha[2] + alpha[3] * alpha[3]).sqrt();
    let binary = [alpha[4], alpha[5], alpha[6], alpha[7]];
    let mut offsets = Vec::with_capacity(16);
    for m in 0..16u32 {
        let mut off = 0.0;
        for (b, slope) in binary.iter().enumerate() {
            if m >> b & 1 == 1 {
                off += slope;
            }
        }
        offsets.push(off);
    }
    // Trapezoid over u in [-10, 10]; the normal tail beyond is ~1e-23.
    let pts = 2001usize;
    let h = 20.0 / (pts - 1) as f64;
    let mut total = 0.0;
    for i in 0..pts {
        let u = -10.0 + i as f64 * h;
        let w = if i == 0 || i == pts - 1 { 0.5 } else { 1.0 };
        let dens = normal_pdf(u);
        let mut mix = 0.0;
        for off in &offsets {
            mix += expit(alpha0 + off + s * u);
        }
        total += w * dens * mix / 16.0;
    }
    total * h
}

/// Intercept making the population treated fraction 0.5. Bisection runs on
/// the deterministic quadrature mean (exactly reproducible), then a Monte
/// Carlo pass over 10^5 fresh covariate draws must land within 0.5 +- 0.005
/// or the calibration is rejected.
pub fn calibrate_intercept(alpha: &[f64; 8], rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut lo = -40.0;
    let mut hi = 40.0;
    if quadrature_treated_fraction(lo, alpha) > 0.5 || quadrature_treated_fraction(hi, alpha) < 0.5 {
        return Err(Error::numeric("treated fraction not bracketed by intercept range".to_string()));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if quadrature_treated_fraction(mid, alpha) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha0 = 0.5 * (lo + hi);
    if hi - lo > 1e-9 {
        return Err(Error::numeric("intercept bisection failed to converge in 100 steps".to_string()));
    }

    let mc_n = 100_000usize;
    let mut sum = 0.0;
    for _ in 0..mc_n {
        let mut lp = alpha0;
        for (k, &a) in alpha.iter().enumerate() {
            let v: f64 = if k < 4 {
                StandardNormal.sample(rng)
            } else if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            };
            lp += a * v;
        }
        sum += expit(lp);
    }
    let mc_mean = sum / mc_n as f64;
    if (mc_mean - 0.5).abs() > 0.005 {
        return Err(Error::numeric(format!(
            "calibrated intercept {alpha0:.6} gives Monte Carlo treated fraction {mc_mean:.4}, outside 0.5 +- 0.005"
        )));
    }
    Ok(alpha0)
}

/// Log-linear covariate effect on the event-time scale for one arm.
pub fn m_function(hs: Heterogeneity, arm: u8, x: &[f64]) -> f64 {
    let sig = |v: f64| expit(v);
    match (hs, arm) {
        (Heterogeneity::H1 | Heterogeneity::H2, 1) => {
            -0.2 + 0.1 * sig(x[0]) - 0.8 * x[2].sin() - 0.1 * x[4] * x[4] - 0.3 * x[5] - 0.2 * x[6]
        }
        (Heterogeneity::H1, 0) => 0.2 - 0.5 * x[0] - 0.8 * x[2] - 1.8 * x[4] - 0.9 * x[5] - 0.1 * x[6],
        (Heterogeneity::H2 | Heterogeneity::H3, 0) => {
            -0.1 + 0.1 * x[0] * x[0] - 0.2 * x[2].sin() + 0.2 * sig(x[4]) + 0.2 * x[5] - 0.3 * x[6]
        }
        (Heterogeneity::H3 | Heterogeneity::H4, 1) => {
            0.5 - 0.1 * sig(x[1]) + 0.1 * x[2].sin() - 0.1 * x[3] * x[3] + 0.2 * x[3]
                - 0.1 * x[4] * x[4]
                - 0.3 * x[5]
        }
        (Heterogeneity::H4, 0) => {
            -0.2 + 0.5 * (std::f64::consts::PI * x[0] * x[2]).sin() + 0.2 * sig(x[4]) + 0.2 * x[5] - 0.3 * x[6]
        }
        _ => unreachable!("arm is 0 or 1"),
    }
}

/// Weibull shape: constant 2 under proportional hazards, otherwise an
/// arm-specific log-linear function of the covariates.
pub fn eta_shape(ph: bool, arm: u8, x: &[f64]) -> f64 {
    if ph {
        2.0
    } else if arm == 0 {
        (0.7 - 1.8 * x[2] + 0.8 * x[6]).exp()
    } else {
        (0.9 - 0.5 * x[0] + 0.5 * x[1]).exp()
    }
}

fn arm_scale(params: &DgpParams, arm: u8) -> f64 {
    if arm == 0 {
        params.d0
    } else {
        params.d1
    }
}

/// Exponents clamped so extreme shapes cannot overflow to inf or
/// underflow an event time to exactly 0 (observed times must stay > 0).
const LOG_TIME_CLAMP: f64 = 690.0;

fn clamp_exp(log_t: f64) -> f64 {
    log_t.clamp(-LOG_TIME_CLAMP, LOG_TIME_CLAMP).exp()
}

/// Inverse-transform draw of the counterfactual event time:
/// T(z) = { d_z (-log u) / exp(m_z(x)) }^{1/eta}.
pub fn gen_event_time(arm: u8, x: &[f64], u: f64, params: &DgpParams) -> f64 {
    let m = m_function(params.hs, arm, x);
    let eta = eta_shape(params.ph, arm, x);
    let log_t = (arm_scale(params, arm).ln() + (-u.ln()).ln() - m) / eta;
    clamp_exp(log_t)
}

/// Exponential censoring rate for a subject.
pub fn censoring_rate(censoring: &Censoring, x: &[f64]) -> f64 {
    match censoring {
        Censoring::Independent { rate } => *rate,
        Censoring::CovariateDependent => {
            let r = 0.02 + 0.1 * x[0] * x[0] + 0.1 * x[2].sin() + 0.2 * expit(x[4]) + 0.02 * x[5] - 0.03 * x[6];
            // The rate form can go negative for some x.
            r.max(1e-4)
        }
    }
}

pub fn gen_censoring(censoring: &Censoring, x: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let rate = censoring_rate(censoring, x);
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -u.ln() / rate;
        }
    }
}

/// Closed-form counterfactual median: { d_z log 2 / exp(m_z(x)) }^{1/eta}.
pub fn true_median(params: &DgpParams, arm: u8, x: &[f64]) -> f64 {
    let m = m_function(params.hs, arm, x);
    let eta = eta_shape(params.ph, arm, x);
    let log_med = (arm_scale(params, arm).ln() + std::f64::consts::LN_2.ln() - m) / eta;
    clamp_exp(log_med)
}

/// Closed-form median-survival contrast at x.
pub fn true_iste(x: &[f64], ph: bool, params: &DgpParams) -> f64 {
    let p = DgpParams { ph, ..params.clone() };
    true_median(&p, 1, x) - true_median(&p, 0, x)
}

/// Counterfactual survival probability S(t | x, z) = exp(-t^eta e^{m_z} / d_z).
pub fn true_survival(params: &DgpParams, arm: u8, x: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let m = m_function(params.hs, arm, x);
    let eta = eta_shape(params.ph, arm, x);
    let log_h = eta * t.ln() + m - arm_scale(params, arm).ln();
    (-clamp_exp(log_h)).exp()
}

/// True counterfactual curve tabulated on a grid, for oracle injection.
pub fn oracle_curve(params: &DgpParams, arm: u8, x: &[f64], grid: &Arc<TimeGrid>) -> Result<SurvivalCurve> {
    let probs: Vec<f64> = grid.times().iter().map(|&t| true_survival(params, arm, x, t)).collect();
    SurvivalCurve::new(grid.clone(), probs)
}

/// Full per-subject ground truth alongside the observable quadruple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub x: Vec<f64>,
    pub e_true: f64,
    pub z: u8,
    pub t0: f64,
    pub t1: f64,
    pub c: f64,
    pub y: f64,
    pub delta: u8,
    pub iste_true: f64,
}

/// One simulated replication: ground truth, the masked analysis view, and
/// the calibrated parameters that produced them.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub truth: Vec<CounterfactualRecord>,
    pub data: Dataset,
    pub params: DgpParams,
}

pub fn covariate_names() -> Vec<String> {
    (1..=P_COVARIATES).map(|i| format!("x{i}")).collect()
}

/// Draws one replication. Deterministic given config.seed; the calibration
/// stream is separate from the data stream so the intercept search cannot
/// perturb the sample.
pub fn simulate(config: &ScenarioConfig) -> Result<SimOutput> {
    config.validate()?;
    let mut calib_rng = stream_rng(derive_seed(config.seed, &[0xCA11B]));
    let params = DgpParams::new(config, &mut calib_rng)?;
    let mut rng = stream_rng(derive_seed(config.seed, &[0xDA7A]));

    let xs = gen_covariates(config.n, config.hs, &mut rng);
    let mut truth = Vec::with_capacity(config.n);
    let mut records = Vec::with_capacity(config.n);
    for x in xs {
        let e = true_propensity(&x, &params);
        let z = u8::from(rng.gen_bool(e));
        let mut draw_u = || loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                return u;
            }
        };
        let u0 = draw_u();
        let u1 = draw_u();
        let t0 = gen_event_time(0, &x, u0, &params);
        let t1 = gen_event_time(1, &x, u1, &params);
        let c = gen_censoring(&config.censoring, &x, &mut rng);
        let t_assigned = if z == 1 { t1 } else { t0 };
        let y = t_assigned.min(c);
        let delta = u8::from(t_assigned < c);
        let iste = true_iste(&x, config.ph, &params);
        records.push(ObservedRecord { x: x.clone(), z, y, delta });
        truth.push(CounterfactualRecord { x, e_true: e, z, t0, t1, c, y, delta, iste_true: iste });
    }
    let full = Dataset::new(records, covariate_names())?;
    let data = apply_mask(&full, config.mask)?;
    Ok(SimOutput { truth, data, params })
}

/// Drops the masked covariate columns from the analysis view.
pub fn apply_mask(data: &Dataset, mask: Mask) -> Result<Dataset> {
    let hidden = mask.masked_names();
    if hidden.is_empty() {
        return Ok(data.clone());
    }
    let keep: Vec<usize> = data
        .covariate_names()
        .iter()
        .enumerate()
        .filter(|(_, n)| !hidden.contains(&n.as_str()))
        .map(|(i, _)| i)
        .collect();
    if keep.len() + hidden.len() != data.p() {
        return Err(Error::invalid("mask names not all present in dataset".to_string()));
    }
    let names: Vec<String> = keep.iter().map(|&i| data.covariate_names()[i].clone()).collect();
    let records: Vec<ObservedRecord> = data
        .records()
        .iter()
        .map(|r| ObservedRecord {
            x: keep.iter().map(|&i| r.x[i]).collect(),
            z: r.z,
            y: r.y,
            delta: r.delta,
        })
        .collect();
    Dataset::new(records, names)
}

/// One row per subject: covariate columns, z, y, delta.
pub fn write_data_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = data.covariate_names().to_vec();
    header.extend(["z".to_string(), "y".to_string(), "delta".to_string()]);
    w.write_record(&header)?;
    for r in data.records() {
        let mut row: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
        row.extend([r.z.to_string(), r.y.to_string(), r.delta.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parallel ground-truth table: e_true, t0, t1, iste_true.
pub fn write_truth_csv(path: &Path, truth: &[CounterfactualRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["e_true", "t0", "t1", "iste_true"])?;
    for r in truth {
        w.write_record([r.e_true.to_string(), r.t0.to_string(), r.t1.to_string(), r.iste_true.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
