//! Individual treatment effects on median survival time.
//!
//! Fits one model per treatment arm and contrasts predicted median survival
//! times at each subject's covariates: omega_i = median_1(x_i) - median_0(x_i),
//! in months. Posterior methods carry per-draw effect vectors for interval
//! construction; frequentist methods get replicate spread through subsampling.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{FittedModel, LearnerSpec, Method};
use crate::numeric::{mean, quantile};
use crate::propensity::{fit_propensity, PropensityConfig};
use crate::rng::{derive_seed, stream_rng};
use crate::survcore::{curve_quantile, CurveQuantile, Dataset, ObservedRecord, TimeGrid};

/// Default replicate count for frequentist subsampling.
pub const DEFAULT_SUBSAMPLE_REPS: usize = 1000;
/// Default subsample fraction (without replacement).
pub const DEFAULT_SUBSAMPLE_FRACTION: f64 = 0.2;

/// How the point effect is summarized for posterior methods.
///
/// `DrawMean` averages the per-draw median contrasts, so the stored draw
/// vectors reproduce the point exactly. `MeanCurve` reads the median off each
/// arm's posterior-mean survival curve first and contrasts those.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSummary {
    #[default]
    DrawMean,
    MeanCurve,
}

/// One subject's effect estimate with its arm-level medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEffect {
    /// Predicted median survival under control, capped at the grid end.
    pub theta0: f64,
    /// Predicted median survival under treatment, capped at the grid end.
    pub theta1: f64,
    /// theta1 - theta0.
    pub omega: f64,
    /// True when the control median hit the grid cap.
    pub capped0: bool,
    /// True when the treated median hit the grid cap.
    pub capped1: bool,
}

/// Per-subject effect estimates from one pair of arm fits.
#[derive(Debug, Clone)]
pub struct IsteResult {
    pub method: Method,
    pub summary: PointSummary,
    pub grid: Arc<TimeGrid>,
    pub subjects: Vec<SubjectEffect>,
    /// Per-subject posterior effect draws, present for Bayesian methods.
    pub draws: Option<Vec<Vec<f64>>>,
}

impl IsteResult {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Point effects in subject order.
    pub fn points(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.omega).collect()
    }

    /// Fraction of subjects whose effect touched the grid cap on either arm.
    pub fn capped_rate(&self) -> f64 {
        if self.subjects.is_empty() {
            return 0.0;
        }
        let hits = self.subjects.iter().filter(|s| s.capped0 || s.capped1).count();
        hits as f64 / self.subjects.len() as f64
    }

    /// Posterior effect draws; error for methods without them.
    pub fn draw_matrix(&self) -> Result<&[Vec<f64>]> {
        match &self.draws {
            Some(d) => Ok(d),
            None => Err(Error::invalid(format!(
                "{} has no posterior draws; use subsampling for replicate spread",
                self.method
            ))),
        }
    }

    /// Equal-tailed credible intervals at `level` from the stored draws.
    ///
    /// A single draw yields a degenerate interval. Bounds are widened to
    /// contain the point estimate so interval checks stay order-consistent.
    pub fn intervals(&self, level: f64) -> Result<Vec<(f64, f64)>> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::invalid("interval level must lie in (0, 1)"));
        }
        let draws = self.draw_matrix()?;
        let tail = (1.0 - level) / 2.0;
        let mut out = Vec::with_capacity(draws.len());
        for (i, row) in draws.iter().enumerate() {
            let lo = quantile(row, tail)?;
            let hi = quantile(row, 1.0 - tail)?;
            let point = self.subjects[i].omega;
            out.push((lo.min(point), hi.max(point)));
        }
        Ok(out)
    }
}

/// Anything that can produce a median survival time at a covariate row.
///
/// Fitted learners implement this; simulation oracles can too, which lets the
/// estimation plumbing be exercised against exact truth.
pub trait ArmModel {
    fn median_time(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<CurveQuantile>;

    /// Per-draw medians for posterior models, `None` otherwise.
    fn draw_medians(&self, _x: &[f64], _grid: &Arc<TimeGrid>) -> Result<Option<Vec<CurveQuantile>>> {
        Ok(None)
    }

    /// Median of the point-estimate curve. Same as `median_time` unless the
    /// model distinguishes a posterior-mean curve from averaged draw medians.
    fn mean_curve_median(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<CurveQuantile> {
        self.median_time(x, grid)
    }
}

impl ArmModel for FittedModel {
    fn median_time(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<CurveQuantile> {
        FittedModel::median_time(self, x, grid)
    }

    fn draw_medians(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<Option<Vec<CurveQuantile>>> {
        if self.n_draws() == 0 {
            return Ok(None);
        }
        FittedModel::draw_medians(self, x, grid).map(Some)
    }

    fn mean_curve_median(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<CurveQuantile> {
        match self {
            FittedModel::Bart(m) => {
                let curve = m.predict_mean_curve(x, grid)?;
                curve_quantile(&curve, 0.5)
            }
            _ => FittedModel::median_time(self, x, grid),
        }
    }
}

/// Contrasts two already-fitted arm models at every row of `rows`.
///
/// This is the core step of `estimate_iste`, split out so callers can inject
/// oracle models or reuse fits across relabelings.
pub fn contrast_models(
    m0: &dyn ArmModel,
    m1: &dyn ArmModel,
    rows: &[Vec<f64>],
    grid: &Arc<TimeGrid>,
    method: Method,
    summary: PointSummary,
) -> Result<IsteResult> {
    let cap = grid.max_time();
    let mut subjects = Vec::with_capacity(rows.len());
    let mut draws: Option<Vec<Vec<f64>>> = None;

    for x in rows {
        let d0 = m0.draw_medians(x, grid)?;
        let d1 = m1.draw_medians(x, grid)?;
        let subject = match (d0, d1) {
            (Some(d0), Some(d1)) => {
                if d0.is_empty() || d0.len() != d1.len() {
                    return Err(Error::invalid(format!(
                        "arm draw counts differ: {} vs {}",
                        d0.len(),
                        d1.len()
                    )));
                }
                let omega_draws: Vec<f64> =
                    d0.iter().zip(&d1).map(|(a, b)| b.time - a.time).collect();
                let subject = match summary {
                    PointSummary::DrawMean => {
                        let t0 = mean(&d0.iter().map(|q| q.time).collect::<Vec<f64>>());
                        let t1 = mean(&d1.iter().map(|q| q.time).collect::<Vec<f64>>());
                        SubjectEffect {
                            theta0: t0.min(cap),
                            theta1: t1.min(cap),
                            omega: mean(&omega_draws),
                            // A mean of capped draws can sit just under the cap.
                            capped0: t0 >= cap * (1.0 - 1e-12),
                            capped1: t1 >= cap * (1.0 - 1e-12),
                        }
                    }
                    PointSummary::MeanCurve => {
                        let q0 = m0.mean_curve_median(x, grid)?;
                        let q1 = m1.mean_curve_median(x, grid)?;
                        SubjectEffect {
                            theta0: q0.time,
                            theta1: q1.time,
                            omega: q1.time - q0.time,
                            capped0: q0.capped,
                            capped1: q1.capped,
                        }
                    }
                };
                draws.get_or_insert_with(Vec::new).push(omega_draws);
                subject
            }
            (None, None) => {
                let q0 = m0.median_time(x, grid)?;
                let q1 = m1.median_time(x, grid)?;
                SubjectEffect {
                    theta0: q0.time,
                    theta1: q1.time,
                    omega: q1.time - q0.time,
                    capped0: q0.capped,
                    capped1: q1.capped,
                }
            }
            _ => {
                return Err(Error::invalid(
                    "one arm has posterior draws and the other does not",
                ));
            }
        };
        if !subject.omega.is_finite() {
            return Err(Error::numeric("non-finite effect estimate"));
        }
        subjects.push(subject);
    }

    Ok(IsteResult { method, summary, grid: Arc::clone(grid), subjects, draws })
}

/// Appends a fitted propensity column to every record and covariate row.
///
/// The score model is fitted once on the pooled sample; both arm fits and all
/// predictions see the same appended column.
fn append_propensity(
    data: &Dataset,
    seed: u64,
) -> Result<(Dataset, Vec<Vec<f64>>)> {
    let ps = fit_propensity(data, &PropensityConfig::default(), derive_seed(seed, &[0xE5A7]))?;
    let mut names = data.covariate_names().to_vec();
    names.push("ps_hat".to_string());
    let mut records = Vec::with_capacity(data.n());
    let mut rows = Vec::with_capacity(data.n());
    for r in data.records() {
        let mut x = r.x.clone();
        x.push(ps.predict(&r.x));
        rows.push(x.clone());
        records.push(ObservedRecord { x, z: r.z, y: r.y, delta: r.delta });
    }
    Ok((Dataset::new(records, names)?, rows))
}

fn arm_spec(spec: &LearnerSpec, arm: u8) -> LearnerSpec {
    let mut s = spec.clone();
    s.seed = derive_seed(spec.seed, &[0xA53, u64::from(arm)]);
    s
}

/// Fits both arms of `data` with `spec` and contrasts predicted medians for
/// every subject on `grid`.
pub fn estimate_iste(
    data: &Dataset,
    spec: &LearnerSpec,
    grid: &Arc<TimeGrid>,
    summary: PointSummary,
) -> Result<IsteResult> {
    spec.validate()?;
    let (work, rows) = if spec.method.needs_propensity() {
        append_propensity(data, spec.seed)?
    } else {
        let rows = data.records().iter().map(|r| r.x.clone()).collect();
        (data.clone(), rows)
    };
    let arm0 = work.arm_dataset(0)?;
    let arm1 = work.arm_dataset(1)?;
    let m0 = FittedModel::fit(&arm_spec(spec, 0), &arm0)?;
    let m1 = FittedModel::fit(&arm_spec(spec, 1), &arm1)?;
    contrast_models(&m0, &m1, &rows, grid, spec.method, summary)
}

/// Replicate effect estimates from repeated subsampling without replacement.
///
/// Each replicate draws `fraction` of the sample, refits both arms on it, and
/// predicts effects for all original subjects. Returns a subject-by-replicate
/// matrix. Replicates whose subsample loses an arm (or all its events) are
/// redrawn, at most ten times each. Posterior methods carry their own draws
/// and are rejected here.
pub fn iste_subsample(
    data: &Dataset,
    spec: &LearnerSpec,
    grid: &Arc<TimeGrid>,
    reps: usize,
    fraction: f64,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if spec.method.is_bayesian() {
        return Err(Error::invalid(format!(
            "{} carries posterior draws; subsampling is for frequentist methods",
            spec.method
        )));
    }
    if reps == 0 {
        return Err(Error::invalid("subsampling needs at least one replicate"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("subsample fraction must lie in (0, 1]"));
    }
    let n = data.n();
    let m = ((n as f64 * fraction).round() as usize).clamp(2, n);
    let rows: Vec<Vec<f64>> = data.records().iter().map(|r| r.x.clone()).collect();

    let mut out = vec![vec![0.0; reps]; n];
    let mut indices: Vec<usize> = (0..n).collect();
    for rep in 0..reps {
        let mut done = false;
        for attempt in 0..10u64 {
            let mut rng = stream_rng(derive_seed(spec.seed, &[0x5AB5, rep as u64, attempt]));
            indices.shuffle(&mut rng);
            let records: Vec<ObservedRecord> =
                indices[..m].iter().map(|&i| data.records()[i].clone()).collect();
            let sub = Dataset::new(records, data.covariate_names().to_vec())?;
            let (arm0, arm1) = match (sub.arm_dataset(0), sub.arm_dataset(1)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => continue,
            };
            let mut rep_spec = spec.clone();
            rep_spec.seed = derive_seed(spec.seed, &[0x5AB5, rep as u64]);
            let m0 = match FittedModel::fit(&arm_spec(&rep_spec, 0), &arm0) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let m1 = match FittedModel::fit(&arm_spec(&rep_spec, 1), &arm1) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let est = contrast_models(&m0, &m1, &rows, grid, spec.method, PointSummary::DrawMean)?;
            for (i, s) in est.subjects.iter().enumerate() {
                out[i][rep] = s.omega;
            }
            done = true;
            break;
        }
        if !done {
            return Err(Error::fit(
                spec.method.as_str(),
                format!("replicate {rep} kept losing an arm after 10 subsample retries"),
            ));
        }
    }
    Ok(out)
}
