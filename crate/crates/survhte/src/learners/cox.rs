//! Cox proportional hazards regression.
//!
//! Newton-Raphson on the Breslow partial likelihood, with an optional
//! quadratic penalty so the spline variant can share the same core. The
//! baseline cumulative hazard is the Breslow estimator at the fitted
//! coefficients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric;
use crate::survcore::{CurveQuantile, Dataset, SurvivalCurve, TimeGrid};

/// Subjects sorted by observed time descending, ties grouped, covariates
/// already centered. Shared between the linear and spline fits.
pub(crate) struct PlData {
    /// Flat row-major design, n x p, in descending-time order.
    pub x: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub groups: Vec<TieGroup>,
    /// Original row index at each sorted position.
    pub order: Vec<usize>,
}

/// One distinct observed time: rows `start..end` share it, and the first
/// `events` of those rows are events (reordered at construction).
pub(crate) struct TieGroup {
    pub start: usize,
    pub end: usize,
    pub events: usize,
    pub time: f64,
}

impl PlData {
    /// Builds from raw rows; centers each column at its mean.
    pub fn new(rows: &[(&[f64], f64, bool)], p: usize) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("partial likelihood needs at least one subject"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        // descending time; events first within a tie so groups can slice them
        order.sort_by(|&a, &b| {
            rows[b]
                .1
                .partial_cmp(&rows[a].1)
                .unwrap()
                .then_with(|| rows[b].2.cmp(&rows[a].2))
        });
        let mut means = vec![0.0; p];
        for r in rows {
            for j in 0..p {
                means[j] += r.0[j];
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut x = Vec::with_capacity(n * p);
        let mut groups: Vec<TieGroup> = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            for j in 0..p {
                x.push(rows[i].0[j] - means[j]);
            }
            let t = rows[i].1;
            let ev = rows[i].2 as usize;
            match groups.last_mut() {
                Some(g) if g.time == t => {
                    g.end = pos + 1;
                    g.events += ev;
                }
                _ => groups.push(TieGroup { start: pos, end: pos + 1, events: ev, time: t }),
            }
        }
        Ok(PlData { x, n, p, groups, order })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn n_events(&self) -> usize {
        self.groups.iter().map(|g| g.events).sum()
    }

    pub fn distinct_event_times(&self) -> usize {
        self.groups.iter().filter(|g| g.events > 0).count()
    }
}

/// Breslow log partial likelihood, gradient, and negated Hessian at
/// `gamma`. Gradient and Hessian are skipped when the flags are off.
pub(crate) fn pl_eval(
    data: &PlData,
    gamma: &[f64],
    want_grad: bool,
    want_hess: bool,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (n, p) = (data.n, data.p);
    let mut eta = vec![0.0; n];
    let mut eta_max = f64::NEG_INFINITY;
    for i in 0..n {
        let xi = data.row(i);
        let mut e = 0.0;
        for j in 0..p {
            e += xi[j] * gamma[j];
        }
        eta[i] = e;
        eta_max = eta_max.max(e);
    }
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; if want_hess { p * p } else { 0 }];
    let mut ll = 0.0;
    let mut grad = vec![0.0; if want_grad { p } else { 0 }];
    let mut neg_hess = vec![0.0; if want_hess { p * p } else { 0 }];
    for g in &data.groups {
        for i in g.start..g.end {
            let w = (eta[i] - eta_max).exp();
            let xi = data.row(i);
            s0 += w;
            for j in 0..p {
                s1[j] += w * xi[j];
            }
            if want_hess {
                for a in 0..p {
                    let wa = w * xi[a];
                    for b in a..p {
                        s2[a * p + b] += wa * xi[b];
                    }
                }
            }
        }
        if g.events == 0 {
            continue;
        }
        let d = g.events as f64;
        for i in g.start..g.start + g.events {
            ll += eta[i];
            if want_grad {
                let xi = data.row(i);
                for j in 0..p {
                    grad[j] += xi[j];
                }
            }
        }
        ll -= d * (eta_max + s0.ln());
        if want_grad {
            for j in 0..p {
                grad[j] -= d * s1[j] / s0;
            }
        }
        if want_hess {
            for a in 0..p {
                for b in a..p {
                    let v = d * (s2[a * p + b] / s0 - (s1[a] / s0) * (s1[b] / s0));
                    neg_hess[a * p + b] += v;
                }
            }
        }
    }
    if want_hess {
        for a in 0..p {
            for b in 0..a {
                neg_hess[a * p + b] = neg_hess[b * p + a];
            }
        }
    }
    (ll, grad, neg_hess)
}

pub(crate) struct PlOptions<'a> {
    /// Quadratic penalty matrix (p x p, flat) times `lambda`; `None` for
    /// the unpenalized fit.
    pub penalty: Option<&'a [f64]>,
    pub lambda: f64,
    /// Extra ridge on the coefficients, used for separation fallback.
    pub ridge: f64,
    pub max_iter: usize,
}

impl Default for PlOptions<'_> {
    fn default() -> Self {
        PlOptions { penalty: None, lambda: 0.0, ridge: 0.0, max_iter: 100 }
    }
}

pub(crate) struct PlResult {
    pub gamma: Vec<f64>,
    /// Penalized objective after each accepted step, strictly for
    /// diagnostics; line search keeps it non-decreasing.
    pub obj_trace: Vec<f64>,
}

/// Penalized objective, gradient, negated Hessian.
fn penalized_eval(
    data: &PlData,
    gamma: &[f64],
    opts: &PlOptions,
    want_grad: bool,
    want_hess: bool,
) -> (f64, Vec<f64>, Vec<f64>) {
    let p = data.p;
    let (mut obj, mut grad, mut neg_hess) = pl_eval(data, gamma, want_grad, want_hess);
    if let Some(s) = opts.penalty {
        let mut sg = vec![0.0; p];
        for a in 0..p {
            for b in 0..p {
                sg[a] += s[a * p + b] * gamma[b];
            }
        }
        let quad: f64 = gamma.iter().zip(&sg).map(|(g, v)| g * v).sum();
        obj -= 0.5 * opts.lambda * quad;
        if want_grad {
            for j in 0..p {
                grad[j] -= opts.lambda * sg[j];
            }
        }
        if want_hess {
            for a in 0..p * p {
                neg_hess[a] += opts.lambda * s[a];
            }
        }
    }
    if opts.ridge > 0.0 {
        let norm2: f64 = gamma.iter().map(|g| g * g).sum();
        obj -= 0.5 * opts.ridge * norm2;
        if want_grad {
            for j in 0..p {
                grad[j] -= opts.ridge * gamma[j];
            }
        }
        if want_hess {
            for a in 0..p {
                neg_hess[a * p + a] += opts.ridge;
            }
        }
    }
    (obj, grad, neg_hess)
}

const GRAD_TOL: f64 = 1e-6;

/// Newton iteration with step halving on the (penalized) partial
/// likelihood. Divergence surfaces as an error; callers decide whether to
/// retry with a ridge.
pub(crate) fn pl_newton(data: &PlData, opts: &PlOptions) -> Result<PlResult> {
    let p = data.p;
    let mut gamma = vec![0.0; p];
    if p == 0 {
        return Ok(PlResult { gamma, obj_trace: vec![] });
    }
    let (mut obj, mut grad, _) = penalized_eval(data, &gamma, opts, true, false);
    let mut trace = vec![obj];
    let mut stagnant = 0;
    for _ in 0..opts.max_iter {
        let norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if norm < GRAD_TOL {
            return Ok(PlResult { gamma, obj_trace: trace });
        }
        // heavy penalties put the gradient's rounding floor above the
        // tolerance; once the objective stops moving the fit is done
        if stagnant >= 3 {
            return if norm < 1e-3 {
                Ok(PlResult { gamma, obj_trace: trace })
            } else {
                Err(Error::numeric(format!(
                    "partial likelihood stalled with gradient norm {norm:.3e}"
                )))
            };
        }
        let (_, _, neg_hess) = penalized_eval(data, &gamma, opts, false, true);
        let step = numeric::solve_spd(&neg_hess, &grad, p)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = gamma.iter().zip(&step).map(|(g, s)| g + t * s).collect();
            let (cand_obj, cand_grad, _) = penalized_eval(data, &cand, opts, true, false);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-12 {
                if cand_obj - obj < 1e-10 * (1.0 + obj.abs()) {
                    stagnant += 1;
                } else {
                    stagnant = 0;
                }
                gamma = cand;
                obj = cand_obj;
                grad = cand_grad;
                trace.push(obj);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        // scale-free divergence check: a fitted log relative hazard this
        // wide means the likelihood is monotone (separation)
        let mut eta_span = 0.0_f64;
        for i in 0..data.n {
            let xi = data.row(i);
            let e: f64 = xi.iter().zip(&gamma).map(|(a, b)| a * b).sum();
            eta_span = eta_span.max(e.abs());
        }
        if !accepted || eta_span > 30.0 {
            return Err(Error::numeric(format!(
                "partial likelihood iteration diverged (log relative hazard span {eta_span:.2})"
            )));
        }
    }
    let norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    if norm < GRAD_TOL {
        Ok(PlResult { gamma, obj_trace: trace })
    } else {
        Err(Error::numeric(format!(
            "partial likelihood did not converge, gradient norm {norm:.3e}"
        )))
    }
}

/// Step-function baseline cumulative hazard on distinct event times.
#[derive(Debug, Clone)]
pub struct BreslowBaseline {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Cumulative baseline hazard at those times.
    pub cumhaz: Vec<f64>,
}

impl BreslowBaseline {
    /// Baseline cumulative hazard at time `t` (0 before the first event).
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 0.0,
            k => self.cumhaz[k - 1],
        }
    }

    /// First event time where the cumulative hazard reaches `target`.
    pub fn crossing(&self, target: f64) -> Option<f64> {
        let k = self.cumhaz.partition_point(|&v| v < target);
        self.times.get(k).copied()
    }
}

/// Breslow baseline at linear scores `eta` (same descending order as
/// `data`). With all-zero scores this reproduces Nelson-Aalen exactly.
pub(crate) fn breslow_baseline(data: &PlData, eta: &[f64]) -> BreslowBaseline {
    let eta_max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let scale = (-eta_max).exp();
    let mut s0 = 0.0;
    let mut steps: Vec<(f64, f64)> = Vec::new();
    for g in &data.groups {
        for i in g.start..g.end {
            s0 += (eta[i] - eta_max).exp();
        }
        if g.events > 0 {
            // d / (sum e^eta); the shift cancels through `scale`
            steps.push((g.time, g.events as f64 * scale / s0));
        }
    }
    steps.reverse();
    let mut times = Vec::with_capacity(steps.len());
    let mut cumhaz = Vec::with_capacity(steps.len());
    let mut acc = 0.0;
    for (t, d) in steps {
        acc += d;
        times.push(t);
        cumhaz.push(acc);
    }
    BreslowBaseline { times, cumhaz }
}

/// Fitted proportional hazards model with linear predictors.
#[derive(Debug, Clone)]
pub struct CoxFit {
    gamma: Vec<f64>,
    x_mean: Vec<f64>,
    baseline: BreslowBaseline,
    /// True when the plain fit diverged (separation) and a ridge penalty
    /// stabilized the reported coefficients.
    ridged: bool,
    obj_trace: Vec<f64>,
}

/// Fits the Cox model. Needs at least two distinct event times; perfectly
/// separating covariates fall back to a small ridge with a flag.
pub fn fit_coxph(data: &Dataset) -> Result<CoxFit> {
    let p = data.p();
    let rows: Vec<(&[f64], f64, bool)> =
        data.records().iter().map(|r| (r.x.as_slice(), r.y, r.delta == 1)).collect();
    let pl = PlData::new(&rows, p)?;
    if pl.distinct_event_times() < 2 {
        return Err(Error::fit("cox_ph", "needs at least two distinct event times"));
    }
    let x_mean: Vec<f64> = (0..p)
        .map(|j| data.records().iter().map(|r| r.x[j]).sum::<f64>() / data.n() as f64)
        .collect();
    let (result, ridged) = match pl_newton(&pl, &PlOptions::default()) {
        Ok(r) => (r, false),
        Err(first) => {
            // separation: escalate the ridge until the fit stabilizes
            let mut rescued = None;
            for scale in [1e-4, 1e-2, 1.0] {
                let ridge = scale * pl.n_events().max(1) as f64;
                if let Ok(r) = pl_newton(&pl, &PlOptions { ridge, ..Default::default() }) {
                    rescued = Some(r);
                    break;
                }
            }
            match rescued {
                Some(r) => (r, true),
                None => return Err(Error::fit("cox_ph", format!("ridge fallback failed: {first}"))),
            }
        }
    };
    let eta: Vec<f64> = (0..pl.n)
        .map(|i| {
            let xi = &pl.x[i * p..(i + 1) * p];
            xi.iter().zip(&result.gamma).map(|(a, b)| a * b).sum()
        })
        .collect();
    let baseline = breslow_baseline(&pl, &eta);
    Ok(CoxFit { gamma: result.gamma, x_mean, baseline, ridged, obj_trace: result.obj_trace })
}

impl CoxFit {
    pub fn coefficients(&self) -> &[f64] {
        &self.gamma
    }

    pub fn was_ridged(&self) -> bool {
        self.ridged
    }

    pub fn baseline(&self) -> &BreslowBaseline {
        &self.baseline
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.obj_trace
    }

    /// Linear risk score for a covariate vector (centered internally).
    pub fn risk_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.gamma.len() {
            return Err(Error::invalid(format!(
                "expected {} covariates, got {}",
                self.gamma.len(),
                x.len()
            )));
        }
        Ok(x.iter()
            .zip(&self.x_mean)
            .zip(&self.gamma)
            .map(|((xi, m), g)| (xi - m) * g)
            .sum())
    }

    pub fn predict_curve(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<SurvivalCurve> {
        let score = self.risk_score(x)?;
        curve_from_baseline(&self.baseline, score, grid)
    }

    pub fn median_time(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<CurveQuantile> {
        let score = self.risk_score(x)?;
        median_from_baseline(&self.baseline, score, grid)
    }
}

/// S(t) = exp(-Lambda0(t) e^score) tabulated on the grid. Shared by every
/// hazard-baseline learner.
pub(crate) fn curve_from_baseline(
    baseline: &BreslowBaseline,
    score: f64,
    grid: &Arc<TimeGrid>,
) -> Result<SurvivalCurve> {
    let rel = score.min(700.0).exp();
    let probs: Vec<f64> = grid.times().iter().map(|&t| (-baseline.at(t) * rel).exp()).collect();
    SurvivalCurve::new(Arc::clone(grid), probs)
}

/// First event time where survival crosses one half, capped at the grid
/// end when the curve never gets there.
pub(crate) fn median_from_baseline(
    baseline: &BreslowBaseline,
    score: f64,
    grid: &Arc<TimeGrid>,
) -> Result<CurveQuantile> {
    let target = std::f64::consts::LN_2 * (-score).min(700.0).exp();
    match baseline.crossing(target) {
        Some(t) if t <= grid.max_time() => Ok(CurveQuantile { time: t, capped: false }),
        _ => Ok(CurveQuantile { time: grid.max_time(), capped: true }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::survcore::{make_grid, nelson_aalen, ObservedRecord};
    use rand::Rng;

    fn two_group(n: usize, seed: u64, hr: f64, cens_rate: f64) -> Dataset {
        let mut rng = stream_rng(seed);
        let records: Vec<ObservedRecord> = (0..n)
            .map(|i| {
                let x = (i % 2) as f64;
                let rate = 0.1 * hr.powf(x);
                let t = -(1.0 - rng.gen::<f64>()).ln() / rate;
                let c = -(1.0 - rng.gen::<f64>()).ln() / cens_rate;
                ObservedRecord { x: vec![x], z: 0, y: t.min(c), delta: (t < c) as u8 }
            })
            .collect();
        Dataset::new(records, vec!["x1".into()]).unwrap()
    }

    #[test]
    fn null_model_baseline_is_nelson_aalen_exactly() {
        let mut rng = stream_rng(9);
        let records: Vec<ObservedRecord> = (0..200)
            .map(|_| {
                let t = -(1.0 - rng.gen::<f64>()).ln() / 0.05;
                let c = -(1.0 - rng.gen::<f64>()).ln() / 0.02;
                ObservedRecord { x: vec![], z: 0, y: t.min(c), delta: (t < c) as u8 }
            })
            .collect();
        let data = Dataset::new(records, vec![]).unwrap();
        let fit = fit_coxph(&data).unwrap();
        let na = nelson_aalen(&data.times(), &data.events(), None).unwrap();
        // the hazard grid anchors at t = 0 with zero mass; jumps follow
        assert_eq!(fit.baseline().times.as_slice(), &na.grid.times()[1..]);
        assert_eq!(fit.baseline().cumhaz.as_slice(), &na.values[1..]);
    }

    #[test]
    fn recovers_log_hazard_ratio_two() {
        let data = two_group(5000, 21, 2.0, 0.03);
        let fit = fit_coxph(&data).unwrap();
        let got = fit.gamma[0];
        let want = 2.0_f64.ln();
        assert!((got - want).abs() < 0.1, "coefficient {got} vs {want}");
        assert!(!fit.was_ridged());
    }

    #[test]
    fn gradient_vanishes_at_the_fit() {
        let data = two_group(600, 3, 2.0, 0.03);
        let rows: Vec<(&[f64], f64, bool)> =
            data.records().iter().map(|r| (r.x.as_slice(), r.y, r.delta == 1)).collect();
        let pl = PlData::new(&rows, 1).unwrap();
        let fit = fit_coxph(&data).unwrap();
        let (_, grad, _) = pl_eval(&pl, fit.coefficients(), true, false);
        let norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn pl_gradient_matches_finite_differences() {
        let data = two_group(80, 5, 1.5, 0.05);
        let mut rng = stream_rng(6);
        // widen to two covariates so cross terms get exercised
        let rows_own: Vec<(Vec<f64>, f64, bool)> = data
            .records()
            .iter()
            .map(|r| (vec![r.x[0], rng.gen::<f64>()], r.y, r.delta == 1))
            .collect();
        let rows: Vec<(&[f64], f64, bool)> =
            rows_own.iter().map(|r| (r.0.as_slice(), r.1, r.2)).collect();
        let pl = PlData::new(&rows, 2).unwrap();
        let gamma = [0.4, -0.7];
        let (_, grad, neg_hess) = pl_eval(&pl, &gamma, true, true);
        let h = 1e-6;
        for k in 0..2 {
            let mut gp = gamma;
            gp[k] += h;
            let mut gm = gamma;
            gm[k] -= h;
            let (lp, gradp, _) = pl_eval(&pl, &gp, true, false);
            let (lm, gradm, _) = pl_eval(&pl, &gm, true, false);
            let fd = (lp - lm) / (2.0 * h);
            assert!((grad[k] - fd).abs() < 1e-5 * (1.0 + fd.abs()), "grad[{k}]");
            for a in 0..2 {
                let fd_h = -(gradp[a] - gradm[a]) / (2.0 * h);
                assert!(
                    (neg_hess[a * 2 + k] - fd_h).abs() < 1e-4 * (1.0 + fd_h.abs()),
                    "hess[{a},{k}]"
                );
            }
        }
    }

    #[test]
    fn separation_falls_back_to_ridge() {
        // covariate strictly decreasing in event time: likelihood is
        // monotone in gamma, the textbook separation case
        let records: Vec<ObservedRecord> = (0..30)
            .map(|i| ObservedRecord {
                x: vec![-0.1 * i as f64],
                z: 0,
                y: (i + 1) as f64,
                delta: 1,
            })
            .collect();
        let data = Dataset::new(records, vec!["x1".into()]).unwrap();
        let fit = fit_coxph(&data).unwrap();
        assert!(fit.was_ridged());
        assert!(fit.gamma[0].is_finite());
    }

    #[test]
    fn curves_order_by_risk_score() {
        let data = two_group(800, 13, 2.0, 0.03);
        let fit = fit_coxph(&data).unwrap();
        let grid = make_grid(&data.times(), 300).unwrap();
        let hi = fit.predict_curve(&[1.0], &grid).unwrap();
        let lo = fit.predict_curve(&[0.0], &grid).unwrap();
        for (a, b) in hi.probs.iter().zip(&lo.probs) {
            assert!(a <= b, "higher risk must not out-survive lower risk");
        }
        let med_hi = fit.median_time(&[1.0], &grid).unwrap();
        let med_lo = fit.median_time(&[0.0], &grid).unwrap();
        assert!(med_hi.time <= med_lo.time);
    }

    #[test]
    fn median_matches_curve_readout() {
        let data = two_group(1000, 29, 2.0, 0.02);
        let fit = fit_coxph(&data).unwrap();
        let grid = make_grid(&data.times(), 500).unwrap();
        for x in [[0.0], [1.0]] {
            let exact = fit.median_time(&x, &grid).unwrap();
            let curve = fit.predict_curve(&x, &grid).unwrap();
            let read = crate::survcore::curve_quantile(&curve, 0.5).unwrap();
            if !exact.capped {
                assert!(
                    (exact.time - read.time).abs() <= grid.step() + 1e-9,
                    "crossing {} vs grid readout {}",
                    exact.time,
                    read.time
                );
            }
        }
    }

    #[test]
    fn needs_two_distinct_event_times() {
        let records: Vec<ObservedRecord> = (0..20)
            .map(|i| ObservedRecord { x: vec![i as f64], z: 0, y: 5.0, delta: (i == 0) as u8 })
            .collect();
        let data = Dataset::new(records, vec!["x1".into()]).unwrap();
        assert!(fit_coxph(&data).is_err());
    }
}
