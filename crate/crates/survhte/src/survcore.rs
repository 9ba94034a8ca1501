//! Core survival data types and nonparametric primitives shared by every
//! learner and metric: observed records, time grids, survival curves,
//! cumulative hazards, the Nelson-Aalen estimator, and quantile extraction
//! from step curves.

use crate::error::{Error, Result};
use std::sync::Arc;

/// Number of points in the default analysis grid.
pub const DEFAULT_GRID_POINTS: usize = 500;

/// One subject: covariates, binary treatment, observed time (months) and
/// event indicator (1 = event observed, 0 = right-censored).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObservedRecord {
    pub x: Vec<f64>,
    pub z: u8,
    pub y: f64,
    pub delta: u8,
}

impl ObservedRecord {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.x.len() != p {
            return Err(Error::invalid(format!(
                "record has {} covariates, expected {p}",
                self.x.len()
            )));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite covariate entry".to_string()));
        }
        if !(self.y.is_finite() && self.y > 0.0) {
            return Err(Error::invalid(format!("observed time must be positive and finite, got {}", self.y)));
        }
        if self.z > 1 || self.delta > 1 {
            return Err(Error::invalid("treatment and event indicators must be 0 or 1".to_string()));
        }
        Ok(())
    }
}

/// A fitting set: records plus covariate labels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dataset {
    records: Vec<ObservedRecord>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<ObservedRecord>, covariate_names: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("empty sample".to_string()));
        }
        let p = covariate_names.len();
        if covariate_names.iter().any(|n| n.is_empty()) {
            return Err(Error::invalid("covariate names must be nonempty".to_string()));
        }
        let mut sorted = covariate_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != p {
            return Err(Error::invalid("covariate names must be unique".to_string()));
        }
        for r in &records {
            r.validate(p)?;
        }
        Ok(Dataset { records, covariate_names })
    }

    pub fn records(&self) -> &[ObservedRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    /// Rows with the given treatment value, preserving order.
    pub fn arm(&self, z: u8) -> Vec<&ObservedRecord> {
        self.records.iter().filter(|r| r.z == z).collect()
    }

    /// Requires at least one observed event in the arm it is fit on.
    pub fn arm_dataset(&self, z: u8) -> Result<Dataset> {
        let recs: Vec<ObservedRecord> = self.records.iter().filter(|r| r.z == z).cloned().collect();
        if recs.is_empty() {
            return Err(Error::invalid(format!("treatment arm {z} is empty")));
        }
        if !recs.iter().any(|r| r.delta == 1) {
            return Err(Error::invalid(format!("treatment arm {z} has no events")));
        }
        Dataset::new(recs, self.covariate_names.clone())
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    pub fn events(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.delta).collect()
    }
}

/// Strictly increasing sequence of nonnegative times starting at 0.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("empty time grid".to_string()));
        }
        if times[0] != 0.0 {
            return Err(Error::invalid("time grid must start at 0".to_string()));
        }
        for w in times.windows(2) {
            if !(w[1].is_finite() && w[1] > w[0]) {
                return Err(Error::invalid("time grid must be strictly increasing and finite".to_string()));
            }
        }
        Ok(TimeGrid { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Spacing between consecutive points; for non-uniform grids this is
    /// the largest gap, the resolution bound quoted by quantile checks.
    pub fn step(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Index of the largest grid time <= t (right-continuous lookup).
    pub fn index_at(&self, t: f64) -> usize {
        match self.times.binary_search_by(|g| g.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }
}

/// Equally spaced grid from 0 to the 99th percentile of the observed times.
pub fn make_grid(observed_times: &[f64], points: usize) -> Result<Arc<TimeGrid>> {
    if observed_times.is_empty() {
        return Err(Error::invalid("empty sample".to_string()));
    }
    if points < 2 {
        return Err(Error::invalid("grid needs at least 2 points".to_string()));
    }
    if observed_times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::invalid("observed times must be positive and finite".to_string()));
    }
    let hi = crate::numeric::quantile(observed_times, 0.99)?;
    let hi = if hi > 0.0 { hi } else { observed_times.iter().cloned().fold(0.0, f64::max) };
    let step = hi / (points - 1) as f64;
    let times: Vec<f64> = (0..points).map(|i| i as f64 * step).collect();
    Ok(Arc::new(TimeGrid::new(times)?))
}

/// Step survival function tabulated on a grid; probs[0] = 1, nonincreasing.
#[derive(Debug, Clone)]
pub struct SurvivalCurve {
    pub grid: Arc<TimeGrid>,
    pub probs: Vec<f64>,
}

impl SurvivalCurve {
    pub fn new(grid: Arc<TimeGrid>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.len() {
            return Err(Error::invalid("curve length does not match grid".to_string()));
        }
        if (probs[0] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("survival at time 0 must be 1, got {}", probs[0])));
        }
        for w in probs.windows(2) {
            if !(w[1].is_finite()) || w[1] > w[0] + 1e-12 {
                return Err(Error::invalid("survival probabilities must be nonincreasing".to_string()));
            }
        }
        if probs.iter().any(|p| *p < -1e-12 || *p > 1.0 + 1e-12) {
            return Err(Error::invalid("survival probabilities must lie in [0,1]".to_string()));
        }
        Ok(SurvivalCurve { grid, probs })
    }
}

/// Nondecreasing cumulative hazard on a grid; values[0] = 0.
#[derive(Debug, Clone)]
pub struct CumulativeHazard {
    pub grid: Arc<TimeGrid>,
    pub values: Vec<f64>,
}

impl CumulativeHazard {
    pub fn new(grid: Arc<TimeGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("hazard length does not match grid".to_string()));
        }
        if values[0] != 0.0 {
            return Err(Error::invalid("cumulative hazard at time 0 must be 0".to_string()));
        }
        for w in values.windows(2) {
            if !w[1].is_finite() || w[1] < w[0] - 1e-12 {
                return Err(Error::invalid("cumulative hazard must be nondecreasing and finite".to_string()));
            }
        }
        Ok(CumulativeHazard { grid, values })
    }

    /// S = exp(-Lambda) on the same grid.
    pub fn to_survival(&self) -> SurvivalCurve {
        let probs: Vec<f64> = self.values.iter().map(|v| (-v).exp()).collect();
        SurvivalCurve { grid: self.grid.clone(), probs }
    }
}

/// Nelson-Aalen cumulative hazard estimator with optional positive risk
/// weights. Tied event times are pooled into a single jump of
/// (weighted events at t) / (weighted risk set at t).
pub fn nelson_aalen(times: &[f64], events: &[u8], risk_weights: Option<&[f64]>) -> Result<CumulativeHazard> {
    if times.is_empty() {
        return Err(Error::invalid("empty sample".to_string()));
    }
    if times.len() != events.len() {
        return Err(Error::invalid("times and events lengths differ".to_string()));
    }
    if let Some(w) = risk_weights {
        if w.len() != times.len() {
            return Err(Error::invalid("weights length differs from sample".to_string()));
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("risk weights must be positive".to_string()));
        }
    }
    if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::invalid("times must be positive".to_string()));
    }
    if !events.iter().any(|d| *d == 1) {
        return Err(Error::invalid("no events".to_string()));
    }

    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());

    let wt = |i: usize| risk_weights.map_or(1.0, |w| w[i]);
    let mut at_risk: f64 = (0..n).map(wt).sum();

    let mut grid_times = vec![0.0];
    let mut values = vec![0.0];
    let mut cum = 0.0;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut died = 0.0;
        let mut leaving = 0.0;
        let mut j = i;
        while j < n && times[order[j]] == t {
            let w = wt(order[j]);
            leaving += w;
            if events[order[j]] == 1 {
                died += w;
            }
            j += 1;
        }
        if died > 0.0 {
            cum += died / at_risk;
            grid_times.push(t);
            values.push(cum);
        }
        at_risk -= leaving;
        i = j;
    }
    let grid = Arc::new(TimeGrid::new(grid_times)?);
    CumulativeHazard::new(grid, values)
}

/// Right-continuous step evaluation: value at the largest grid time <= t;
/// constant extrapolation beyond the last grid point.
pub fn curve_eval(curve: &SurvivalCurve, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("evaluation time must be nonnegative, got {t}")));
    }
    Ok(curve.probs[curve.grid.index_at(t)])
}

/// A quantile read off a step curve, with a flag set when the curve never
/// drops far enough and the value was capped at the final grid time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveQuantile {
    pub time: f64,
    pub capped: bool,
}

/// Largest grid time t with 1 - S(t) <= q. If the curve never reaches
/// 1 - q the final grid time is returned with the capped flag set.
pub fn curve_quantile(curve: &SurvivalCurve, q: f64) -> Result<CurveQuantile> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("quantile level must be in (0,1), got {q}")));
    }
    let target = 1.0 - q;
    // probs are nonincreasing: find the last index with probs >= target.
    let probs = &curve.probs;
    if *probs.last().unwrap() >= target {
        return Ok(CurveQuantile { time: curve.grid.max_time(), capped: true });
    }
    // Binary search for the first index with probs < target.
    let mut lo = 0usize;
    let mut hi = probs.len() - 1;
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if probs[mid] >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CurveQuantile { time: curve.grid.times()[lo], capped: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve_from_pairs(pairs: &[(f64, f64)]) -> SurvivalCurve {
        let grid = Arc::new(TimeGrid::new(pairs.iter().map(|p| p.0).collect()).unwrap());
        SurvivalCurve::new(grid, pairs.iter().map(|p| p.1).collect()).unwrap()
    }

    #[test]
    fn nelson_aalen_hand_sums() {
        // times [1,2,3], events [1,1,0]: jumps 1/3 then 1/2.
        let chf = nelson_aalen(&[1.0, 2.0, 3.0], &[1, 1, 0], None).unwrap();
        let s = chf.to_survival();
        let at = |t: f64| {
            let idx = chf.grid.index_at(t);
            chf.values[idx]
        };
        assert!((at(1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((at(2.0) - 5.0 / 6.0).abs() < 1e-15);
        assert!((at(3.0) - 5.0 / 6.0).abs() < 1e-15, "no jump at a censoring time");
        assert!((curve_eval(&s, 2.5).unwrap() - (-5.0f64 / 6.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn nelson_aalen_single_event() {
        let chf = nelson_aalen(&[5.0], &[1], None).unwrap();
        assert_eq!(chf.values, vec![0.0, 1.0]);
        assert_eq!(chf.grid.times(), &[0.0, 5.0]);
    }

    #[test]
    fn nelson_aalen_pools_ties() {
        // times [1,1,2] all events: jump 2/3 at t=1, then 1 at t=2.
        let chf = nelson_aalen(&[1.0, 1.0, 2.0], &[1, 1, 1], None).unwrap();
        assert_eq!(chf.grid.times(), &[0.0, 1.0, 2.0]);
        assert!((chf.values[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((chf.values[2] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nelson_aalen_error_cases() {
        assert!(nelson_aalen(&[], &[], None).is_err(), "empty sample");
        assert!(nelson_aalen(&[1.0, 2.0], &[0, 0], None).is_err(), "all censored");
        assert!(nelson_aalen(&[1.0], &[1], Some(&[-1.0])).is_err(), "negative weight");
    }

    #[test]
    fn nelson_aalen_matches_serial_sum_without_ties() {
        // Brute force 1/R_l at each event on a small untied sample.
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(5);
        for _ in 0..25 {
            let n = rng.gen_range(1..=20);
            // strictly distinct times by construction
            let times: Vec<f64> = (0..n).map(|i| (i + 1) as f64 + rng.gen::<f64>() * 0.5).collect();
            let events: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.7) as u8).collect();
            if !events.contains(&1) {
                continue;
            }
            let chf = nelson_aalen(&times, &events, None).unwrap();
            // serial oracle
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
            let mut cum = 0.0;
            let mut expect = vec![];
            for (pos, &i) in idx.iter().enumerate() {
                if events[i] == 1 {
                    cum += 1.0 / (n - pos) as f64;
                    expect.push((times[i], cum));
                }
            }
            for (k, (t, v)) in expect.iter().enumerate() {
                assert!((chf.grid.times()[k + 1] - t).abs() < 1e-15);
                assert!((chf.values[k + 1] - v).abs() < 1e-12, "serial sum mismatch");
            }
        }
    }

    #[test]
    fn curve_eval_step_semantics() {
        let c = curve_from_pairs(&[(0.0, 1.0), (2.0, 0.5)]);
        assert_eq!(curve_eval(&c, 1.0).unwrap(), 1.0);
        assert_eq!(curve_eval(&c, 2.0).unwrap(), 0.5);
        assert_eq!(curve_eval(&c, 99.0).unwrap(), 0.5);
        assert!(curve_eval(&c, -0.1).is_err());
    }

    #[test]
    fn curve_quantile_exponential_median() {
        // S(t) = exp(-0.05 t) tabulated densely: median ~ ln 2 / 0.05.
        let lambda = 0.05;
        let pts: Vec<f64> = (0..2000).map(|i| i as f64 * 0.025).collect();
        let grid = Arc::new(TimeGrid::new(pts.clone()).unwrap());
        let probs: Vec<f64> = pts.iter().map(|t| (-lambda * t).exp()).collect();
        let c = SurvivalCurve::new(grid, probs).unwrap();
        let q = curve_quantile(&c, 0.5).unwrap();
        assert!(!q.capped);
        let truth = std::f64::consts::LN_2 / lambda;
        assert!((q.time - truth).abs() <= 0.025 + 1e-12, "median {} vs {truth}", q.time);
    }

    #[test]
    fn curve_quantile_weibull_median() {
        // S(t) = exp(-(t/30)^2): median 30 sqrt(ln 2) ~ 24.98.
        let pts: Vec<f64> = (0..4000).map(|i| i as f64 * 0.02).collect();
        let grid = Arc::new(TimeGrid::new(pts.clone()).unwrap());
        let probs: Vec<f64> = pts.iter().map(|t| (-(t / 30.0) * (t / 30.0)).exp()).collect();
        let c = SurvivalCurve::new(grid, probs).unwrap();
        let q = curve_quantile(&c, 0.5).unwrap();
        let truth = 30.0 * std::f64::consts::LN_2.sqrt();
        assert!((q.time - truth).abs() <= 0.02 + 1e-12, "median {} vs {truth}", q.time);
    }

    #[test]
    fn curve_quantile_caps_when_never_crossing() {
        let c = curve_from_pairs(&[(0.0, 1.0), (5.0, 1.0), (9.0, 1.0)]);
        let q = curve_quantile(&c, 0.5).unwrap();
        assert!(q.capped);
        assert_eq!(q.time, 9.0);
        assert!(curve_quantile(&c, 0.0).is_err());
        assert!(curve_quantile(&c, 1.0).is_err());
    }

    #[test]
    fn quantile_monotone_in_level() {
        let c = curve_from_pairs(&[(0.0, 1.0), (1.0, 0.8), (2.0, 0.55), (3.0, 0.30), (4.0, 0.1)]);
        let q1 = curve_quantile(&c, 0.25).unwrap().time;
        let q2 = curve_quantile(&c, 0.5).unwrap().time;
        let q3 = curve_quantile(&c, 0.85).unwrap().time;
        assert!(q1 <= q2 && q2 <= q3, "{q1} {q2} {q3}");
    }

    #[test]
    fn na_composes_to_valid_curve() {
        let chf = nelson_aalen(&[1.0, 2.0, 2.0, 4.0, 7.0], &[1, 1, 0, 1, 1], None).unwrap();
        let s = chf.to_survival();
        SurvivalCurve::new(s.grid.clone(), s.probs.clone()).expect("exp(-NA) must satisfy curve invariants");
    }

    #[test]
    fn make_grid_spans_0_to_q99() {
        let times: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        let g = make_grid(&times, 500).unwrap();
        assert_eq!(g.len(), 500);
        assert_eq!(g.times()[0], 0.0);
        let q99 = crate::numeric::quantile(&times, 0.99).unwrap();
        assert!((g.max_time() - q99).abs() < 1e-9);
    }

    #[test]
    fn dataset_validation() {
        let rec = |x: Vec<f64>, z: u8, y: f64, d: u8| ObservedRecord { x, z, y, delta: d };
        let ds = Dataset::new(
            vec![rec(vec![0.0], 0, 1.0, 1), rec(vec![1.0], 1, 2.0, 0)],
            vec!["x1".into()],
        )
        .unwrap();
        assert_eq!(ds.n(), 2);
        assert!(ds.arm_dataset(1).is_err(), "arm without events must be rejected for fitting");
        assert!(Dataset::new(vec![rec(vec![0.0], 0, -1.0, 1)], vec!["x1".into()]).is_err());
        assert!(Dataset::new(vec![], vec!["x1".into()]).is_err());
        assert!(
            Dataset::new(vec![rec(vec![0.0, 1.0], 0, 1.0, 1)], vec!["a".into(), "a".into()]).is_err(),
            "duplicate names"
        );
    }
}
