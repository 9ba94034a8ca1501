//! Benchmark performance measures: PEHE, propensity-subclass relative bias,
//! RMSE, expected regret, interval coverage, and the percent-increase-in-PEHE
//! cross-method summary. Subclass measures use the two-stage estimator: a
//! within-subclass mean per replication, then an average over replications.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Quantile partition of one replication's subjects by true propensity.
/// Ids are 0-based internally; sizes differ by at most 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubclassIndex {
    k: usize,
    ids: Vec<usize>,
}

impl SubclassIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0usize; self.k];
        for &id in &self.ids {
            s[id] += 1;
        }
        s
    }
}

/// Rank-based K-quantile partition; ties keep stable subject order.
pub fn subclass_assign(e_true: &[f64], k: usize) -> Result<SubclassIndex> {
    let n = e_true.len();
    if n == 0 {
        return Err(Error::invalid("empty sample".to_string()));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("subclass count {k} must be in 1..={n}")));
    }
    if e_true.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("non-finite propensity".to_string()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| e_true[a].partial_cmp(&e_true[b]).unwrap());
    let mut ids = vec![0usize; n];
    for (rank, &subject) in order.iter().enumerate() {
        ids[subject] = rank * k / n;
    }
    Ok(SubclassIndex { k, ids })
}

/// Root mean squared deviation of per-subject effect estimates.
pub fn pehe(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.is_empty() {
        return Err(Error::invalid("empty sample".to_string()));
    }
    if est.len() != truth.len() {
        return Err(Error::invalid("estimate and truth lengths differ".to_string()));
    }
    let ss: f64 = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / est.len() as f64).sqrt())
}

/// One replication's per-subject effects and its subclass partition.
#[derive(Debug, Clone, Copy)]
pub struct RepEffects<'a> {
    pub est: &'a [f64],
    pub truth: &'a [f64],
    pub subclass: &'a SubclassIndex,
}

fn check_reps(reps: &[RepEffects]) -> Result<usize> {
    if reps.is_empty() {
        return Err(Error::invalid("no replications".to_string()));
    }
    let k = reps[0].subclass.k();
    for r in reps {
        if r.subclass.k() != k {
            return Err(Error::invalid("subclass count differs across replications".to_string()));
        }
        if r.est.len() != r.truth.len() || r.est.len() != r.subclass.n() {
            return Err(Error::invalid("replication arrays have mismatched lengths".to_string()));
        }
    }
    Ok(k)
}

/// Per-replication within-subclass means of f(est_i, truth_i), then the
/// average over replications. Every subclass is nonempty since K <= n.
fn two_stage_mean(reps: &[RepEffects], f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
    let k = check_reps(reps)?;
    let mut acc = vec![0.0; k];
    for r in reps {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, &id) in r.subclass.ids().iter().enumerate() {
            sums[id] += f(r.est[i], r.truth[i]);
            counts[id] += 1;
        }
        for j in 0..k {
            acc[j] += sums[j] / counts[j] as f64;
        }
    }
    let b = reps.len() as f64;
    Ok(acc.into_iter().map(|v| v / b).collect())
}

/// Ratio of the replication-averaged within-subclass mean error to the
/// replication-averaged within-subclass mean true effect. A denominator
/// below 1e-8 in magnitude yields None for that subclass.
pub fn relbias_by_subclass(reps: &[RepEffects]) -> Result<Vec<Option<f64>>> {
    let num = two_stage_mean(reps, |e, t| e - t)?;
    let den = two_stage_mean(reps, |_, t| t)?;
    Ok(num
        .into_iter()
        .zip(den)
        .map(|(n, d)| if d.abs() < 1e-8 { None } else { Some(n / d) })
        .collect())
}

/// Square root of the replication-averaged within-subclass mean squared error.
pub fn rmse_by_subclass(reps: &[RepEffects]) -> Result<Vec<f64>> {
    let ms = two_stage_mean(reps, |e, t| (e - t) * (e - t))?;
    Ok(ms.into_iter().map(f64::sqrt).collect())
}

/// Mean forgone benefit when the estimated sign recommends the wrong arm:
/// within-subclass mean of 1[1(est>0) != 1(truth>0)] * |truth|, averaged
/// over replications.
pub fn regret_by_subclass(reps: &[RepEffects]) -> Result<Vec<f64>> {
    two_stage_mean(reps, |e, t| if (e > 0.0) != (t > 0.0) { t.abs() } else { 0.0 })
}

/// One replication's per-subject 95% intervals with the matching truth.
#[derive(Debug, Clone, Copy)]
pub struct RepIntervals<'a> {
    pub lo: &'a [f64],
    pub hi: &'a [f64],
    pub truth: &'a [f64],
    pub subclass: &'a SubclassIndex,
}

/// Fraction of subjects, pooled over replications within each subclass,
/// whose interval contains the true effect (endpoints inclusive).
pub fn coverage_by_subclass(reps: &[RepIntervals]) -> Result<Vec<f64>> {
    if reps.is_empty() {
        return Err(Error::invalid("no replications".to_string()));
    }
    let k = reps[0].subclass.k();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for r in reps {
        if r.subclass.k() != k {
            return Err(Error::invalid("subclass count differs across replications".to_string()));
        }
        let n = r.subclass.n();
        if r.lo.len() != n || r.hi.len() != n || r.truth.len() != n {
            return Err(Error::invalid("replication arrays have mismatched lengths".to_string()));
        }
        for (i, &id) in r.subclass.ids().iter().enumerate() {
            if r.lo[i] > r.hi[i] {
                return Err(Error::invalid("interval with lo > hi".to_string()));
            }
            totals[id] += 1;
            if r.lo[i] <= r.truth[i] && r.truth[i] <= r.hi[i] {
                hits[id] += 1;
            }
        }
    }
    Ok(hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).collect())
}

/// Percent increase of each method's PEHE over the per-replication best:
/// (PEHE_s / PEHE_min - 1) * 100. All tied minima score 0.
pub fn pct_increase_pehe(pehes: &[f64]) -> Result<Vec<f64>> {
    if pehes.len() < 2 {
        return Err(Error::invalid("need at least 2 methods to compare".to_string()));
    }
    if pehes.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("PEHE values must be nonnegative and finite".to_string()));
    }
    let min = pehes.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        // A perfect method: everything else is infinitely worse; report the
        // difference scale-free as 0 for ties and +inf otherwise is useless
        // downstream, so fall back to absolute zero-reference.
        return Ok(pehes.iter().map(|&p| if p == 0.0 { 0.0 } else { f64::INFINITY }).collect());
    }
    Ok(pehes.iter().map(|&p| (p / min - 1.0) * 100.0).collect())
}

/// Aggregated benchmark measures for one (scenario, method) cell.
///
/// Methods that failed every replication carry NaN aggregates; the serde
/// adapters below encode those as JSON null and restore them on read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsTable {
    pub scenario: String,
    pub method: String,
    #[serde(with = "nan_as_null")]
    pub pehe_mean: f64,
    #[serde(with = "nan_as_null")]
    pub pehe_sd: f64,
    pub relbias: Vec<Option<f64>>,
    #[serde(with = "nan_vec_as_null")]
    pub rmse: Vec<f64>,
    #[serde(with = "nan_vec_as_null")]
    pub regret: Vec<f64>,
    /// None for methods without posterior draws.
    #[serde(with = "nan_opt_vec_as_null", default)]
    pub coverage: Option<Vec<f64>>,
    /// Per-replication percent increase over that replication's best method.
    #[serde(with = "nan_vec_as_null")]
    pub pct_increase: Vec<f64>,
    pub failed_reps: usize,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() { s.serialize_none() } else { s.serialize_some(v) }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

mod nan_vec_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<Option<f64>>::deserialize(d)?;
        Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

mod nan_opt_vec_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(xs) => s.collect_seq(xs.iter().map(|x| if x.is_nan() { None } else { Some(*x) })),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        let raw = Option::<Vec<Option<f64>>>::deserialize(d)?;
        Ok(raw.map(|xs| xs.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()))
    }
}
