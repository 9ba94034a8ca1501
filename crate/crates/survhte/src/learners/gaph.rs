//! Proportional hazards with penalized spline covariate effects.
//!
//! Continuous covariates enter through cubic B-spline bases with interior
//! knots at empirical quantiles; binary covariates stay linear. A single
//! curvature penalty multiplier is chosen by k-fold cross-validated
//! partial likelihood, then the model is refit on the full data.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::learners::cox::{
    breslow_baseline, curve_from_baseline, median_from_baseline, pl_eval, pl_newton,
    BreslowBaseline, PlData, PlOptions,
};
use crate::learners::GamConfig;
use crate::rng::stream_rng;
use crate::survcore::{CurveQuantile, Dataset, SurvivalCurve, TimeGrid};
use rand::seq::SliceRandom;

const DEGREE: usize = 3;

/// Cubic B-spline basis on [lo, hi] with deduplicated interior knots.
#[derive(Debug, Clone)]
struct SplineBasis {
    /// Padded knot vector: degree+1 copies of each boundary.
    knots: Vec<f64>,
    n_basis: usize,
    lo: f64,
    hi: f64,
}

impl SplineBasis {
    fn new(values: &[f64], interior: usize) -> Result<Self> {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if !(hi > lo) {
            return Err(Error::invalid("spline basis needs a non-degenerate range"));
        }
        let mut inner = Vec::with_capacity(interior);
        for k in 1..=interior {
            let q = crate::numeric::quantile_sorted(&sorted, k as f64 / (interior + 1) as f64)?;
            if q > lo && q < hi && inner.last().map_or(true, |&last| q > last) {
                inner.push(q);
            }
        }
        let mut knots = vec![lo; DEGREE + 1];
        knots.extend_from_slice(&inner);
        knots.extend(std::iter::repeat(hi).take(DEGREE + 1));
        let n_basis = inner.len() + DEGREE + 1;
        Ok(SplineBasis { knots, n_basis, lo, hi })
    }

    fn span(&self, x: f64) -> usize {
        let last = self.knots.len() - DEGREE - 2;
        if x >= self.hi {
            return last;
        }
        let raw = self.knots.partition_point(|&u| u <= x);
        raw.saturating_sub(1).clamp(DEGREE, last)
    }

    /// Writes all basis function values at `x` (clamped to the training
    /// range) into `out`, which must hold `n_basis` slots.
    fn eval(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_basis);
        out.fill(0.0);
        let x = x.clamp(self.lo, self.hi);
        let m = self.span(x);
        let u = &self.knots;
        let mut n = [0.0; DEGREE + 1];
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = x - u[m + 1 - j];
            right[j] = u[m + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (r, &v) in n.iter().enumerate() {
            out[m - DEGREE + r] = v;
        }
    }

    /// Values and first `orders` derivatives of the active basis functions
    /// on the polynomial piece of span `m`, evaluated at `x` (which may be
    /// either endpoint of the span). Returns rows [order][0..=DEGREE]
    /// aligned to basis indices m-DEGREE..=m.
    fn ders_at_span(&self, x: f64, m: usize, orders: usize) -> Vec<[f64; DEGREE + 1]> {
        let u = &self.knots;
        let p = DEGREE;
        let mut ndu = [[0.0; DEGREE + 1]; DEGREE + 1];
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[m + 1 - j];
            right[j] = u[m + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![[0.0; DEGREE + 1]; orders + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = [[0.0; DEGREE + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=orders {
                let mut d = 0.0;
                let rk = r as i64 - k as i64;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as i64 - 1 <= pk as i64 { k - 1 } else { p - r };
                for j in j1..=j2 {
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][(rk + j as i64) as usize];
                    d += a[s2][j] * ndu[(rk + j as i64) as usize][pk];
                }
                if r as i64 <= pk as i64 {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=orders {
            for j in 0..=p {
                ders[k][j] *= factor;
            }
            factor *= (p - k) as f64;
        }
        ders
    }

    /// Exact curvature penalty matrix: entries are the integrals of
    /// products of second derivatives. Second derivatives of cubics are
    /// piecewise linear, so a two-point endpoint rule is exact.
    fn curvature_penalty(&self) -> Vec<f64> {
        let nb = self.n_basis;
        let mut s = vec![0.0; nb * nb];
        let last = self.knots.len() - DEGREE - 2;
        for m in DEGREE..=last {
            let (t0, t1) = (self.knots[m], self.knots[m + 1]);
            let h = t1 - t0;
            if h <= 0.0 {
                continue;
            }
            let d_lo = self.ders_at_span(t0, m, 2);
            let d_hi = self.ders_at_span(t1, m, 2);
            for ra in 0..=DEGREE {
                let ia = m - DEGREE + ra;
                for rb in 0..=DEGREE {
                    let ib = m - DEGREE + rb;
                    let (al, ah) = (d_lo[2][ra], d_hi[2][ra]);
                    let (bl, bh) = (d_lo[2][rb], d_hi[2][rb]);
                    s[ia * nb + ib] += h / 6.0 * (2.0 * al * bl + al * bh + ah * bl + 2.0 * ah * bh);
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
enum ColKind {
    /// Spline-expanded; the last basis column is dropped for
    /// identifiability.
    Smooth(SplineBasis),
    Linear,
}

/// Mapping from raw covariates to the expanded design.
#[derive(Debug, Clone)]
struct GamDesign {
    kinds: Vec<ColKind>,
    /// Expanded-column block per raw covariate, half-open.
    blocks: Vec<(usize, usize)>,
    total: usize,
    /// Training means of expanded columns; predictions subtract them.
    col_means: Vec<f64>,
}

impl GamDesign {
    fn build(data: &Dataset, knots: usize) -> Result<Self> {
        let p = data.p();
        let mut kinds = Vec::with_capacity(p);
        let mut blocks = Vec::with_capacity(p);
        let mut total = 0;
        for j in 0..p {
            let mut vals: Vec<f64> = data.records().iter().map(|r| r.x[j]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            let kind = if vals.len() > 2 {
                let col: Vec<f64> = data.records().iter().map(|r| r.x[j]).collect();
                ColKind::Smooth(SplineBasis::new(&col, knots)?)
            } else {
                ColKind::Linear
            };
            let width = match &kind {
                ColKind::Smooth(b) => b.n_basis - 1,
                ColKind::Linear => 1,
            };
            kinds.push(kind);
            blocks.push((total, total + width));
            total += width;
        }
        let mut design = GamDesign { kinds, blocks, total, col_means: vec![0.0; total] };
        let mut sums = vec![0.0; total];
        let mut row = vec![0.0; total];
        for r in data.records() {
            design.expand_raw(&r.x, &mut row);
            for (sum, v) in sums.iter_mut().zip(&row) {
                *sum += v;
            }
        }
        for (m, s) in design.col_means.iter_mut().zip(&sums) {
            *m = s / data.n() as f64;
        }
        Ok(design)
    }

    /// Expanded row without centering.
    fn expand_raw(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.total);
        let mut scratch = Vec::new();
        for (j, kind) in self.kinds.iter().enumerate() {
            let (start, end) = self.blocks[j];
            match kind {
                ColKind::Smooth(basis) => {
                    scratch.resize(basis.n_basis, 0.0);
                    basis.eval(x[j], &mut scratch);
                    out[start..end].copy_from_slice(&scratch[..basis.n_basis - 1]);
                }
                ColKind::Linear => out[start] = x[j],
            }
        }
    }

    /// Expanded, centered row as used by the fitted linear predictor.
    fn expand(&self, x: &[f64], out: &mut [f64]) {
        self.expand_raw(x, out);
        for (v, m) in out.iter_mut().zip(&self.col_means) {
            *v -= m;
        }
    }

    /// Block-diagonal curvature penalty over the smooth blocks.
    fn penalty(&self) -> Vec<f64> {
        let t = self.total;
        let mut s = vec![0.0; t * t];
        for (j, kind) in self.kinds.iter().enumerate() {
            if let ColKind::Smooth(basis) = kind {
                let (start, _) = self.blocks[j];
                let full = basis.curvature_penalty();
                let nb = basis.n_basis;
                // drop the last basis function's row and column
                for a in 0..nb - 1 {
                    for b in 0..nb - 1 {
                        s[(start + a) * t + (start + b)] = full[a * nb + b];
                    }
                }
            }
        }
        s
    }
}

/// Fitted spline proportional hazards model.
#[derive(Debug)]
pub struct GamCoxFit {
    design: GamDesign,
    gamma: Vec<f64>,
    baseline: BreslowBaseline,
    lambda: f64,
    obj_trace: Vec<f64>,
}

/// Fits the spline hazard model. Requires at least 20 events.
pub fn fit_gam_cox(data: &Dataset, config: &GamConfig, seed: u64) -> Result<GamCoxFit> {
    let n_events = data.records().iter().filter(|r| r.delta == 1).count();
    if n_events < 20 {
        return Err(Error::fit("gam_cox", format!("needs at least 20 events, found {n_events}")));
    }
    let design = GamDesign::build(data, config.knots)?;
    let t = design.total;
    let mut expanded: Vec<Vec<f64>> = Vec::with_capacity(data.n());
    for r in data.records() {
        let mut row = vec![0.0; t];
        design.expand(&r.x, &mut row);
        expanded.push(row);
    }
    let rows: Vec<(&[f64], f64, bool)> = expanded
        .iter()
        .zip(data.records())
        .map(|(e, r)| (e.as_slice(), r.y, r.delta == 1))
        .collect();
    let penalty = design.penalty();
    let full = PlData::new(&rows, t)?;
    if full.distinct_event_times() < 2 {
        return Err(Error::fit("gam_cox", "needs at least two distinct event times"));
    }

    // scale that balances likelihood curvature against penalty curvature
    let (_, _, h0) = pl_eval(&full, &vec![0.0; t], false, true);
    let tr_h: f64 = (0..t).map(|a| h0[a * t + a]).sum();
    let tr_s: f64 = (0..t).map(|a| penalty[a * t + a]).sum();
    let lambda0 = if tr_s > 0.0 { (tr_h / tr_s).max(1e-300) } else { 1.0 };

    let lambda = match config.fixed_lambda {
        Some(mult) => mult * lambda0,
        None => {
            let grid: Vec<f64> = (0..config.lambda_grid)
                .map(|i| {
                    let e = -3.0 + 6.0 * i as f64 / (config.lambda_grid.max(2) - 1) as f64;
                    lambda0 * 10f64.powf(e)
                })
                .collect();
            cross_validate_lambda(&rows, t, &penalty, &grid, config.cv_folds, seed)?
        }
    };

    let result = pl_newton(
        &full,
        &PlOptions { penalty: Some(&penalty), lambda, ..Default::default() },
    )
    .or_else(|_| {
        pl_newton(
            &full,
            &PlOptions {
                penalty: Some(&penalty),
                lambda,
                ridge: 1e-4 * n_events as f64,
                ..Default::default()
            },
        )
    })
    .map_err(|e| Error::fit("gam_cox", format!("{e}")))?;

    let eta: Vec<f64> = (0..full.n)
        .map(|i| {
            let xi = &full.x[i * t..(i + 1) * t];
            xi.iter().zip(&result.gamma).map(|(a, b)| a * b).sum()
        })
        .collect();
    let baseline = breslow_baseline(&full, &eta);
    Ok(GamCoxFit { design, gamma: result.gamma, baseline, lambda, obj_trace: result.obj_trace })
}

/// Held-out partial likelihood summed over folds, maximized over the grid.
fn cross_validate_lambda(
    rows: &[(&[f64], f64, bool)],
    t: usize,
    penalty: &[f64],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(crate::rng::derive_seed(seed, &[0xF01D])));
    let mut best: Option<(f64, f64)> = None;
    for &lam in grid {
        let mut score = 0.0;
        let mut usable = true;
        for f in 0..folds {
            let held: Vec<usize> =
                order.iter().cloned().skip(f).step_by(folds).collect();
            let mut in_fold = vec![false; n];
            for &i in &held {
                in_fold[i] = true;
            }
            let train: Vec<(&[f64], f64, bool)> =
                (0..n).filter(|i| !in_fold[*i]).map(|i| rows[i]).collect();
            let test: Vec<(&[f64], f64, bool)> = held.iter().map(|&i| rows[i]).collect();
            let train_pl = PlData::new(&train, t)?;
            let fit = match pl_newton(
                &train_pl,
                &PlOptions { penalty: Some(penalty), lambda: lam, ..Default::default() },
            ) {
                Ok(r) => r,
                Err(_) => {
                    usable = false;
                    break;
                }
            };
            let test_pl = PlData::new(&test, t)?;
            let (ll, _, _) = pl_eval(&test_pl, &fit.gamma, false, false);
            score += ll;
        }
        if usable && best.map_or(true, |(s, _)| score > s) {
            best = Some((score, lam));
        }
    }
    best.map(|(_, lam)| lam)
        .ok_or_else(|| Error::fit("gam_cox", "every smoothing candidate failed to fit"))
}

impl GamCoxFit {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.obj_trace
    }

    pub fn risk_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.design.kinds.len() {
            return Err(Error::invalid(format!(
                "expected {} covariates, got {}",
                self.design.kinds.len(),
                x.len()
            )));
        }
        let mut row = vec![0.0; self.design.total];
        self.design.expand(x, &mut row);
        Ok(row.iter().zip(&self.gamma).map(|(a, b)| a * b).sum())
    }

    /// Fitted smooth for raw covariate `j` evaluated at `x_j`, up to an
    /// additive constant.
    pub fn smooth_component(&self, j: usize, xj: f64) -> Result<f64> {
        let (start, end) = *self
            .design
            .blocks
            .get(j)
            .ok_or_else(|| Error::invalid(format!("no covariate {j}")))?;
        match &self.design.kinds[j] {
            ColKind::Linear => Ok(xj * self.gamma[start]),
            ColKind::Smooth(basis) => {
                let mut vals = vec![0.0; basis.n_basis];
                basis.eval(xj, &mut vals);
                Ok(vals[..basis.n_basis - 1]
                    .iter()
                    .zip(&self.gamma[start..end])
                    .map(|(a, b)| a * b)
                    .sum())
            }
        }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::cox::fit_coxph;
    use crate::rng::stream_rng;
    use crate::survcore::{make_grid, ObservedRecord};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn basis_sums_to_one_and_matches_derivative_checks() {
        let vals: Vec<f64> = (0..200).map(|i| (i as f64 / 199.0) * 4.0 - 2.0).collect();
        let basis = SplineBasis::new(&vals, 6).unwrap();
        let mut out = vec![0.0; basis.n_basis];
        for i in 0..50 {
            let x = -2.0 + 4.0 * i as f64 / 49.0;
            basis.eval(x, &mut out);
            let total: f64 = out.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "partition of unity at {x}: {total}");
        }
        // second derivative against central differences of eval
        let x = 0.37;
        let m = basis.span(x);
        let ders = basis.ders_at_span(x, m, 2);
        let h = 1e-4;
        let (mut lo_v, mut hi_v, mut mid) =
            (vec![0.0; basis.n_basis], vec![0.0; basis.n_basis], vec![0.0; basis.n_basis]);
        basis.eval(x - h, &mut lo_v);
        basis.eval(x + h, &mut hi_v);
        basis.eval(x, &mut mid);
        for r in 0..=DEGREE {
            let i = m - DEGREE + r;
            let fd2 = (hi_v[i] - 2.0 * mid[i] + lo_v[i]) / (h * h);
            assert!(
                (ders[2][r] - fd2).abs() < 1e-3 * (1.0 + fd2.abs()),
                "second derivative of basis {i}: {} vs fd {fd2}",
                ders[2][r]
            );
        }
    }

    #[test]
    fn curvature_penalty_is_exact_on_known_functions() {
        let vals: Vec<f64> = (0..400).map(|i| i as f64 / 399.0).collect();
        let basis = SplineBasis::new(&vals, 8).unwrap();
        let s = basis.curvature_penalty();
        let nb = basis.n_basis;
        // linear functions have zero curvature; coefficients of a linear
        // function are its values at the Greville abscissae
        let greville: Vec<f64> = (0..nb)
            .map(|i| (basis.knots[i + 1] + basis.knots[i + 2] + basis.knots[i + 3]) / 3.0)
            .collect();
        let lin: Vec<f64> = greville.iter().map(|g| 2.0 * g - 0.5).collect();
        let mut quad_form = 0.0;
        for a in 0..nb {
            for b in 0..nb {
                quad_form += lin[a] * s[a * nb + b] * lin[b];
            }
        }
        assert!(quad_form.abs() < 1e-9, "linear function must have zero penalty, got {quad_form}");
        // x^2 lies in the cubic spline space; its integrated squared second
        // derivative over [0,1] is 4
        let quad: Vec<f64> = (0..nb)
            .map(|i| {
                let (k1, k2, k3) =
                    (basis.knots[i + 1], basis.knots[i + 2], basis.knots[i + 3]);
                (k1 * k2 + k1 * k3 + k2 * k3) / 3.0
            })
            .collect();
        let mut qf = 0.0;
        for a in 0..nb {
            for b in 0..nb {
                qf += quad[a] * s[a * nb + b] * quad[b];
            }
        }
        assert!((qf - 4.0).abs() < 1e-8, "integral of (d2 x^2)^2 over [0,1] is 4, got {qf}");
    }

    fn simulate_ph<F: Fn(&[f64]) -> f64>(
        n: usize,
        p: usize,
        seed: u64,
        log_hazard: F,
    ) -> Dataset {
        let mut rng = stream_rng(seed);
        let records: Vec<ObservedRecord> = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let rate = 0.05 * log_hazard(&x).exp();
                let t = -(1.0 - rng.gen::<f64>()).ln() / rate;
                let c = -(1.0 - rng.gen::<f64>()).ln() / 0.01;
                ObservedRecord { x, z: 0, y: t.min(c), delta: (t < c) as u8 }
            })
            .collect();
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Dataset::new(records, names).unwrap()
    }

    #[test]
    fn heavy_penalty_reduces_to_linear_cox() {
        let data = simulate_ph(800, 2, 31, |x| 0.5 * x[0] - 0.7 * x[1]);
        let cox = fit_coxph(&data).unwrap();
        let mut config = GamConfig::default();
        config.fixed_lambda = Some(1e9);
        let gam = fit_gam_cox(&data, &config, 5).unwrap();
        for j in 0..2 {
            let vals: Vec<f64> = data.records().iter().map(|r| r.x[j]).collect();
            let lo = crate::numeric::quantile(&vals, 0.25).unwrap();
            let hi = crate::numeric::quantile(&vals, 0.75).unwrap();
            let slope = (gam.smooth_component(j, hi).unwrap()
                - gam.smooth_component(j, lo).unwrap())
                / (hi - lo);
            assert!(
                (slope - cox.coefficients()[j]).abs() < 1e-3,
                "covariate {j}: spline slope {slope} vs cox {}",
                cox.coefficients()[j]
            );
        }
        // linear predictors agree on fresh points, up to centering
        let grid = make_grid(&data.times(), 200).unwrap();
        let x_a = [0.5, -0.5];
        let x_b = [-1.0, 1.0];
        let gap_gam = gam.risk_score(&x_a).unwrap() - gam.risk_score(&x_b).unwrap();
        let gap_cox = cox.risk_score(&x_a).unwrap() - cox.risk_score(&x_b).unwrap();
        assert!((gap_gam - gap_cox).abs() < 1e-3, "score gap {gap_gam} vs {gap_cox}");
        let c_gam = gam.predict_curve(&x_a, &grid).unwrap();
        let c_cox = cox.predict_curve(&x_a, &grid).unwrap();
        for (a, b) in c_gam.probs.iter().zip(&c_cox.probs) {
            assert!((a - b).abs() < 2e-3, "curves {a} vs {b}");
        }
    }

    #[test]
    fn recovers_sine_shaped_effect() {
        let data = simulate_ph(5000, 2, 77, |x| (x[0]).sin());
        let gam = fit_gam_cox(&data, &GamConfig::default(), 11).unwrap();
        let xs: Vec<f64> = data.records().iter().map(|r| r.x[0]).collect();
        let fitted: Vec<f64> =
            xs.iter().map(|&v| gam.smooth_component(0, v).unwrap()).collect();
        let target: Vec<f64> = xs.iter().map(|v| v.sin()).collect();
        let mf = crate::numeric::mean(&fitted);
        let mt = crate::numeric::mean(&target);
        let mut num = 0.0;
        let mut df = 0.0;
        let mut dt = 0.0;
        for (f, t) in fitted.iter().zip(&target) {
            num += (f - mf) * (t - mt);
            df += (f - mf) * (f - mf);
            dt += (t - mt) * (t - mt);
        }
        let r = num / (df * dt).sqrt();
        assert!(r > 0.9, "correlation between fitted smooth and sine truth: {r}");
    }

    #[test]
    fn objective_improves_monotonically() {
        let data = simulate_ph(400, 2, 13, |x| 0.4 * x[0] + 0.3 * x[1] * x[1]);
        let mut config = GamConfig::default();
        config.fixed_lambda = Some(1.0);
        let gam = fit_gam_cox(&data, &config, 3).unwrap();
        for w in gam.objective_trace().windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "objective fell from {} to {}", w[0], w[1]);
        }
    }

    #[test]
    fn needs_twenty_events() {
        let mut data = simulate_ph(40, 1, 9, |_| 0.0);
        let records: Vec<ObservedRecord> = data
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| ObservedRecord { delta: (i < 10) as u8, ..r.clone() })
            .collect();
        data = Dataset::new(records, data.covariate_names().to_vec()).unwrap();
        assert!(fit_gam_cox(&data, &GamConfig::default(), 1).is_err());
    }

    #[test]
    fn prediction_clamps_to_training_range() {
        let data = simulate_ph(500, 1, 23, |x| 0.5 * x[0]);
        let mut config = GamConfig::default();
        config.fixed_lambda = Some(10.0);
        let gam = fit_gam_cox(&data, &config, 2).unwrap();
        let max_x = data.records().iter().map(|r| r.x[0]).fold(f64::NEG_INFINITY, f64::max);
        let at_edge = gam.risk_score(&[max_x]).unwrap();
        let beyond = gam.risk_score(&[max_x + 5.0]).unwrap();
        assert!((at_edge - beyond).abs() < 1e-12, "scores beyond the range must clamp");
    }
}
