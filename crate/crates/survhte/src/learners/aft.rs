//! Parametric accelerated failure time models.
//!
//! log T = mu + x'beta + sigma * W with W standard normal (lognormal times)
//! or standard minimum Gumbel (Weibull times). Fitting maximizes the
//! right-censored log likelihood by Newton steps on (mu, beta, log sigma).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{self, LN_SQRT_2PI};
use crate::survcore::{CurveQuantile, Dataset, SurvivalCurve, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AftDist {
    Lognormal,
    Weibull,
}

/// Fitted AFT model. Covariates are centered at their training means, so
/// `mu` is the linear predictor of an average subject.
#[derive(Debug, Clone)]
pub struct AftFit {
    dist: AftDist,
    mu: f64,
    beta: Vec<f64>,
    log_sigma: f64,
    x_mean: Vec<f64>,
}

const MAX_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-6;

/// Log likelihood and gradient over theta = (mu, beta.., log sigma).
/// Rows carry (centered x, log y, delta).
fn loglik_grad(
    dist: AftDist,
    rows: &[(Vec<f64>, f64, bool)],
    theta: &[f64],
) -> (f64, Vec<f64>) {
    let p = theta.len() - 2;
    let mu = theta[0];
    let beta = &theta[1..1 + p];
    let s = theta[p + 1];
    let sigma = s.exp();
    let mut ll = 0.0;
    let mut grad = vec![0.0; p + 2];
    for (x, logy, event) in rows {
        let mut m = mu;
        for j in 0..p {
            m += x[j] * beta[j];
        }
        let r = (logy - m) / sigma;
        // g_r is the derivative of this subject's log likelihood in r.
        let (li, g_r, event_s_term) = match (dist, *event) {
            (AftDist::Lognormal, true) => (-s - 0.5 * r * r - LN_SQRT_2PI, -r, -1.0),
            (AftDist::Lognormal, false) => {
                let ln_sf = numeric::ln_normal_sf(r);
                let hazard = (-0.5 * r * r - LN_SQRT_2PI - ln_sf).exp();
                (ln_sf, -hazard, 0.0)
            }
            (AftDist::Weibull, true) => {
                let er = r.exp();
                (-s + r - er, 1.0 - er, -1.0)
            }
            (AftDist::Weibull, false) => {
                let er = r.exp();
                (-er, -er, 0.0)
            }
        };
        ll += li;
        grad[0] += g_r * (-1.0 / sigma);
        for j in 0..p {
            grad[1 + j] += g_r * (-x[j] / sigma);
        }
        grad[p + 1] += g_r * (-r) + event_s_term;
    }
    (ll, grad)
}

/// Observed information by central differences of the analytic gradient.
fn neg_hessian_fd(dist: AftDist, rows: &[(Vec<f64>, f64, bool)], theta: &[f64]) -> Vec<f64> {
    let d = theta.len();
    let mut h = vec![0.0; d * d];
    let mut th = theta.to_vec();
    for k in 0..d {
        let step = 1e-5 * theta[k].abs().max(1.0);
        th[k] = theta[k] + step;
        let (_, gp) = loglik_grad(dist, rows, &th);
        th[k] = theta[k] - step;
        let (_, gm) = loglik_grad(dist, rows, &th);
        th[k] = theta[k];
        for a in 0..d {
            h[a * d + k] = -(gp[a] - gm[a]) / (2.0 * step);
        }
    }
    // symmetrize; differencing noise breaks exact symmetry
    for a in 0..d {
        for b in (a + 1)..d {
            let v = 0.5 * (h[a * d + b] + h[b * d + a]);
            h[a * d + b] = v;
            h[b * d + a] = v;
        }
    }
    h
}

/// Fits the AFT model by Newton iteration with step halving.
///
/// Requires at least p + 2 events so every regression parameter and the
/// scale are identified.
pub fn fit_aft(data: &Dataset, dist: AftDist) -> Result<AftFit> {
    let p = data.p();
    let n_events: usize = data.records().iter().filter(|r| r.delta == 1).count();
    if n_events < p + 2 {
        return Err(Error::fit(
            dist_name(dist),
            format!("needs at least {} events for {} parameters, found {}", p + 2, p + 2, n_events),
        ));
    }
    let x_mean: Vec<f64> = (0..p)
        .map(|j| data.records().iter().map(|r| r.x[j]).sum::<f64>() / data.n() as f64)
        .collect();
    let rows: Vec<(Vec<f64>, f64, bool)> = data
        .records()
        .iter()
        .map(|r| {
            let xc: Vec<f64> = (0..p).map(|j| r.x[j] - x_mean[j]).collect();
            (xc, r.y.ln(), r.delta == 1)
        })
        .collect();

    let log_times: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut theta = vec![0.0; p + 2];
    theta[0] = numeric::mean(&log_times);
    let spread = numeric::sd(&log_times);
    theta[p + 1] = if spread > 1e-12 { spread.ln() } else { 0.0 };

    let (mut obj, mut grad) = loglik_grad(dist, &rows, &theta);
    for _ in 0..MAX_ITER {
        let grad_norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if grad_norm < GRAD_TOL {
            return Ok(AftFit {
                dist,
                mu: theta[0],
                beta: theta[1..1 + p].to_vec(),
                log_sigma: theta[p + 1],
                x_mean,
            });
        }
        let neg_h = neg_hessian_fd(dist, &rows, &theta);
        let step = numeric::solve_spd(&neg_h, &grad, p + 2)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> =
                theta.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            let (cand_obj, cand_grad) = loglik_grad(dist, &rows, &cand);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-12 {
                theta = cand;
                obj = cand_obj;
                grad = cand_grad;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let grad_norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    if grad_norm < GRAD_TOL {
        Ok(AftFit { dist, mu: theta[0], beta: theta[1..1 + p].to_vec(), log_sigma: theta[p + 1], x_mean })
    } else {
        Err(Error::fit(
            dist_name(dist),
            format!("no convergence in {MAX_ITER} iterations, gradient norm {grad_norm:.3e}"),
        ))
    }
}

fn dist_name(dist: AftDist) -> &'static str {
    match dist {
        AftDist::Lognormal => "aft_lognormal",
        AftDist::Weibull => "aft_weibull",
    }
}

impl AftFit {
    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.beta.len() {
            return Err(Error::invalid(format!(
                "expected {} covariates, got {}",
                self.beta.len(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Linear predictor of log time.
    fn location(&self, x: &[f64]) -> f64 {
        let mut m = self.mu;
        for j in 0..self.beta.len() {
            m += (x[j] - self.x_mean[j]) * self.beta[j];
        }
        m
    }

    pub fn survival_at(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_dim(x)?;
        if t <= 0.0 {
            return Ok(1.0);
        }
        let sigma = self.log_sigma.exp();
        let r = (t.ln() - self.location(x)) / sigma;
        Ok(match self.dist {
            AftDist::Lognormal => numeric::normal_sf(r),
            AftDist::Weibull => (-r.min(700.0).exp()).exp(),
        })
    }

    pub fn predict_curve(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<SurvivalCurve> {
        let probs: Result<Vec<f64>> =
            grid.times().iter().map(|&t| self.survival_at(x, t)).collect();
        SurvivalCurve::new(Arc::clone(grid), probs?)
    }

    /// Closed-form median survival time, capped at the grid's last time.
    pub fn median_time(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<CurveQuantile> {
        self.check_dim(x)?;
        let sigma = self.log_sigma.exp();
        let log_med = match self.dist {
            AftDist::Lognormal => self.location(x),
            AftDist::Weibull => self.location(x) + sigma * std::f64::consts::LN_2.ln(),
        };
        let med = log_med.clamp(-690.0, 690.0).exp();
        if med > grid.max_time() {
            Ok(CurveQuantile { time: grid.max_time(), capped: true })
        } else {
            Ok(CurveQuantile { time: med, capped: false })
        }
    }

    pub fn coefficients(&self) -> (&AftDist, f64, &[f64], f64) {
        (&self.dist, self.mu, &self.beta, self.log_sigma)
    }
}
