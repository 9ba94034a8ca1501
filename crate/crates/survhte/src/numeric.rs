//! Shared numerical kernels: normal distribution functions, truncated
//! normal sampling, small dense linear algebra, and sample statistics.

use crate::error::{Error, Result};
use rand::Rng;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / SQRT_2)
}

/// Standard normal survival function, 1 - Phi(x).
pub fn normal_sf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / SQRT_2)
}

/// log(1 - Phi(x)), stable far into the right tail.
pub fn ln_normal_sf(x: f64) -> f64 {
    if x < 30.0 {
        let s = normal_sf(x);
        if s > 0.0 {
            return s.ln();
        }
    }
    // Asymptotic expansion of Mills' ratio for large x.
    let x2 = x * x;
    -0.5 * x2 - LN_SQRT_2PI - x.ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
}

/// Standard normal quantile (Acklam's rational approximation polished by
/// one Halley step against the erfc-based CDF); |error| < 1e-13 on (0,1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("normal quantile needs p in (0,1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Halley refinement; the CDF is accurate to machine precision.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Inverse logit.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit with domain check.
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("logit needs p in (0,1), got {p}")));
    }
    Ok((p / (1.0 - p)).ln())
}

/// Draws from a standard normal conditioned on being >= `alpha`.
///
/// Inverse-CDF sampling: one uniform per draw. Moderate bounds invert the
/// CDF directly; bounds past 6 work on the survival-function side, where
/// Q(alpha) stays representable arbitrarily far into the tail.
pub fn trunc_std_normal_lower<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> f64 {
    let u: f64 = rng.gen::<f64>();
    let z = if alpha <= 6.0 {
        // CDF side: target p = F(alpha) + u * (1 - F(alpha)), via the
        // complement to keep precision when F(alpha) is close to 1.
        let q = normal_sf(alpha) * (1.0 - u);
        -normal_quantile(q.max(f64::MIN_POSITIVE)).unwrap_or(alpha)
    } else {
        // Tail side: Q(z) = Q(alpha) * (1 - u), inverted through the
        // quantile of the complement. Subnormal survival mass means the
        // conditional law is a point mass at the bound for our purposes.
        let s = normal_sf(alpha) * (1.0 - u);
        if s < 1e-300 {
            alpha
        } else {
            -normal_quantile(s).unwrap_or(-alpha)
        }
    };
    z.max(alpha)
}

/// N(mean, sd^2) draw conditioned on exceeding `lower`.
pub fn trunc_normal_lower<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lower: f64) -> f64 {
    let alpha = (lower - mean) / sd;
    mean + sd * trunc_std_normal_lower(rng, alpha)
}

/// In-place Cholesky factorization of a symmetric positive definite matrix
/// stored row-major; the lower triangle of the result holds L.
pub fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::numeric(format!("matrix not positive definite at pivot {j}")));
        }
        let dj = d.sqrt();
        a[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / dj;
        }
    }
    Ok(())
}

/// Solves L L^T x = b given the factor from [`cholesky`]; overwrites b.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves a symmetric positive semidefinite system, escalating a diagonal
/// ridge until the factorization succeeds.
pub fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut ridge = 0.0f64;
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0f64, f64::max).max(1e-300);
    for _ in 0..12 {
        let mut m = a.to_vec();
        if ridge > 0.0 {
            for i in 0..n {
                m[i * n + i] += ridge * scale;
            }
        }
        if cholesky(&mut m, n).is_ok() {
            let mut x = b.to_vec();
            cholesky_solve(&m, n, &mut x);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
    }
    Err(Error::numeric("symmetric solve failed even with ridge".to_string()))
}

/// Linear-interpolation quantile (type 7) of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("quantile of empty sample".to_string()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("quantile probability {p} outside [0,1]")));
    }
    let n = sorted.len();
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Sorts a copy and takes the type-7 quantile.
pub fn quantile(xs: &[f64], p: f64) -> Result<f64> {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&s, p)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}
