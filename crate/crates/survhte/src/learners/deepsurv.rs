//! Cox partial likelihood on a small feed-forward network.
//!
//! Softplus hidden layers with inverted dropout, Adam on mini-batch
//! negative partial likelihood, early stopping on a held-out split, and a
//! Breslow baseline computed from the scores of the whole training set.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::learners::cox::{
    breslow_baseline, curve_from_baseline, median_from_baseline, BreslowBaseline, PlData,
};
use crate::learners::NetConfig;
use crate::numeric::expit;
use crate::rng::{derive_seed, stream_rng};
use crate::survcore::{CurveQuantile, Dataset, SurvivalCurve, TimeGrid};

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Layer topology with flat parameter offsets. Layer l maps sizes[l] to
/// sizes[l+1]; weights are row-major, biases follow each weight block.
#[derive(Debug, Clone)]
struct Net {
    sizes: Vec<usize>,
    w_off: Vec<usize>,
    b_off: Vec<usize>,
    n_params: usize,
}

impl Net {
    fn new(p: usize, hidden: &[usize]) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(p);
        for &h in hidden {
            if h == 0 {
                return Err(Error::invalid("hidden layer width must be positive"));
            }
            sizes.push(h);
        }
        sizes.push(1);
        let mut w_off = Vec::new();
        let mut b_off = Vec::new();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            w_off.push(off);
            off += sizes[l + 1] * sizes[l];
            b_off.push(off);
            off += sizes[l + 1];
        }
        Ok(Net { sizes, w_off, b_off, n_params: off })
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![0.0; self.n_params];
        for l in 0..self.layers() {
            let scale = (2.0 / self.sizes[l].max(1) as f64).sqrt();
            for k in 0..self.sizes[l + 1] * self.sizes[l] {
                theta[self.w_off[l] + k] = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        theta
    }

    /// Forward pass caching pre-activations and layer inputs for backprop.
    /// `masks`, when present, hold one inverted-dropout factor per hidden
    /// unit (0 or 1/(1-q)).
    fn forward_cached(
        &self,
        theta: &[f64],
        x: &[f64],
        masks: Option<&[Vec<f64>]>,
        zs: &mut Vec<Vec<f64>>,
        acts: &mut Vec<Vec<f64>>,
    ) -> f64 {
        zs.clear();
        acts.clear();
        acts.push(x.to_vec());
        for l in 0..self.layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = vec![0.0; n_out];
            let a_prev = &acts[l];
            for r in 0..n_out {
                let row = &theta[self.w_off[l] + r * n_in..self.w_off[l] + (r + 1) * n_in];
                let mut s = theta[self.b_off[l] + r];
                for c in 0..n_in {
                    s += row[c] * a_prev[c];
                }
                z[r] = s;
            }
            if l + 1 == self.layers() {
                zs.push(z);
                break;
            }
            let mut a: Vec<f64> = z.iter().map(|&v| softplus(v)).collect();
            if let Some(m) = masks {
                for (av, &mv) in a.iter_mut().zip(&m[l]) {
                    *av *= mv;
                }
            }
            zs.push(z);
            acts.push(a);
        }
        zs.last().unwrap()[0]
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> f64 {
        let mut zs = Vec::new();
        let mut acts = Vec::new();
        self.forward_cached(theta, x, None, &mut zs, &mut acts)
    }

    /// Accumulates parameter gradients for one subject given dl/dh.
    fn backward(
        &self,
        theta: &[f64],
        zs: &[Vec<f64>],
        acts: &[Vec<f64>],
        masks: Option<&[Vec<f64>]>,
        dldh: f64,
        grad: &mut [f64],
    ) {
        let mut delta = vec![dldh];
        for l in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let a_prev = &acts[l];
            for r in 0..n_out {
                for c in 0..n_in {
                    grad[self.w_off[l] + r * n_in + c] += delta[r] * a_prev[c];
                }
                grad[self.b_off[l] + r] += delta[r];
            }
            if l == 0 {
                break;
            }
            let mut nd = vec![0.0; n_in];
            for c in 0..n_in {
                let mut s = 0.0;
                for r in 0..n_out {
                    s += delta[r] * theta[self.w_off[l] + r * n_in + c];
                }
                let gate = expit(zs[l - 1][c]);
                let keep = masks.map_or(1.0, |m| m[l - 1][c]);
                nd[c] = s * gate * keep;
            }
            delta = nd;
        }
    }
}

/// Negative mean partial likelihood of a set of subjects given their
/// scores. Ties share the full tie group's risk set.
fn pl_loss(h: &[f64], y: &[f64], delta: &[u8]) -> f64 {
    let n = h.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[b].partial_cmp(&y[a]).unwrap());
    let mut events = 0.0;
    let mut loss = 0.0;
    // running logsumexp over the descending-time prefix
    let mut run_max = f64::NEG_INFINITY;
    let mut run_sum = 0.0;
    let mut pos = 0;
    while pos < n {
        let t = y[order[pos]];
        let mut end = pos;
        while end < n && y[order[end]] == t {
            let v = h[order[end]];
            if v > run_max {
                run_sum = run_sum * (run_max - v).exp() + 1.0;
                run_max = v;
            } else {
                run_sum += (v - run_max).exp();
            }
            end += 1;
        }
        let lse = run_max + run_sum.ln();
        for &i in &order[pos..end] {
            if delta[i] == 1 {
                events += 1.0;
                loss -= h[i] - lse;
            }
        }
        pos = end;
    }
    if events == 0.0 {
        return f64::NAN;
    }
    loss / events
}

/// Loss plus dl/dh for one mini-batch. Quadratic in the batch size, which
/// stays small by construction.
fn batch_loss_dldh(h: &[f64], y: &[f64], delta: &[u8]) -> (f64, Vec<f64>) {
    let n = h.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[b].partial_cmp(&y[a]).unwrap());
    // tie groups over the descending order: (end, events, lse)
    let mut groups: Vec<(usize, f64, f64)> = Vec::new();
    let mut run_max = f64::NEG_INFINITY;
    let mut run_sum = 0.0;
    let mut pos = 0;
    while pos < n {
        let t = y[order[pos]];
        let mut end = pos;
        let mut ev = 0.0;
        while end < n && y[order[end]] == t {
            let v = h[order[end]];
            if v > run_max {
                run_sum = run_sum * (run_max - v).exp() + 1.0;
                run_max = v;
            } else {
                run_sum += (v - run_max).exp();
            }
            ev += f64::from(delta[order[end]]);
            end += 1;
        }
        groups.push((end, ev, run_max + run_sum.ln()));
        pos = end;
    }
    let d_total: f64 = groups.iter().map(|g| g.1).sum();
    let mut dldh = vec![0.0; n];
    if d_total == 0.0 {
        return (f64::NAN, dldh);
    }
    let mut loss = 0.0;
    let mut start = 0;
    for &(end, _, lse) in &groups {
        for &i in &order[start..end] {
            if delta[i] == 1 {
                loss -= h[i] - lse;
                dldh[i] -= 1.0 / d_total;
            }
        }
        start = end;
    }
    // each event pulls up every score in its risk-set prefix
    for (pos, &i) in order.iter().enumerate() {
        let mut s = 0.0;
        for &(end, ev, lse) in &groups {
            if end > pos && ev > 0.0 {
                s += ev * (h[i] - lse).exp();
            }
        }
        dldh[i] += s / d_total;
    }
    (loss / d_total, dldh)
}

/// Fitted network with its Breslow baseline.
#[derive(Debug)]
pub struct NetFit {
    net: Net,
    theta: Vec<f64>,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
    h_bar: f64,
    baseline: BreslowBaseline,
    epochs_run: usize,
}

struct Standardized {
    xs: Vec<Vec<f64>>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

fn standardize(data: &Dataset) -> Standardized {
    let (n, p) = (data.n(), data.p());
    let mut mean = vec![0.0; p];
    for r in data.records() {
        for j in 0..p {
            mean[j] += r.x[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; p];
    for r in data.records() {
        for j in 0..p {
            var[j] += (r.x[j] - mean[j]).powi(2);
        }
    }
    let sd: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = (v / (n as f64 - 1.0).max(1.0)).sqrt();
            if s > 1e-12 { s } else { 1.0 }
        })
        .collect();
    let xs = data
        .records()
        .iter()
        .map(|r| (0..p).map(|j| (r.x[j] - mean[j]) / sd[j]).collect())
        .collect();
    Standardized { xs, mean, sd }
}

/// Pools all scores into the Breslow baseline, centered at their mean so a
/// constant shift of the network output cannot move predictions.
fn finalize_baseline(
    net: &Net,
    theta: &[f64],
    xs: &[Vec<f64>],
    y: &[f64],
    delta: &[u8],
) -> Result<(f64, BreslowBaseline)> {
    let h: Vec<f64> = xs.iter().map(|x| net.forward(theta, x)).collect();
    let h_bar = h.iter().sum::<f64>() / h.len() as f64;
    let rows: Vec<(&[f64], f64, bool)> =
        y.iter().zip(delta).map(|(&t, &d)| (&[][..], t, d == 1)).collect();
    let pl = PlData::new(&rows, 0)?;
    let eta: Vec<f64> = pl.order.iter().map(|&i| h[i] - h_bar).collect();
    Ok((h_bar, breslow_baseline(&pl, &eta)))
}

/// Relative L2 distance between the analytic gradient of the negative
/// partial likelihood and a central finite-difference approximation, at a
/// random initialization. Diagnostic used to certify the backward pass.
#[doc(hidden)]
pub fn gradient_fd_error(data: &Dataset, hidden: &[usize], seed: u64) -> Result<f64> {
    let std = standardize(data);
    let y = data.times();
    let delta = data.events();
    let net = Net::new(data.p(), hidden)?;
    let mut rng = stream_rng(seed);
    let theta = net.init_theta(&mut rng);

    let eval = |th: &[f64]| -> (f64, Vec<f64>) {
        let mut zs = Vec::new();
        let mut acts = Vec::new();
        let mut caches = Vec::new();
        let mut h = Vec::new();
        for x in &std.xs {
            h.push(net.forward_cached(th, x, None, &mut zs, &mut acts));
            caches.push((zs.clone(), acts.clone()));
        }
        let (loss, dldh) = batch_loss_dldh(&h, &y, &delta);
        let mut grad = vec![0.0; net.n_params];
        for (bi, c) in caches.iter().enumerate() {
            net.backward(th, &c.0, &c.1, None, dldh[bi], &mut grad);
        }
        (loss, grad)
    };
    let (_, grad) = eval(&theta);
    let mut fd = vec![0.0; net.n_params];
    let hstep = 1e-5;
    for k in 0..net.n_params {
        let mut up = theta.clone();
        up[k] += hstep;
        let mut dn = theta.clone();
        dn[k] -= hstep;
        fd[k] = (eval(&up).0 - eval(&dn).0) / (2.0 * hstep);
    }
    let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(den > 0.0) {
        return Err(Error::numeric("finite-difference gradient vanished".to_string()));
    }
    Ok(num / den)
}

pub fn fit_neural_cox(data: &Dataset, config: &NetConfig, seed: u64) -> Result<NetFit> {
    let n = data.n();
    let std = standardize(data);
    let y: Vec<f64> = data.times();
    let delta: Vec<u8> = data.events();
    {
        let mut times: Vec<f64> =
            data.records().iter().filter(|r| r.delta == 1).map(|r| r.y).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        if times.len() < 2 {
            return Err(Error::fit("neural_cox", "needs at least two distinct event times"));
        }
    }
    let net = Net::new(data.p(), &config.hidden)?;

    // the split is fixed across restarts
    let mut split_rng = stream_rng(derive_seed(seed, &[0x5917]));
    let mut shuffled: Vec<usize> = (0..n).collect();
    shuffled.shuffle(&mut split_rng);
    let n_val = ((config.val_frac * n as f64).floor() as usize).min(n.saturating_sub(2));
    let (val_idx, train_idx) = shuffled.split_at(n_val);
    if !train_idx.iter().any(|&i| delta[i] == 1) {
        return Err(Error::fit("neural_cox", "training split has no events"));
    }
    let monitor_idx: &[usize] =
        if val_idx.iter().any(|&i| delta[i] == 1) { val_idx } else { train_idx };

    let n_hidden_layers = config.hidden.len();
    let mut last_err = String::new();
    for restart in 0..4u64 {
        let lr = config.lr * 0.5f64.powi(restart as i32);
        let mut rng = stream_rng(derive_seed(seed, &[0xDEE7, restart]));
        let mut theta = net.init_theta(&mut rng);
        let mut adam_m = vec![0.0; net.n_params];
        let mut adam_v = vec![0.0; net.n_params];
        let mut adam_t = 0;
        let mut best_theta = theta.clone();
        let mut best_loss = f64::INFINITY;
        let mut stale = 0usize;
        let mut epochs_run = 0usize;
        let mut diverged = false;

        let mut order: Vec<usize> = train_idx.to_vec();
        let mut zs = Vec::new();
        let mut acts = Vec::new();
        'epochs: for epoch in 0..config.epochs {
            epochs_run = epoch + 1;
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch.max(1)) {
                if !batch.iter().any(|&i| delta[i] == 1) {
                    continue;
                }
                // per-subject dropout masks, inverted scaling at train time
                let masks: Option<Vec<Vec<Vec<f64>>>> = if config.dropout > 0.0 {
                    Some(
                        batch
                            .iter()
                            .map(|_| {
                                (0..n_hidden_layers)
                                    .map(|l| {
                                        (0..net.sizes[l + 1])
                                            .map(|_| {
                                                if rng.gen::<f64>() < config.dropout {
                                                    0.0
                                                } else {
                                                    1.0 / (1.0 - config.dropout)
                                                }
                                            })
                                            .collect()
                                    })
                                    .collect()
                            })
                            .collect(),
                    )
                } else {
                    None
                };
                let mut caches: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = Vec::with_capacity(batch.len());
                let mut h = Vec::with_capacity(batch.len());
                for (bi, &i) in batch.iter().enumerate() {
                    let m = masks.as_ref().map(|ms| ms[bi].as_slice());
                    let v = net.forward_cached(&theta, &std.xs[i], m, &mut zs, &mut acts);
                    h.push(v);
                    caches.push((zs.clone(), acts.clone()));
                }
                let by: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
                let bd: Vec<u8> = batch.iter().map(|&i| delta[i]).collect();
                let (loss, dldh) = batch_loss_dldh(&h, &by, &bd);
                if !loss.is_finite() {
                    last_err = format!("restart {restart}: non-finite batch loss");
                    diverged = true;
                    break 'epochs;
                }
                let mut grad = vec![0.0; net.n_params];
                for (bi, _) in batch.iter().enumerate() {
                    let m = masks.as_ref().map(|ms| ms[bi].as_slice());
                    net.backward(&theta, &caches[bi].0, &caches[bi].1, m, dldh[bi], &mut grad);
                }
                for (g, t) in grad.iter_mut().zip(&theta) {
                    *g += 2.0 * config.l2 * t;
                }
                adam_t += 1;
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - b1f64(b1, adam_t);
                let bc2 = 1.0 - b1f64(b2, adam_t);
                for k in 0..net.n_params {
                    adam_m[k] = b1 * adam_m[k] + (1.0 - b1) * grad[k];
                    adam_v[k] = b2 * adam_v[k] + (1.0 - b2) * grad[k] * grad[k];
                    let mh = adam_m[k] / bc1;
                    let vh = adam_v[k] / bc2;
                    theta[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
            // early stopping on the monitor split, dropout off
            let hm: Vec<f64> =
                monitor_idx.iter().map(|&i| net.forward(&theta, &std.xs[i])).collect();
            let my: Vec<f64> = monitor_idx.iter().map(|&i| y[i]).collect();
            let md: Vec<u8> = monitor_idx.iter().map(|&i| delta[i]).collect();
            let monitor = pl_loss(&hm, &my, &md);
            if !monitor.is_finite() {
                last_err = format!("restart {restart}: non-finite validation loss");
                diverged = true;
                break 'epochs;
            }
            if monitor < best_loss {
                best_loss = monitor;
                best_theta.copy_from_slice(&theta);
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
        if diverged {
            continue;
        }
        let (h_bar, baseline) = finalize_baseline(&net, &best_theta, &std.xs, &y, &delta)?;
        return Ok(NetFit {
            net,
            theta: best_theta,
            x_mean: std.mean,
            x_sd: std.sd,
            h_bar,
            baseline,
            epochs_run,
        });
    }
    Err(Error::fit("neural_cox", format!("training kept diverging: {last_err}")))
}

fn b1f64(b: f64, t: usize) -> f64 {
    b.powi(t as i32)
}

impl NetFit {
    /// Centered risk score of one subject.
    pub fn risk_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.net.sizes[0] {
            return Err(Error::invalid(format!(
                "expected {} covariates, got {}",
                self.net.sizes[0],
                x.len()
            )));
        }
        let xs: Vec<f64> =
            x.iter().zip(self.x_mean.iter().zip(&self.x_sd)).map(|(v, (m, s))| (v - m) / s).collect();
        Ok(self.net.forward(&self.theta, &xs) - self.h_bar)
    }

    pub fn predict_curve(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<SurvivalCurve> {
        let score = self.risk_score(x)?;
        curve_from_baseline(&self.baseline, score, grid)
    }

    pub fn median_time(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<CurveQuantile> {
        let score = self.risk_score(x)?;
        median_from_baseline(&self.baseline, score, grid)
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }
}
