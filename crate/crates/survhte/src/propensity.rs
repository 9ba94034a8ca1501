//! Treatment probability estimation.
//!
//! Three base classifiers (ridge logistic regression, gradient-boosted
//! trees, a random forest) are combined with simplex weights chosen to
//! minimize the log loss of out-of-fold predictions from stratified
//! cross-validation. Final predictions are clipped away from 0 and 1.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{expit, solve_spd};
use crate::rng::{derive_seed, stream_rng};
use crate::survcore::Dataset;

pub const PS_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub folds: usize,
    pub ridge: f64,
    pub gbt_rounds: usize,
    pub gbt_depth: usize,
    pub gbt_lr: f64,
    pub gbt_min_leaf: usize,
    pub rf_trees: usize,
    pub rf_min_leaf: usize,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            folds: 10,
            ridge: 1e-4,
            gbt_rounds: 200,
            gbt_depth: 3,
            gbt_lr: 0.1,
            gbt_min_leaf: 10,
            rf_trees: 200,
            rf_min_leaf: 10,
        }
    }
}

fn log_loss(z: &[u8], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&zi, &qi) in z.iter().zip(q) {
        let p = qi.clamp(1e-12, 1.0 - 1e-12);
        total -= if zi == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total / z.len() as f64
}

// ---------------------------------------------------------------- logistic

/// Ridge-penalized logistic regression on standardized covariates; the
/// intercept is unpenalized.
#[derive(Debug, Clone)]
struct RidgeLogit {
    beta: Vec<f64>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl RidgeLogit {
    fn fit(xs: &[Vec<f64>], z: &[u8], ridge: f64) -> Result<Self> {
        let n = xs.len();
        let p = xs.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; p];
        for row in xs {
            for j in 0..p {
                mean[j] += row[j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut sd = vec![0.0; p];
        for row in xs {
            for j in 0..p {
                sd[j] += (row[j] - mean[j]).powi(2);
            }
        }
        for s in &mut sd {
            *s = (*s / (n as f64 - 1.0).max(1.0)).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        let q = p + 1;
        let mut beta = vec![0.0; q];
        let mut design = vec![0.0; n * q];
        for (i, row) in xs.iter().enumerate() {
            design[i * q] = 1.0;
            for j in 0..p {
                design[i * q + 1 + j] = (row[j] - mean[j]) / sd[j];
            }
        }
        for _ in 0..50 {
            let mut grad = vec![0.0; q];
            let mut hess = vec![0.0; q * q];
            for i in 0..n {
                let g = &design[i * q..(i + 1) * q];
                let eta: f64 = g.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().clamp(-30.0, 30.0);
                let pi = expit(eta);
                let w = (pi * (1.0 - pi)).max(1e-10);
                let r = f64::from(z[i]) - pi;
                for a in 0..q {
                    grad[a] += g[a] * r;
                    for b in 0..q {
                        hess[a * q + b] += w * g[a] * g[b];
                    }
                }
            }
            for j in 1..q {
                grad[j] -= ridge * beta[j];
                hess[j * q + j] += ridge;
            }
            hess[0] += 1e-10;
            let step = solve_spd(&hess, &grad, q)?;
            let norm: f64 = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (b, s) in beta.iter_mut().zip(&step) {
                *b += s;
            }
            if norm < 1e-8 {
                break;
            }
        }
        Ok(RidgeLogit { beta, mean, sd })
    }

    fn predict(&self, x: &[f64]) -> f64 {
        let mut eta = self.beta[0];
        for (j, &v) in x.iter().enumerate() {
            eta += self.beta[j + 1] * (v - self.mean[j]) / self.sd[j];
        }
        expit(eta.clamp(-30.0, 30.0))
    }
}

// -------------------------------------------------------------------- trees

/// Shared flat tree layout: right child = left + 1.
#[derive(Debug, Clone)]
struct CNode {
    var: i32,
    thr: f64,
    left: u32,
    value: f64,
}

fn eval_ctree(nodes: &[CNode], x: &[f64]) -> f64 {
    let mut k = 0usize;
    loop {
        let nd = &nodes[k];
        if nd.var < 0 {
            return nd.value;
        }
        k = if x[nd.var as usize] <= nd.thr { nd.left as usize } else { nd.left as usize + 1 };
    }
}

/// Builds one regression tree on (residual, curvature) pairs; leaves hold
/// the Newton step sum(r)/sum(w). Used by the boosting stage.
struct RegTreeBuilder<'a> {
    xs: &'a [Vec<f64>],
    r: &'a [f64],
    w: &'a [f64],
    p: usize,
    min_leaf: usize,
    max_depth: usize,
}

impl<'a> RegTreeBuilder<'a> {
    fn build(&self, idx: Vec<usize>) -> Vec<CNode> {
        let mut nodes = Vec::new();
        nodes.push(CNode { var: -1, thr: 0.0, left: 0, value: 0.0 });
        let mut stack = vec![(0usize, idx, 0usize)];
        while let Some((slot, idx, depth)) = stack.pop() {
            let split = if depth < self.max_depth && idx.len() >= 2 * self.min_leaf {
                self.best_split(&idx)
            } else {
                None
            };
            match split {
                Some((var, thr)) => {
                    let (mut l, mut r) = (Vec::new(), Vec::new());
                    for &i in &idx {
                        if self.xs[i][var] <= thr {
                            l.push(i);
                        } else {
                            r.push(i);
                        }
                    }
                    let left = nodes.len() as u32;
                    nodes.push(CNode { var: -1, thr: 0.0, left: 0, value: 0.0 });
                    nodes.push(CNode { var: -1, thr: 0.0, left: 0, value: 0.0 });
                    nodes[slot] = CNode { var: var as i32, thr, left, value: 0.0 };
                    stack.push((left as usize, l, depth + 1));
                    stack.push((left as usize + 1, r, depth + 1));
                }
                None => {
                    let sr: f64 = idx.iter().map(|&i| self.r[i]).sum();
                    let sw: f64 = idx.iter().map(|&i| self.w[i]).sum();
                    nodes[slot].value = (sr / sw.max(1e-12)).clamp(-10.0, 10.0);
                }
            }
        }
        nodes
    }

    /// Exact greedy search maximizing the squared-sum gain of the residuals.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.r[i]).sum();
        let base = total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for var in 0..self.p {
            order.sort_by(|&a, &b| self.xs[a][var].partial_cmp(&self.xs[b][var]).unwrap());
            let mut sl = 0.0;
            for k in 0..n - 1 {
                sl += self.r[order[k]];
                let (a, b) = (self.xs[order[k]][var], self.xs[order[k + 1]][var]);
                if a == b || k + 1 < self.min_leaf || n - k - 1 < self.min_leaf {
                    continue;
                }
                let nl = (k + 1) as f64;
                let gain = sl * sl / nl + (total - sl) * (total - sl) / (n as f64 - nl) - base;
                if gain > 1e-12 && best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, var, 0.5 * (a + b)));
                }
            }
        }
        best.map(|(_, var, thr)| (var, thr))
    }
}

/// Logit boosting with depth-limited trees; deterministic given the data.
#[derive(Debug, Clone)]
struct Gbt {
    f0: f64,
    lr: f64,
    trees: Vec<Vec<CNode>>,
}

impl Gbt {
    fn fit(xs: &[Vec<f64>], z: &[u8], config: &PropensityConfig) -> Self {
        let n = xs.len();
        let p = xs.first().map_or(0, Vec::len);
        let pbar = (z.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
        let f0 = (pbar / (1.0 - pbar)).ln();
        let mut f = vec![f0; n];
        let mut trees = Vec::with_capacity(config.gbt_rounds);
        let mut r = vec![0.0; n];
        let mut w = vec![0.0; n];
        for _ in 0..config.gbt_rounds {
            for i in 0..n {
                let pi = expit(f[i].clamp(-30.0, 30.0));
                r[i] = f64::from(z[i]) - pi;
                w[i] = (pi * (1.0 - pi)).max(1e-10);
            }
            let builder = RegTreeBuilder {
                xs,
                r: &r,
                w: &w,
                p,
                min_leaf: config.gbt_min_leaf,
                max_depth: config.gbt_depth,
            };
            let tree = builder.build((0..n).collect());
            for i in 0..n {
                f[i] += config.gbt_lr * eval_ctree(&tree, &xs[i]);
            }
            trees.push(tree);
        }
        Gbt { f0, lr: config.gbt_lr, trees }
    }

    fn predict(&self, x: &[f64]) -> f64 {
        let mut f = self.f0;
        for tree in &self.trees {
            f += self.lr * eval_ctree(tree, x);
        }
        expit(f.clamp(-30.0, 30.0))
    }
}

// ------------------------------------------------------------------- forest

/// Bootstrap classification forest with Gini splits; leaves hold the
/// in-bag class-1 fraction and predictions average over trees.
#[derive(Debug, Clone)]
struct RfClass {
    trees: Vec<Vec<CNode>>,
}

impl RfClass {
    fn fit<R: Rng>(xs: &[Vec<f64>], z: &[u8], config: &PropensityConfig, rng: &mut R) -> Self {
        let n = xs.len();
        let p = xs.first().map_or(0, Vec::len);
        let mtry = ((p as f64).sqrt().ceil() as usize).clamp(1, p.max(1));
        let trees = (0..config.rf_trees)
            .map(|_| {
                let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                Self::build_tree(xs, z, p, mtry, config.rf_min_leaf, sample, rng)
            })
            .collect();
        RfClass { trees }
    }

    fn build_tree<R: Rng>(
        xs: &[Vec<f64>],
        z: &[u8],
        p: usize,
        mtry: usize,
        min_leaf: usize,
        idx: Vec<usize>,
        rng: &mut R,
    ) -> Vec<CNode> {
        let mut nodes = vec![CNode { var: -1, thr: 0.0, left: 0, value: 0.0 }];
        let mut stack = vec![(0usize, idx)];
        while let Some((slot, idx)) = stack.pop() {
            let ones: usize = idx.iter().filter(|&&i| z[i] == 1).count();
            let pure = ones == 0 || ones == idx.len();
            let mut split = None;
            if !pure && idx.len() >= 2 * min_leaf {
                let mut pool: Vec<usize> = (0..p).collect();
                let mut chosen = Vec::with_capacity(mtry);
                for k in 0..mtry {
                    let j = rng.gen_range(k..p);
                    pool.swap(k, j);
                    chosen.push(pool[k]);
                }
                split = Self::best_gini_split(xs, z, &idx, &chosen, min_leaf);
            }
            match split {
                Some((var, thr)) => {
                    let (mut l, mut r) = (Vec::new(), Vec::new());
                    for &i in &idx {
                        if xs[i][var] <= thr {
                            l.push(i);
                        } else {
                            r.push(i);
                        }
                    }
                    let left = nodes.len() as u32;
                    nodes.push(CNode { var: -1, thr: 0.0, left: 0, value: 0.0 });
                    nodes.push(CNode { var: -1, thr: 0.0, left: 0, value: 0.0 });
                    nodes[slot] = CNode { var: var as i32, thr, left, value: 0.0 };
                    stack.push((left as usize, l));
                    stack.push((left as usize + 1, r));
                }
                None => {
                    nodes[slot].value = ones as f64 / idx.len() as f64;
                }
            }
        }
        nodes
    }

    fn best_gini_split(
        xs: &[Vec<f64>],
        z: &[u8],
        idx: &[usize],
        vars: &[usize],
        min_leaf: usize,
    ) -> Option<(usize, f64)> {
        let n = idx.len();
        let total_ones: f64 = idx.iter().filter(|&&i| z[i] == 1).count() as f64;
        let gini = |ones: f64, count: f64| -> f64 {
            if count == 0.0 {
                return 0.0;
            }
            let q = ones / count;
            2.0 * q * (1.0 - q) * count
        };
        let parent = gini(total_ones, n as f64);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for &var in vars {
            order.sort_by(|&a, &b| xs[a][var].partial_cmp(&xs[b][var]).unwrap());
            let mut ones_l = 0.0;
            for k in 0..n - 1 {
                ones_l += f64::from(z[order[k]]);
                let (a, b) = (xs[order[k]][var], xs[order[k + 1]][var]);
                if a == b || k + 1 < min_leaf || n - k - 1 < min_leaf {
                    continue;
                }
                let nl = (k + 1) as f64;
                let gain = parent - gini(ones_l, nl) - gini(total_ones - ones_l, n as f64 - nl);
                if gain > 1e-12 && best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, var, 0.5 * (a + b)));
                }
            }
        }
        best.map(|(_, var, thr)| (var, thr))
    }

    fn predict(&self, x: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| eval_ctree(t, x)).sum();
        total / self.trees.len() as f64
    }
}

// -------------------------------------------------------------------- stack

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &mut [f64]) {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k as f64 + 1.0);
        if uk - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Simplex weights minimizing log loss of the stacked probabilities, by
/// projected gradient with backtracking.
fn stack_weights(oof: &[[f64; 3]], z: &[u8]) -> [f64; 3] {
    let n = z.len() as f64;
    let loss = |w: &[f64; 3]| -> f64 {
        let q: Vec<f64> =
            oof.iter().map(|p| (0..3).map(|k| w[k] * p[k]).sum::<f64>()).collect();
        log_loss(z, &q)
    };
    let mut w = [1.0 / 3.0; 3];
    let mut cur = loss(&w);
    let mut step = 1.0;
    for _ in 0..500 {
        let mut grad = [0.0; 3];
        for (p, &zi) in oof.iter().zip(z) {
            let q: f64 = (0..3).map(|k| w[k] * p[k]).sum::<f64>().clamp(1e-12, 1.0 - 1e-12);
            let d = if zi == 1 { -1.0 / q } else { 1.0 / (1.0 - q) };
            for k in 0..3 {
                grad[k] += d * p[k] / n;
            }
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut cand = [w[0] - step * grad[0], w[1] - step * grad[1], w[2] - step * grad[2]];
            project_simplex(&mut cand);
            let l = loss(&cand);
            if l < cur - 1e-15 {
                w = cand;
                cur = l;
                step *= 1.2;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved || step < 1e-14 {
            break;
        }
    }
    w
}

/// Per-class round-robin fold labels after a shuffle, so every fold keeps
/// the treated fraction of the full sample.
fn stratified_folds<R: Rng>(z: &[u8], folds: usize, rng: &mut R) -> Vec<usize> {
    let mut assignment = vec![0usize; z.len()];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..z.len()).filter(|&i| z[i] == class).collect();
        members.shuffle(rng);
        for (k, &i) in members.iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    assignment
}

/// Fitted stack: full-data base models plus their simplex weights.
#[derive(Debug)]
pub struct PropensityFit {
    logit: RidgeLogit,
    gbt: Gbt,
    forest: RfClass,
    weights: [f64; 3],
    oof_loss: [f64; 3],
    stack_loss: f64,
}

pub fn fit_propensity(data: &Dataset, config: &PropensityConfig, seed: u64) -> Result<PropensityFit> {
    let n = data.n();
    if data.p() == 0 {
        return Err(Error::fit("propensity", "needs at least one covariate"));
    }
    let xs: Vec<Vec<f64>> = data.records().iter().map(|r| r.x.clone()).collect();
    let z: Vec<u8> = data.records().iter().map(|r| r.z).collect();
    let n1 = z.iter().filter(|&&v| v == 1).count();
    if n1 < config.folds || n - n1 < config.folds {
        return Err(Error::fit("propensity", "each arm needs at least one subject per fold"));
    }

    let mut rng = stream_rng(derive_seed(seed, &[0x2F5]));
    let fold_of = stratified_folds(&z, config.folds, &mut rng);
    let mut oof = vec![[0.0f64; 3]; n];
    for v in 0..config.folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != v).collect();
        let held: Vec<usize> = (0..n).filter(|&i| fold_of[i] == v).collect();
        if held.is_empty() {
            continue;
        }
        let txs: Vec<Vec<f64>> = train.iter().map(|&i| xs[i].clone()).collect();
        let tz: Vec<u8> = train.iter().map(|&i| z[i]).collect();
        let logit = RidgeLogit::fit(&txs, &tz, config.ridge)?;
        let gbt = Gbt::fit(&txs, &tz, config);
        let mut fold_rng = stream_rng(derive_seed(seed, &[0x2F0, v as u64]));
        let forest = RfClass::fit(&txs, &tz, config, &mut fold_rng);
        for &i in &held {
            oof[i] = [logit.predict(&xs[i]), gbt.predict(&xs[i]), forest.predict(&xs[i])];
        }
    }
    let weights = stack_weights(&oof, &z);
    let oof_loss = [
        log_loss(&z, &oof.iter().map(|p| p[0]).collect::<Vec<_>>()),
        log_loss(&z, &oof.iter().map(|p| p[1]).collect::<Vec<_>>()),
        log_loss(&z, &oof.iter().map(|p| p[2]).collect::<Vec<_>>()),
    ];
    let stacked: Vec<f64> =
        oof.iter().map(|p| (0..3).map(|k| weights[k] * p[k]).sum()).collect();
    let stack_loss = log_loss(&z, &stacked);

    let logit = RidgeLogit::fit(&xs, &z, config.ridge)?;
    let gbt = Gbt::fit(&xs, &z, config);
    let mut final_rng = stream_rng(derive_seed(seed, &[0x2F1]));
    let forest = RfClass::fit(&xs, &z, config, &mut final_rng);
    Ok(PropensityFit { logit, gbt, forest, weights, oof_loss, stack_loss })
}

impl PropensityFit {
    /// Stacked treatment probability, clipped away from the boundaries.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let p = self.weights[0] * self.logit.predict(x)
            + self.weights[1] * self.gbt.predict(x)
            + self.weights[2] * self.forest.predict(x);
        p.clamp(PS_CLIP, 1.0 - PS_CLIP)
    }

    pub fn weights(&self) -> &[f64; 3] {
        &self.weights
    }

    /// Out-of-fold log loss of (logistic, boosting, forest) and the stack.
    pub fn cv_log_loss(&self) -> ([f64; 3], f64) {
        (self.oof_loss, self.stack_loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survcore::ObservedRecord;
    use rand_distr::StandardNormal;

    fn ps_data(n: usize, seed: u64, logit_of: impl Fn(&[f64]) -> f64, p: usize) -> Dataset {
        let mut rng = stream_rng(seed);
        let records: Vec<ObservedRecord> = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let z = u8::from(rng.gen::<f64>() < expit(logit_of(&x)));
                ObservedRecord { x, z, y: 1.0, delta: 1 }
            })
            .collect();
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Dataset::new(records, names).unwrap()
    }

    #[test]
    fn ridge_logistic_recovers_slopes() {
        let data = ps_data(4000, 3, |x| 0.3 + 0.8 * x[0] - 0.5 * x[1], 2);
        let xs: Vec<Vec<f64>> = data.records().iter().map(|r| r.x.clone()).collect();
        let z: Vec<u8> = data.records().iter().map(|r| r.z).collect();
        let fit = RidgeLogit::fit(&xs, &z, 1e-4).unwrap();
        let slopes: Vec<f64> = (0..2).map(|j| fit.beta[j + 1] / fit.sd[j]).collect();
        assert!((slopes[0] - 0.8).abs() < 0.1, "slope 1: {}", slopes[0]);
        assert!((slopes[1] + 0.5).abs() < 0.1, "slope 2: {}", slopes[1]);
    }

    #[test]
    fn boosting_captures_an_interaction_the_logit_cannot() {
        let data = ps_data(2000, 7, |x| 1.5 * x[0] * x[1], 2);
        let test = ps_data(1000, 8, |x| 1.5 * x[0] * x[1], 2);
        let xs: Vec<Vec<f64>> = data.records().iter().map(|r| r.x.clone()).collect();
        let z: Vec<u8> = data.records().iter().map(|r| r.z).collect();
        let config = PropensityConfig::default();
        let logit = RidgeLogit::fit(&xs, &z, 1e-4).unwrap();
        let gbt = Gbt::fit(&xs, &z, &config);
        let tz: Vec<u8> = test.records().iter().map(|r| r.z).collect();
        let lq: Vec<f64> = test.records().iter().map(|r| logit.predict(&r.x)).collect();
        let gq: Vec<f64> = test.records().iter().map(|r| gbt.predict(&r.x)).collect();
        let (ll, lg) = (log_loss(&tz, &lq), log_loss(&tz, &gq));
        assert!(lg < ll - 0.05, "boosting {lg} should beat logistic {ll}");
    }

    #[test]
    fn forest_is_seeded_and_bounded() {
        let data = ps_data(400, 11, |x| x[0], 3);
        let xs: Vec<Vec<f64>> = data.records().iter().map(|r| r.x.clone()).collect();
        let z: Vec<u8> = data.records().iter().map(|r| r.z).collect();
        let config = PropensityConfig { rf_trees: 40, ..PropensityConfig::default() };
        let mut r1 = stream_rng(5);
        let mut r2 = stream_rng(5);
        let mut r3 = stream_rng(6);
        let a = RfClass::fit(&xs, &z, &config, &mut r1);
        let b = RfClass::fit(&xs, &z, &config, &mut r2);
        let c = RfClass::fit(&xs, &z, &config, &mut r3);
        let probe = [0.3, -0.2, 1.1];
        assert_eq!(a.predict(&probe), b.predict(&probe));
        assert_ne!(a.predict(&probe), c.predict(&probe));
        for r in data.records().iter().take(50) {
            let p = a.predict(&r.x);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn stack_weights_lie_on_the_simplex_and_beat_every_component() {
        let data = ps_data(900, 13, |x| 0.5 * x[0] + x[1] * x[2], 3);
        let config = PropensityConfig {
            gbt_rounds: 80,
            rf_trees: 60,
            folds: 5,
            ..PropensityConfig::default()
        };
        let fit = fit_propensity(&data, &config, 17).unwrap();
        let w = fit.weights();
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9, "weights {w:?}");
        let (base, stack) = fit.cv_log_loss();
        let best = base.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            stack <= best + 1e-9,
            "stack loss {stack} must not exceed best component {best}"
        );
    }

    #[test]
    fn predictions_stay_clipped() {
        let mut rng = stream_rng(19);
        let records: Vec<ObservedRecord> = (0..200)
            .map(|i| {
                let x = vec![if i < 100 { -5.0 } else { 5.0 } + 0.01 * rng.gen::<f64>()];
                ObservedRecord { x, z: u8::from(i >= 100), y: 1.0, delta: 1 }
            })
            .collect();
        let data = Dataset::new(records, vec!["x1".into()]).unwrap();
        let config = PropensityConfig {
            gbt_rounds: 60,
            rf_trees: 30,
            folds: 5,
            ..PropensityConfig::default()
        };
        let fit = fit_propensity(&data, &config, 23).unwrap();
        let hi = fit.predict(&[40.0]);
        let lo = fit.predict(&[-40.0]);
        assert!(hi <= 1.0 - PS_CLIP && hi > 0.9);
        assert!(lo >= PS_CLIP && lo < 0.1);
    }

    #[test]
    fn folds_are_stratified() {
        let z: Vec<u8> = (0..100).map(|i| u8::from(i % 4 == 0)).collect();
        let mut rng = stream_rng(29);
        let fold_of = stratified_folds(&z, 5, &mut rng);
        for v in 0..5 {
            let ones = (0..z.len()).filter(|&i| fold_of[i] == v && z[i] == 1).count();
            let total = (0..z.len()).filter(|&i| fold_of[i] == v).count();
            assert_eq!(total, 20);
            assert_eq!(ones, 5, "fold {v} should hold a quarter treated");
        }
    }
}
