//! Random survival forest.
//!
//! Bootstrap trees split by the two-sample log-rank statistic; terminal
//! nodes carry Nelson-Aalen hazard increments of their own subjects. The
//! ensemble prediction averages cumulative hazards over all trees.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::learners::RsfConfig;
use crate::rng::{derive_seed, stream_rng};
use crate::survcore::{Dataset, SurvivalCurve, TimeGrid};

#[derive(Debug, Clone)]
enum Node {
    /// Goes left when x[var] <= threshold; children are adjacent.
    Split { var: usize, threshold: f64, left: usize },
    /// Slice into the tree's jump pool.
    Leaf { start: usize, len: usize },
}

#[derive(Debug)]
struct Tree {
    nodes: Vec<Node>,
    /// (time, hazard increment) pairs, grouped per leaf, times ascending.
    jumps: Vec<(f64, f64)>,
    /// Root split variable, kept for diagnostics.
    root_var: Option<usize>,
}

/// Fitted forest.
#[derive(Debug)]
pub struct RsfFit {
    trees: Vec<Tree>,
    in_bag: Vec<Vec<bool>>,
    p: usize,
}

/// Distinct event times of a node with the quantities the log-rank sweep
/// needs. Indices are event-time ranks.
struct NodeStats {
    /// Number of distinct event times.
    m: usize,
    /// Events at each time.
    d: Vec<f64>,
    /// Subjects at risk at each time.
    risk: Vec<f64>,
    /// Hypergeometric variance factor d (Y - d) / (Y^2 (Y - 1)).
    kappa: Vec<f64>,
    /// Log-rank score per node subject, aligned with the node index list.
    score: Vec<f64>,
    /// Number of event times at or before each subject's observed time.
    rank: Vec<usize>,
}

fn node_stats(idx: &[usize], y: &[f64], delta: &[u8]) -> NodeStats {
    let mut order: Vec<usize> = (0..idx.len()).collect();
    order.sort_by(|&a, &b| y[idx[a]].partial_cmp(&y[idx[b]]).unwrap());
    let n = idx.len();
    let mut times = Vec::new();
    let mut d = Vec::new();
    let mut risk = Vec::new();
    let mut pos = 0;
    while pos < n {
        let t = y[idx[order[pos]]];
        let at_risk = (n - pos) as f64;
        let mut events = 0.0;
        let mut k = pos;
        while k < n && y[idx[order[k]]] == t {
            events += f64::from(delta[idx[order[k]]]);
            k += 1;
        }
        if events > 0.0 {
            times.push(t);
            d.push(events);
            risk.push(at_risk);
        }
        pos = k;
    }
    let m = times.len();
    let kappa: Vec<f64> = (0..m)
        .map(|j| {
            if risk[j] > 1.0 {
                d[j] * (risk[j] - d[j]) / (risk[j] * risk[j] * (risk[j] - 1.0))
            } else {
                0.0
            }
        })
        .collect();
    // Nelson-Aalen prefix for the scores
    let mut na = Vec::with_capacity(m);
    let mut acc = 0.0;
    for j in 0..m {
        acc += d[j] / risk[j];
        na.push(acc);
    }
    let mut score = vec![0.0; n];
    let mut rank = vec![0; n];
    for (local, &i) in idx.iter().enumerate() {
        let r = times.partition_point(|&t| t <= y[i]);
        rank[local] = r;
        let cum = if r == 0 { 0.0 } else { na[r - 1] };
        score[local] = f64::from(delta[i]) - cum;
    }
    NodeStats { m, d, risk, kappa, score, rank }
}

struct BestSplit {
    stat: f64,
    /// Position of the variable in name-sorted order; ties prefer the
    /// smaller position, then the smaller threshold.
    name_pos: usize,
    var: usize,
    threshold: f64,
}

/// Log-rank sweep over thresholds of one variable. Subjects move from the
/// right child to the left as the threshold rises; the statistic's
/// numerator and variance update incrementally per move.
#[allow(clippy::too_many_arguments)]
fn best_split_for_var(
    idx: &[usize],
    cols: &[Vec<f64>],
    var: usize,
    name_pos: usize,
    stats: &NodeStats,
    nodesize: usize,
    left_risk: &mut [f64],
    best: &mut Option<BestSplit>,
) {
    let n = idx.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cols[var][idx[a]].partial_cmp(&cols[var][idx[b]]).unwrap());
    left_risk[..stats.m].fill(0.0);
    let mut u = 0.0;
    let mut v = 0.0;
    let mut moved = 0;
    while moved < n {
        let value = cols[var][idx[order[moved]]];
        // move the whole tie block; splits can only fall between values
        while moved < n && cols[var][idx[order[moved]]] == value {
            let local = order[moved];
            u += stats.score[local];
            for j in 0..stats.rank[local] {
                v += stats.kappa[j] * (stats.risk[j] - 2.0 * left_risk[j] - 1.0);
                left_risk[j] += 1.0;
            }
            moved += 1;
        }
        if moved >= n {
            break;
        }
        if moved < nodesize || n - moved < nodesize {
            continue;
        }
        if v <= 1e-12 {
            continue;
        }
        let stat = u * u / v;
        let threshold = 0.5 * (value + cols[var][idx[order[moved]]]);
        let better = match best {
            None => true,
            Some(b) => {
                stat > b.stat
                    || (stat == b.stat
                        && (name_pos < b.name_pos
                            || (name_pos == b.name_pos && threshold < b.threshold)))
            }
        };
        if better {
            *best = Some(BestSplit { stat, name_pos, var, threshold });
        }
    }
}

/// Nelson-Aalen hazard increments of a leaf's subjects.
fn leaf_jumps(idx: &[usize], y: &[f64], delta: &[u8], out: &mut Vec<(f64, f64)>) -> (usize, usize) {
    let start = out.len();
    let stats = node_stats(idx, y, delta);
    let mut times: Vec<f64> = idx.iter().filter(|&&i| delta[i] == 1).map(|&i| y[i]).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    debug_assert_eq!(times.len(), stats.m);
    for j in 0..stats.m {
        out.push((times[j], stats.d[j] / stats.risk[j]));
    }
    (start, stats.m)
}

/// Fits the forest. Requires at least one observed event; trees whose
/// bootstrap sample has no events are resampled up to ten times.
pub fn fit_rsf(data: &Dataset, config: &RsfConfig, seed: u64) -> Result<RsfFit> {
    let n = data.n();
    let p = data.p();
    if p == 0 {
        return Err(Error::fit("rsf", "needs at least one covariate"));
    }
    if !data.records().iter().any(|r| r.delta == 1) {
        return Err(Error::fit("rsf", "needs at least one observed event"));
    }
    let mtry = config.mtry.unwrap_or_else(|| p.div_ceil(3)).min(p).max(1);
    let cols: Vec<Vec<f64>> = (0..p)
        .map(|j| data.records().iter().map(|r| r.x[j]).collect())
        .collect();
    let y: Vec<f64> = data.times();
    let delta: Vec<u8> = data.events();

    // variables are sampled by their position in name-sorted order, so a
    // column permutation with matching names cannot change the forest
    let mut name_order: Vec<usize> = (0..p).collect();
    name_order.sort_by(|&a, &b| data.covariate_names()[a].cmp(&data.covariate_names()[b]));

    let mut trees = Vec::with_capacity(config.trees);
    let mut in_bag_all = Vec::with_capacity(config.trees);
    for t in 0..config.trees {
        let mut rng = stream_rng(derive_seed(seed, &[0x7EE5, t as u64]));
        let mut sample: Vec<usize>;
        let mut in_bag = vec![false; n];
        if config.bootstrap {
            let mut attempts = 0;
            loop {
                sample = (0..n).map(|_| rng.gen_range(0..n)).collect();
                if sample.iter().any(|&i| delta[i] == 1) {
                    break;
                }
                attempts += 1;
                if attempts >= 10 {
                    return Err(Error::fit(
                        "rsf",
                        format!("tree {t}: ten bootstrap samples in a row had no events"),
                    ));
                }
            }
            for &i in &sample {
                in_bag[i] = true;
            }
        } else {
            sample = (0..n).collect();
            in_bag.fill(true);
        }

        let mut nodes: Vec<Node> = Vec::new();
        let mut jumps: Vec<(f64, f64)> = Vec::new();
        let mut root_var = None;
        // stack of (node slot, subject list)
        nodes.push(Node::Leaf { start: 0, len: 0 });
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, sample)];
        let mut left_risk = vec![0.0; n];
        while let Some((slot, idx)) = stack.pop() {
            let n_events = idx.iter().filter(|&&i| delta[i] == 1).count();
            let mut split = None;
            if idx.len() >= 2 * config.nodesize && n_events > 0 {
                let stats = node_stats(&idx, &y, &delta);
                let mut chosen: Vec<usize> = Vec::with_capacity(mtry);
                {
                    // partial Fisher-Yates over name-sorted positions
                    let mut pool: Vec<usize> = (0..p).collect();
                    for k in 0..mtry {
                        let j = rng.gen_range(k..p);
                        pool.swap(k, j);
                        chosen.push(pool[k]);
                    }
                }
                let mut best: Option<BestSplit> = None;
                for &name_pos in &chosen {
                    let var = name_order[name_pos];
                    best_split_for_var(
                        &idx,
                        &cols,
                        var,
                        name_pos,
                        &stats,
                        config.nodesize,
                        &mut left_risk,
                        &mut best,
                    );
                }
                split = best;
            }
            match split {
                Some(b) => {
                    let (mut left, mut right) = (Vec::new(), Vec::new());
                    for &i in &idx {
                        if cols[b.var][i] <= b.threshold {
                            left.push(i);
                        } else {
                            right.push(i);
                        }
                    }
                    let left_slot = nodes.len();
                    nodes.push(Node::Leaf { start: 0, len: 0 });
                    nodes.push(Node::Leaf { start: 0, len: 0 });
                    nodes[slot] =
                        Node::Split { var: b.var, threshold: b.threshold, left: left_slot };
                    if slot == 0 {
                        root_var = Some(b.var);
                    }
                    stack.push((left_slot, left));
                    stack.push((left_slot + 1, right));
                }
                None => {
                    let (start, len) = leaf_jumps(&idx, &y, &delta, &mut jumps);
                    nodes[slot] = Node::Leaf { start, len };
                }
            }
        }
        trees.push(Tree { nodes, jumps, root_var });
        in_bag_all.push(in_bag);
    }
    Ok(RsfFit { trees, in_bag: in_bag_all, p })
}

impl Tree {
    fn leaf_for(&self, x: &[f64]) -> (usize, usize) {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Split { var, threshold, left } => {
                    at = if x[var] <= threshold { left } else { left + 1 };
                }
                Node::Leaf { start, len } => return (start, len),
            }
        }
    }
}

impl RsfFit {
    /// Variable index of a tree's root split, `None` for stumps.
    pub fn root_split_variable(&self, tree: usize) -> Option<usize> {
        self.trees.get(tree).and_then(|t| t.root_var)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.p {
            return Err(Error::invalid(format!("expected {} covariates, got {}", self.p, x.len())));
        }
        Ok(())
    }

    /// Average cumulative hazard over `use_tree`-selected trees, binned on
    /// the grid, then exponentiated into a survival curve.
    fn curve_over_trees<F: Fn(usize) -> bool>(
        &self,
        x: &[f64],
        grid: &Arc<TimeGrid>,
        use_tree: F,
    ) -> Result<SurvivalCurve> {
        self.check_dim(x)?;
        let gt = grid.times();
        let mut diff = vec![0.0; gt.len()];
        let mut used = 0usize;
        for (ti, tree) in self.trees.iter().enumerate() {
            if !use_tree(ti) {
                continue;
            }
            used += 1;
            let (start, len) = tree.leaf_for(x);
            for &(t, inc) in &tree.jumps[start..start + len] {
                // first grid time at or after the jump
                let at = grid.index_at(t);
                let bin = if gt[at] >= t { at } else { at + 1 };
                if bin < gt.len() {
                    diff[bin] += inc;
                }
            }
        }
        if used == 0 {
            return Err(Error::invalid("no trees available for this prediction"));
        }
        let mut acc = 0.0;
        let probs: Vec<f64> = diff
            .iter()
            .map(|d| {
                acc += d / used as f64;
                (-acc).exp()
            })
            .collect();
        SurvivalCurve::new(Arc::clone(grid), probs)
    }

    /// Full-ensemble survival curve.
    pub fn predict_curve(&self, x: &[f64], grid: &Arc<TimeGrid>) -> Result<SurvivalCurve> {
        self.curve_over_trees(x, grid, |_| true)
    }

    /// Out-of-bag curve for training row `row`: only trees whose bootstrap
    /// sample missed that row contribute.
    pub fn predict_oob_curve(
        &self,
        row: usize,
        x: &[f64],
        grid: &Arc<TimeGrid>,
    ) -> Result<SurvivalCurve> {
        if row >= self.in_bag[0].len() {
            return Err(Error::invalid(format!("row {row} out of range")));
        }
        self.curve_over_trees(x, grid, |ti| !self.in_bag[ti][row])
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::survcore::{curve_eval, make_grid, nelson_aalen, ObservedRecord};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn exp_data(n: usize, seed: u64, rate_of: impl Fn(&[f64]) -> f64, p: usize) -> Dataset {
        let mut rng = stream_rng(seed);
        let records: Vec<ObservedRecord> = (0..n)
            .map(|i| {
                let mut x: Vec<f64> =
                    (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                x[0] = (i % 2) as f64;
                let t = -(1.0 - rng.gen::<f64>()).ln() / rate_of(&x);
                let c = -(1.0 - rng.gen::<f64>()).ln() / 0.02;
                ObservedRecord { x, z: 0, y: t.min(c), delta: (t < c) as u8 }
            })
            .collect();
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Dataset::new(records, names).unwrap()
    }

    #[test]
    fn single_stump_reproduces_pooled_nelson_aalen() {
        let data = exp_data(150, 5, |_| 0.08, 2);
        let config = RsfConfig { trees: 1, mtry: None, nodesize: 200, bootstrap: false };
        let fit = fit_rsf(&data, &config, 3).unwrap();
        let grid = make_grid(&data.times(), 300).unwrap();
        let curve = fit.predict_curve(&[0.0, 0.0], &grid).unwrap();
        let na = nelson_aalen(&data.times(), &data.events(), None).unwrap();
        let na_surv = na.to_survival();
        for (k, &t) in grid.times().iter().enumerate() {
            let want = curve_eval(&na_surv, t).unwrap();
            assert!(
                (curve.probs[k] - want).abs() < 1e-12,
                "stump curve at t={t}: {} vs pooled {want}",
                curve.probs[k]
            );
        }
    }

    #[test]
    fn strongly_separated_groups_drive_the_root_split() {
        let data = exp_data(400, 11, |x| if x[0] > 0.5 { 0.5 } else { 0.05 }, 3);
        let config = RsfConfig { trees: 100, mtry: Some(3), nodesize: 30, bootstrap: true };
        let fit = fit_rsf(&data, &config, 29).unwrap();
        let hits = (0..fit.n_trees())
            .filter(|&t| fit.root_split_variable(t) == Some(0))
            .count();
        assert!(
            hits as f64 / fit.trees.len() as f64 > 0.95,
            "only {hits} of {} trees split the group variable first",
            fit.trees.len()
        );
    }

    #[test]
    fn curves_are_valid_and_hazard_nondecreasing() {
        let data = exp_data(250, 17, |x| 0.05 * (0.6 * x[1]).exp(), 3);
        let config = RsfConfig { trees: 60, mtry: None, nodesize: 5, bootstrap: true };
        let fit = fit_rsf(&data, &config, 7).unwrap();
        let grid = make_grid(&data.times(), 200).unwrap();
        let mut rng = stream_rng(41);
        for _ in 0..20 {
            let x = vec![
                (rng.gen::<f64>() * 2.0).round(),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ];
            let curve = fit.predict_curve(&x, &grid).unwrap();
            assert_eq!(curve.probs[0], 1.0);
            for w in curve.probs.windows(2) {
                assert!(w[1] <= w[0] && w[1] > 0.0);
            }
        }
    }

    #[test]
    fn column_permutation_with_names_is_inert() {
        let data = exp_data(200, 23, |x| 0.05 * (0.8 * x[0] + 0.3 * x[2]).exp(), 3);
        let perm = [2usize, 0, 1];
        let permuted_records: Vec<ObservedRecord> = data
            .records()
            .iter()
            .map(|r| ObservedRecord {
                x: perm.iter().map(|&j| r.x[j]).collect(),
                z: r.z,
                y: r.y,
                delta: r.delta,
            })
            .collect();
        let permuted_names: Vec<String> =
            perm.iter().map(|&j| data.covariate_names()[j].clone()).collect();
        let permuted = Dataset::new(permuted_records, permuted_names).unwrap();
        let config = RsfConfig { trees: 30, mtry: Some(2), nodesize: 10, bootstrap: true };
        let fit_a = fit_rsf(&data, &config, 99).unwrap();
        let fit_b = fit_rsf(&permuted, &config, 99).unwrap();
        let grid = make_grid(&data.times(), 150).unwrap();
        let x = [1.0, -0.3, 0.8];
        let xp: Vec<f64> = perm.iter().map(|&j| x[j]).collect();
        let ca = fit_a.predict_curve(&x, &grid).unwrap();
        let cb = fit_b.predict_curve(&xp, &grid).unwrap();
        assert_eq!(ca.probs, cb.probs, "permuted fit must be identical");
    }

    #[test]
    fn out_of_bag_excludes_own_trees() {
        let data = exp_data(120, 31, |_| 0.06, 2);
        let config = RsfConfig { trees: 50, mtry: None, nodesize: 10, bootstrap: true };
        let fit = fit_rsf(&data, &config, 13).unwrap();
        let grid = make_grid(&data.times(), 100).unwrap();
        let x = data.records()[0].x.clone();
        let oob = fit.predict_oob_curve(0, &x, &grid).unwrap();
        let full = fit.predict_curve(&x, &grid).unwrap();
        assert_ne!(oob.probs, full.probs, "OOB must average a strict subset of trees");
    }

    #[test]
    fn no_events_is_an_error() {
        let records: Vec<ObservedRecord> = (0..40)
            .map(|i| ObservedRecord { x: vec![i as f64], z: 0, y: 1.0 + i as f64, delta: 0 })
            .collect();
        let data = Dataset::new(records, vec!["x1".into()]).unwrap();
        assert!(fit_rsf(&data, &RsfConfig::default(), 1).is_err());
    }

    #[test]
    fn sparse_events_still_fit_through_resampling() {
        let mut data = exp_data(60, 37, |_| 0.05, 2);
        let records: Vec<ObservedRecord> = data
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| ObservedRecord { delta: (i < 2) as u8, ..r.clone() })
            .collect();
        data = Dataset::new(records, data.covariate_names().to_vec()).unwrap();
        let config = RsfConfig { trees: 20, mtry: None, nodesize: 5, bootstrap: true };
        let fit = fit_rsf(&data, &config, 3).unwrap();
        assert_eq!(fit.n_trees(), 20);
    }
}
