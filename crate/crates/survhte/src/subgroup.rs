//! Second-stage exploration of estimated treatment effects.
//!
//! Two complementary views of heterogeneity: a linear regression of each
//! posterior draw (or subsample replicate) of the effect vector on covariates,
//! and a stepwise "fit the fit" regression tree on the per-subject point
//! effects that surfaces subgroup structure. Leaf-level effect summaries are
//! read back from the same draw matrix that fed the first stage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numeric::{cholesky, cholesky_solve, mean, quantile};

/// One coefficient row: draw mean with equal-tailed 95% bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Regression of per-draw effects on covariates, summarized over draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    /// Intercept first, then kept covariates in input order.
    pub rows: Vec<CoefficientRow>,
    /// Covariates removed because they were collinear with earlier columns.
    pub dropped: Vec<String>,
}

/// Regresses every draw's effect vector on the covariates.
///
/// One OLS solve per draw through shared normal equations with a 1e-8 ridge,
/// so the summary quantiles are over the draw distribution of each
/// coefficient. Collinear columns are dropped, not fatal.
pub fn second_stage_linear(
    draws: &[Vec<f64>],
    covariates: &[Vec<f64>],
    names: &[String],
) -> Result<RegressionSummary> {
    let n = draws.len();
    if n == 0 || covariates.len() != n {
        return Err(Error::invalid("draws and covariates must align"));
    }
    // A single draw is allowed; its intervals degenerate to the point.
    let n_draws = draws[0].len();
    if n_draws == 0 {
        return Err(Error::invalid("regression over draws needs at least 1 draw"));
    }
    if draws.iter().any(|r| r.len() != n_draws) {
        return Err(Error::invalid("ragged draw matrix"));
    }
    let p = names.len();
    if covariates.iter().any(|r| r.len() != p) {
        return Err(Error::invalid("covariate rows must match the name list"));
    }

    // Columns: intercept then covariates.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
    cols.push(vec![1.0; n]);
    for v in 0..p {
        cols.push(covariates.iter().map(|r| r[v]).collect());
    }

    // Gram-Schmidt rank screen: a column whose residual against the kept
    // basis is numerically zero adds no information and is dropped.
    let mut kept: Vec<usize> = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        let norm0: f64 = col.iter().map(|v| v * v).sum();
        let mut resid = col.clone();
        for b in &basis {
            let proj: f64 = resid.iter().zip(b).map(|(a, c)| a * c).sum();
            for (r, c) in resid.iter_mut().zip(b) {
                *r -= proj * c;
            }
        }
        let norm: f64 = resid.iter().map(|v| v * v).sum();
        if norm0 <= 0.0 || norm <= 1e-10 * norm0 {
            if j == 0 {
                return Err(Error::invalid("empty design: intercept column is degenerate"));
            }
            dropped.push(names[j - 1].clone());
            continue;
        }
        let inv = norm.sqrt().recip();
        for r in &mut resid {
            *r *= inv;
        }
        basis.push(resid);
        kept.push(j);
    }
    let k = kept.len();

    let mut gram = vec![0.0; k * k];
    for a in 0..k {
        for b in a..k {
            let g: f64 = cols[kept[a]].iter().zip(&cols[kept[b]]).map(|(x, y)| x * y).sum();
            gram[a * k + b] = g;
            gram[b * k + a] = g;
        }
    }
    for d in 0..k {
        gram[d * k + d] += 1e-8;
    }
    cholesky(&mut gram, k)
        .map_err(|_| Error::invalid("design still rank-deficient after dropping collinear columns"))?;

    let mut coef_draws = vec![vec![0.0; n_draws]; k];
    let mut rhs = vec![0.0; k];
    for d in 0..n_draws {
        for (a, slot) in rhs.iter_mut().enumerate() {
            *slot = cols[kept[a]].iter().zip(draws).map(|(x, row)| x * row[d]).sum();
        }
        cholesky_solve(&gram, k, &mut rhs);
        for (a, val) in rhs.iter().enumerate() {
            coef_draws[a][d] = *val;
        }
    }

    let mut rows = Vec::with_capacity(k);
    for (a, cd) in coef_draws.iter().enumerate() {
        let point = mean(cd);
        if !point.is_finite() {
            return Err(Error::numeric("non-finite regression coefficient"));
        }
        let lower = quantile(cd, 0.025)?.min(point);
        let upper = quantile(cd, 0.975)?.max(point);
        let name = if kept[a] == 0 {
            "intercept".to_string()
        } else {
            names[kept[a] - 1].clone()
        };
        rows.push(CoefficientRow { name, point, lower, upper });
    }
    Ok(RegressionSummary { rows, dropped })
}

/// Renders a regression summary as CSV text.
pub fn regression_csv(summary: &RegressionSummary) -> String {
    let mut out = String::from("term,estimate,lower95,upper95\n");
    for row in &summary.rows {
        out.push_str(&format!("{},{},{},{}\n", row.name, row.point, row.lower, row.upper));
    }
    out
}

/// Per-split controls for the regression tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartConfig {
    /// A split must lift overall R-squared by at least this much.
    pub min_improve: f64,
    /// Smallest allowed leaf.
    pub min_leaf: usize,
}

impl Default for CartConfig {
    fn default() -> Self {
        CartConfig { min_improve: 0.01, min_leaf: 20 }
    }
}

/// Stopping rule for stepwise covariate selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepwiseConfig {
    /// Minimum R-squared improvement to accept the next covariate.
    pub min_improve: f64,
    /// Compare improvements on an absolute scale instead of relative.
    pub absolute_stop: bool,
    pub cart: CartConfig,
}

impl Default for StepwiseConfig {
    fn default() -> Self {
        StepwiseConfig { min_improve: 0.01, absolute_stop: false, cart: CartConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CartNode {
    Split { var: usize, threshold: f64, left: usize, right: usize },
    Leaf { subjects: Vec<usize>, mean: f64 },
}

/// Greedy variance-reduction regression tree; root at node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartTree {
    pub nodes: Vec<CartNode>,
    /// 1 - SSE/SST over the leaves; 0 for a constant target.
    pub r2: f64,
    /// Covariates chosen by stepwise selection, in acceptance order.
    pub selected: Vec<usize>,
    /// Achieved R-squared after each stepwise acceptance.
    pub r2_path: Vec<f64>,
}

impl CartTree {
    /// Node ids of all leaves, in arena order.
    pub fn leaf_ids(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i], CartNode::Leaf { .. }))
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_ids().len()
    }
}

struct SplitChoice {
    var: usize,
    threshold: f64,
    gain: f64,
}

/// Best single split of `subs` over `allowed` variables, or None.
fn best_split(
    target: &[f64],
    covariates: &[Vec<f64>],
    subs: &[usize],
    allowed: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = subs.len();
    if n < 2 * min_leaf {
        return None;
    }
    let total: f64 = subs.iter().map(|&i| target[i]).sum();
    let base = total * total / n as f64;

    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<usize> = subs.to_vec();
    for &var in allowed {
        order.sort_by(|&a, &b| covariates[a][var].total_cmp(&covariates[b][var]));
        let mut left_sum = 0.0;
        for (pos, &i) in order.iter().enumerate().take(n - 1) {
            left_sum += target[i];
            let nl = pos + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let here = covariates[i][var];
            let next = covariates[order[pos + 1]][var];
            if !(here < next) {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64 - base;
            if best.as_ref().map_or(true, |b| gain > b.gain) {
                best = Some(SplitChoice { var, threshold: 0.5 * (here + next), gain });
            }
        }
    }
    best
}

/// Fits a regression tree of `target` on the `allowed` covariates.
///
/// Splits greedily by squared-error reduction; a split is kept only when it
/// improves overall R-squared by at least `config.min_improve`. Subjects with
/// covariate value at or below the threshold route left.
pub fn fit_cart(
    target: &[f64],
    covariates: &[Vec<f64>],
    allowed: &[usize],
    config: &CartConfig,
) -> Result<CartTree> {
    let n = target.len();
    if n < 4 {
        return Err(Error::invalid("tree fitting needs at least 4 subjects"));
    }
    if covariates.len() != n {
        return Err(Error::invalid("target and covariates must align"));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite tree target"));
    }
    if config.min_leaf == 0 {
        return Err(Error::invalid("min_leaf must be positive"));
    }
    let p = covariates[0].len();
    if allowed.iter().any(|&v| v >= p) {
        return Err(Error::invalid("allowed variable out of range"));
    }

    let grand = mean(target);
    let sst: f64 = target.iter().map(|v| (v - grand) * (v - grand)).sum();

    let mut nodes = vec![CartNode::Leaf { subjects: Vec::new(), mean: grand }];
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, (0..n).collect())];
    while let Some((slot, subs)) = stack.pop() {
        let split = if sst > 1e-12 {
            best_split(target, covariates, &subs, allowed, config.min_leaf)
                .filter(|s| s.gain / sst >= config.min_improve)
        } else {
            None
        };
        match split {
            Some(s) => {
                let left = nodes.len();
                nodes.push(CartNode::Leaf { subjects: Vec::new(), mean: 0.0 });
                nodes.push(CartNode::Leaf { subjects: Vec::new(), mean: 0.0 });
                nodes[slot] =
                    CartNode::Split { var: s.var, threshold: s.threshold, left, right: left + 1 };
                let (ls, rs): (Vec<usize>, Vec<usize>) =
                    subs.into_iter().partition(|&i| covariates[i][s.var] <= s.threshold);
                stack.push((left, ls));
                stack.push((left + 1, rs));
            }
            None => {
                let m = mean(&subs.iter().map(|&i| target[i]).collect::<Vec<f64>>());
                nodes[slot] = CartNode::Leaf { subjects: subs, mean: m };
            }
        }
    }

    let mut sse = 0.0;
    for node in &nodes {
        if let CartNode::Leaf { subjects, mean: m } = node {
            sse += subjects.iter().map(|&i| (target[i] - m) * (target[i] - m)).sum::<f64>();
        }
    }
    let r2 = if sst > 1e-12 { (1.0 - sse / sst).clamp(0.0, 1.0) } else { 0.0 };
    Ok(CartTree { nodes, r2, selected: allowed.to_vec(), r2_path: Vec::new() })
}

/// Stepwise "fit the fit": adds one covariate at a time to the tree.
///
/// Each round refits candidate trees on the selected set plus one new
/// covariate (in parallel), keeps the R-squared argmax with ties broken by
/// covariate index, and stops when the improvement falls below
/// `config.min_improve` (relative by default).
pub fn fit_the_fit(
    target: &[f64],
    covariates: &[Vec<f64>],
    config: &StepwiseConfig,
) -> Result<CartTree> {
    let n = target.len();
    if n < 4 {
        return Err(Error::invalid("tree fitting needs at least 4 subjects"));
    }
    if covariates.len() != n {
        return Err(Error::invalid("target and covariates must align"));
    }
    let p = covariates[0].len();

    let mut tree = fit_cart(target, covariates, &[], &config.cart)?;
    let mut selected: Vec<usize> = Vec::new();
    let mut path: Vec<f64> = Vec::new();
    let mut r2_old = 0.0;
    loop {
        let remaining: Vec<usize> = (0..p).filter(|v| !selected.contains(v)).collect();
        if remaining.is_empty() {
            break;
        }
        let mut fits: Vec<(usize, CartTree)> = remaining
            .par_iter()
            .map(|&c| {
                let mut allowed = selected.clone();
                allowed.push(c);
                allowed.sort_unstable();
                fit_cart(target, covariates, &allowed, &config.cart).map(|t| (c, t))
            })
            .collect::<Result<Vec<_>>>()?;
        fits.sort_by(|a, b| b.1.r2.total_cmp(&a.1.r2).then(a.0.cmp(&b.0)));
        let (chosen, cand) = fits.swap_remove(0);
        let improve = if config.absolute_stop {
            cand.r2 - r2_old
        } else {
            (cand.r2 - r2_old) / r2_old.max(1e-8)
        };
        if improve < config.min_improve {
            break;
        }
        r2_old = cand.r2;
        selected.push(chosen);
        path.push(cand.r2);
        tree = cand;
    }
    tree.selected = selected;
    tree.r2_path = path;
    Ok(tree)
}

/// Subgroup effect summary for one tree leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafEffect {
    /// Node id in the tree arena.
    pub node: usize,
    pub n: usize,
    /// Point effect in the leaf's mean over draws.
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Averages the effect draws within each leaf and summarizes over draws.
///
/// Per draw, the leaf effect is the subject average, so the count-weighted
/// mean of leaf effects reproduces the overall draw mean exactly.
pub fn node_effects(tree: &CartTree, draws: &[Vec<f64>]) -> Result<Vec<LeafEffect>> {
    if draws.is_empty() {
        return Err(Error::invalid("node effects need a draw matrix"));
    }
    let n_draws = draws[0].len();
    if n_draws == 0 || draws.iter().any(|r| r.len() != n_draws) {
        return Err(Error::invalid("ragged or empty draw matrix"));
    }
    let mut out = Vec::new();
    for id in tree.leaf_ids() {
        let CartNode::Leaf { subjects, .. } = &tree.nodes[id] else { unreachable!() };
        if subjects.iter().any(|&i| i >= draws.len()) {
            return Err(Error::invalid("leaf subject outside the draw matrix"));
        }
        if subjects.is_empty() {
            continue;
        }
        let mut leaf_draws = vec![0.0; n_draws];
        for &i in subjects {
            for (slot, v) in leaf_draws.iter_mut().zip(&draws[i]) {
                *slot += v;
            }
        }
        let inv = (subjects.len() as f64).recip();
        for v in &mut leaf_draws {
            *v *= inv;
        }
        let point = mean(&leaf_draws);
        let lower = quantile(&leaf_draws, 0.025)?.min(point);
        let upper = quantile(&leaf_draws, 0.975)?.max(point);
        out.push(LeafEffect { node: id, n: subjects.len(), mean: point, lower, upper });
    }
    Ok(out)
}

fn node_text(tree: &CartTree, names: &[String], id: usize, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    match &tree.nodes[id] {
        CartNode::Split { var, threshold, left, right } => {
            let name = names.get(*var).cloned().unwrap_or_else(|| format!("x{}", var + 1));
            out.push_str(&format!("{pad}{name} <= {threshold:.6}\n"));
            node_text(tree, names, *left, depth + 1, out);
            out.push_str(&format!("{pad}{name} > {threshold:.6}\n"));
            node_text(tree, names, *right, depth + 1, out);
        }
        CartNode::Leaf { subjects, mean } => {
            out.push_str(&format!("{pad}leaf: n={} mean={mean:.4}\n", subjects.len()));
        }
    }
}

/// Indented text rendering of the tree.
pub fn tree_text(tree: &CartTree, names: &[String]) -> String {
    let mut out = String::new();
    node_text(tree, names, 0, 0, &mut out);
    out
}

fn node_json(tree: &CartTree, names: &[String], effects: &[LeafEffect], id: usize) -> Value {
    match &tree.nodes[id] {
        CartNode::Split { var, threshold, left, right } => json!({
            "type": "split",
            "variable": names.get(*var).cloned().unwrap_or_else(|| format!("x{}", var + 1)),
            "threshold": threshold,
            "left": node_json(tree, names, effects, *left),
            "right": node_json(tree, names, effects, *right),
        }),
        CartNode::Leaf { subjects, mean } => {
            let eff = effects.iter().find(|e| e.node == id);
            json!({
                "type": "leaf",
                "n": subjects.len(),
                "mean": eff.map_or(*mean, |e| e.mean),
                "lower95": eff.map(|e| e.lower),
                "upper95": eff.map(|e| e.upper),
            })
        }
    }
}

/// Structured JSON rendering: splits with names, leaves with effect summaries.
pub fn tree_json(tree: &CartTree, names: &[String], effects: &[LeafEffect]) -> Value {
    json!({
        "r2": tree.r2,
        "selected": tree.selected.iter()
            .map(|&v| names.get(v).cloned().unwrap_or_else(|| format!("x{}", v + 1)))
            .collect::<Vec<String>>(),
        "r2_path": tree.r2_path,
        "root": node_json(tree, names, effects, 0),
    })
}
