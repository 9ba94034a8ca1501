//! Analysis pipeline for a user-supplied dataset (no ground truth):
//! per-subject effects, draw-based uncertainty, an exploratory linear
//! regression, subgroup discovery, and overlap diagnostics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::harness::manifest::{write_bytes_atomic, write_json_atomic};
use crate::harness::plots::svg_overlap_histogram;
use crate::iste::{estimate_iste, iste_subsample, IsteResult, PointSummary};
use crate::learners::{LearnerSpec, Method};
use crate::numeric::{mean, quantile};
use crate::propensity::{fit_propensity, PropensityConfig};
use crate::rng::derive_seed;
use crate::subgroup::{
    fit_the_fit, node_effects, regression_csv, second_stage_linear, tree_json, tree_text,
    CartTree, LeafEffect, RegressionSummary, StepwiseConfig,
};
use crate::survcore::{make_grid, Dataset, ObservedRecord, DEFAULT_GRID_POINTS};

/// Number of effect-percentile subgroups in the scatter export.
pub const SCATTER_GROUPS: usize = 300;

/// Names the dataset columns holding each analysis role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub time: String,
    pub event: String,
    pub treatment: String,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CaseStudyOptions {
    pub method: Method,
    pub seed: u64,
    pub grid_points: usize,
    /// Subsample replicates for frequentist uncertainty; 0 skips intervals.
    pub subsample_reps: usize,
    pub subsample_fraction: f64,
    pub stepwise: StepwiseConfig,
    pub spec_overrides: Option<LearnerSpec>,
}

impl CaseStudyOptions {
    pub fn new(method: Method, seed: u64) -> Self {
        CaseStudyOptions {
            method,
            seed,
            grid_points: DEFAULT_GRID_POINTS,
            subsample_reps: 0,
            subsample_fraction: 0.2,
            stepwise: StepwiseConfig::default(),
            spec_overrides: None,
        }
    }
}

/// Outputs of one case-study run, with the files written.
#[derive(Debug)]
pub struct CaseStudySummary {
    pub points: Vec<f64>,
    pub intervals: Option<Vec<(f64, f64)>>,
    pub regression: RegressionSummary,
    pub tree: CartTree,
    pub effects: Vec<LeafEffect>,
    pub files: Vec<PathBuf>,
}

/// Loads a dataset CSV through a column mapping, with row-level diagnostics.
pub fn load_case_data(path: &Path, mapping: &ColumnMapping) -> Result<Dataset> {
    if mapping.covariates.is_empty() {
        return Err(Error::config("column mapping needs at least one covariate"));
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::config(format!("column '{name}' not found in {}", path.display()))
        })
    };
    let time_at = find(&mapping.time)?;
    let event_at = find(&mapping.event)?;
    let treat_at = find(&mapping.treatment)?;
    let cov_at: Vec<usize> =
        mapping.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let parse = |row: usize, name: &str, raw: &str| -> Result<f64> {
        raw.trim().parse::<f64>().map_err(|_| {
            Error::config(format!("row {row}: column '{name}' has non-numeric value '{raw}'"))
        })
    };
    let mut records = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::config(format!("row {row}: {e}")))?;
        let get = |at: usize, name: &str| -> Result<f64> {
            record
                .get(at)
                .ok_or_else(|| Error::config(format!("row {row}: missing column '{name}'")))
                .and_then(|raw| parse(row, name, raw))
        };
        let y = get(time_at, &mapping.time)?;
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::config(format!(
                "row {row}: time must be positive and finite, got {y}"
            )));
        }
        let z = get(treat_at, &mapping.treatment)?;
        if z != 0.0 && z != 1.0 {
            return Err(Error::config(format!("row {row}: treatment must be 0 or 1, got {z}")));
        }
        let delta = get(event_at, &mapping.event)?;
        if delta != 0.0 && delta != 1.0 {
            return Err(Error::config(format!(
                "row {row}: event indicator must be 0 or 1, got {delta}"
            )));
        }
        let mut x = Vec::with_capacity(cov_at.len());
        for (at, name) in cov_at.iter().zip(&mapping.covariates) {
            let v = get(*at, name)?;
            if !v.is_finite() {
                return Err(Error::config(format!("row {row}: covariate '{name}' is not finite")));
            }
            x.push(v);
        }
        records.push(ObservedRecord { x, z: z as u8, y, delta: delta as u8 });
    }
    if records.is_empty() {
        return Err(Error::config(format!("{} has no data rows", path.display())));
    }
    Dataset::new(records, mapping.covariates.clone())
}

/// Effect-percentile subgroup scatter: one block of rows per covariate.
///
/// Subjects are ranked by point effect and cut into up to `SCATTER_GROUPS`
/// rank groups; each row pairs a group's mean covariate value with its mean
/// effect.
fn scatter_csv(points: &[f64], data: &Dataset) -> String {
    let n = points.len();
    let groups = SCATTER_GROUPS.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].total_cmp(&points[b]).then(a.cmp(&b)));
    let mut group_of = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        group_of[i] = (rank * groups) / n;
    }
    let mut counts = vec![0usize; groups];
    let mut iste_sum = vec![0.0; groups];
    for i in 0..n {
        counts[group_of[i]] += 1;
        iste_sum[group_of[i]] += points[i];
    }

    let mut out = String::from("covariate,group,mean_covariate,mean_iste\n");
    for (v, name) in data.covariate_names().iter().enumerate() {
        let mut x_sum = vec![0.0; groups];
        for (i, r) in data.records().iter().enumerate() {
            x_sum[group_of[i]] += r.x[v];
        }
        for g in 0..groups {
            out.push_str(&format!(
                "{name},{},{},{}\n",
                g + 1,
                x_sum[g] / counts[g] as f64,
                iste_sum[g] / counts[g] as f64
            ));
        }
    }
    out
}

fn iste_csv(result: &IsteResult, intervals: &Option<Vec<(f64, f64)>>) -> String {
    let mut out = String::from("subject,omega,lower95,upper95,theta0,theta1,capped\n");
    for (i, s) in result.subjects.iter().enumerate() {
        let (lo, hi) = match intervals {
            Some(ints) => (ints[i].0.to_string(), ints[i].1.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{lo},{hi},{},{},{}\n",
            i + 1,
            s.omega,
            s.theta0,
            s.theta1,
            u8::from(s.capped0 || s.capped1)
        ));
    }
    out
}

/// Runs the two-stage analysis on `data_path` and writes all artifacts.
pub fn run_case_study(
    data_path: &Path,
    mapping: &ColumnMapping,
    opts: &CaseStudyOptions,
    out: &Path,
) -> Result<CaseStudySummary> {
    let data = load_case_data(data_path, mapping)?;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::config(format!("mkdir {}: {e}", out.display())))?;
    let grid = make_grid(&data.times(), opts.grid_points)?;
    let spec = match &opts.spec_overrides {
        Some(s) => {
            let mut s = s.clone();
            s.method = opts.method;
            s.seed = opts.seed;
            s
        }
        None => LearnerSpec::new(opts.method, opts.seed),
    };

    let result = estimate_iste(&data, &spec, &grid, PointSummary::DrawMean)?;
    let points = result.points();

    // Uncertainty of the per-subject effects: posterior draws when the
    // method has them, otherwise subsample replicates when requested.
    let (draws, intervals): (Vec<Vec<f64>>, Option<Vec<(f64, f64)>>) =
        if result.draws.is_some() {
            (result.draw_matrix()?.to_vec(), Some(result.intervals(0.95)?))
        } else if opts.subsample_reps > 0 {
            let mat = iste_subsample(
                &data,
                &spec,
                &grid,
                opts.subsample_reps,
                opts.subsample_fraction,
            )?;
            let ints = mat
                .iter()
                .zip(&points)
                .map(|(row, &p)| {
                    Ok((quantile(row, 0.025)?.min(p), quantile(row, 0.975)?.max(p)))
                })
                .collect::<Result<Vec<_>>>()?;
            (mat, Some(ints))
        } else {
            (points.iter().map(|&p| vec![p]).collect(), None)
        };

    let rows: Vec<Vec<f64>> = data.records().iter().map(|r| r.x.clone()).collect();
    let names = data.covariate_names().to_vec();
    let regression = second_stage_linear(&draws, &rows, &names)?;
    let tree = fit_the_fit(&points, &rows, &opts.stepwise)?;
    let effects = node_effects(&tree, &draws)?;

    let ps = fit_propensity(&data, &PropensityConfig::default(), derive_seed(opts.seed, &[0xCA5E]))?;
    let mut e0 = Vec::new();
    let mut e1 = Vec::new();
    for r in data.records() {
        let e = ps.predict(&r.x);
        if r.z == 1 {
            e1.push(e);
        } else {
            e0.push(e);
        }
    }

    let mut files = Vec::new();
    let emit = |name: &str, text: String| -> Result<PathBuf> {
        let path = out.join(name);
        write_bytes_atomic(&path, text.as_bytes())?;
        Ok(path)
    };
    files.push(emit("iste.csv", iste_csv(&result, &intervals))?);
    files.push(emit("regression.csv", regression_csv(&regression))?);
    files.push(emit("tree.txt", tree_text(&tree, &names))?);
    files.push(emit("subgroup_scatter.csv", scatter_csv(&points, &data))?);
    files.push(emit(
        "overlap.svg",
        svg_overlap_histogram("Estimated propensity by arm", &e0, &e1)?,
    )?);

    let tree_path = out.join("tree.json");
    write_json_atomic(&tree_path, &tree_json(&tree, &names, &effects))?;
    files.push(tree_path);

    let summary_path = out.join("summary.json");
    write_json_atomic(
        &summary_path,
        &json!({
            "method": opts.method.to_string(),
            "n": data.n(),
            "p": data.p(),
            "mean_effect": mean(&points),
            "tree_r2": tree.r2,
            "selected": tree.selected.iter()
                .map(|&v| names[v].clone()).collect::<Vec<String>>(),
            "dropped_covariates": regression.dropped,
            "has_intervals": intervals.is_some(),
        }),
    )?;
    files.push(summary_path);

    Ok(CaseStudySummary { points, intervals, regression, tree, effects, files })
}
