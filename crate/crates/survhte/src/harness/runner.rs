//! Benchmark execution: replication shards, aggregation, and resume.
//!
//! Work is sharded per (scenario, replication). A shard holds every method's
//! per-subject effect estimates for one simulated dataset, keyed by a seed
//! stream independent of the replication count, so partial runs resume and
//! thread counts cannot change any number. All file writes funnel through a
//! single writer thread and land via atomic rename.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{method_stream_id, BenchmarkConfig, ScenarioSpec};
use crate::harness::manifest::{
    manifest_path, read_json, rep_data_seed, unix_now, write_bytes_atomic, write_json_atomic,
    RunManifest,
};
use crate::iste::{estimate_iste, IsteResult, PointSummary};
use crate::learners::Method;
use crate::metrics::{
    coverage_by_subclass, pct_increase_pehe, pehe, regret_by_subclass, relbias_by_subclass,
    rmse_by_subclass, subclass_assign, MetricsTable, RepEffects, RepIntervals, SubclassIndex,
};
use crate::numeric::{mean, sd};
use crate::rng::derive_seed;
use crate::simgen::{simulate, true_median, write_data_csv, write_truth_csv, SimOutput};
use crate::survcore::make_grid;

/// Seed-stream word for learner fits.
const METHOD_STREAM: u64 = 0x3E7;

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Worker threads; 0 keeps the global default.
    pub threads: usize,
    /// Reuse existing valid shards instead of recomputing them.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { threads: 0, resume: false }
    }
}

/// One method's results on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodShard {
    pub est: Vec<f64>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    /// Subjects whose effect touched the time-grid cap on either arm.
    pub capped: usize,
    pub error: Option<String>,
}

/// Everything recorded for one (scenario, replication) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepShard {
    pub scenario: String,
    pub family_key: String,
    pub rep: usize,
    pub data_seed: u64,
    pub n: usize,
    pub grid_max: f64,
    pub grid_step: f64,
    pub e_true: Vec<f64>,
    /// Closed-form true effects.
    pub truth_raw: Vec<f64>,
    /// True arm medians read through the same grid cap as the estimates.
    pub truth_capped: Vec<f64>,
    pub methods: BTreeMap<String, MethodShard>,
}

pub fn shard_path(out: &Path, label: &str, rep: usize) -> PathBuf {
    out.join("shards").join(label).join(format!("rep_{rep:05}.json"))
}

fn method_seed(master: u64, family_key: u64, rep: usize, method: Method) -> u64 {
    derive_seed(master, &[METHOD_STREAM, family_key, rep as u64, method_stream_id(method)])
}

/// Simulates the replication and evaluates `needed` methods on it.
///
/// Learner errors are recorded in the shard, not raised: one method failing
/// must not disturb any other method's numbers.
fn compute_rep(
    config: &BenchmarkConfig,
    scenario: &ScenarioSpec,
    rep: usize,
    needed: &[Method],
    existing: Option<RepShard>,
) -> Result<RepShard> {
    let family_key = scenario.family_key();
    let data_seed = rep_data_seed(config.master_seed, family_key, rep);
    let sim: SimOutput = simulate(&scenario.to_scenario_config(data_seed))?;
    let grid = make_grid(&sim.data.times(), config.grid_points)?;
    let gmax = grid.max_time();

    let e_true: Vec<f64> = sim.truth.iter().map(|r| r.e_true).collect();
    let truth_raw: Vec<f64> = sim.truth.iter().map(|r| r.iste_true).collect();
    let truth_capped: Vec<f64> = sim
        .truth
        .iter()
        .map(|r| {
            let t0 = true_median(&sim.params, 0, &r.x).min(gmax);
            let t1 = true_median(&sim.params, 1, &r.x).min(gmax);
            t1 - t0
        })
        .collect();

    let mut methods = existing.map(|s| s.methods).unwrap_or_default();
    for &method in needed {
        if methods.contains_key(method.as_str()) {
            continue;
        }
        let spec = config.learner_spec(method, method_seed(config.master_seed, family_key, rep, method));
        let shard = match estimate_iste(&sim.data, &spec, &grid, PointSummary::DrawMean) {
            Ok(result) => method_shard(&result),
            Err(e) => MethodShard {
                est: Vec::new(),
                lo: None,
                hi: None,
                capped: 0,
                error: Some(e.to_string()),
            },
        };
        methods.insert(method.as_str().to_string(), shard);
    }

    Ok(RepShard {
        scenario: scenario.label(),
        family_key: format!("{family_key:016x}"),
        rep,
        data_seed,
        n: sim.data.n(),
        grid_max: gmax,
        grid_step: grid.step(),
        e_true,
        truth_raw,
        truth_capped,
        methods,
    })
}

fn method_shard(result: &IsteResult) -> MethodShard {
    let (lo, hi) = match result.intervals(0.95) {
        Ok(ints) => {
            let (lo, hi): (Vec<f64>, Vec<f64>) = ints.into_iter().unzip();
            (Some(lo), Some(hi))
        }
        Err(_) => (None, None),
    };
    MethodShard {
        est: result.points(),
        lo,
        hi,
        capped: result.subjects.iter().filter(|s| s.capped0 || s.capped1).count(),
        error: None,
    }
}

/// True when the shard already carries results for every requested method.
fn shard_complete(shard: &RepShard, methods: &[Method]) -> bool {
    methods.iter().all(|m| shard.methods.contains_key(m.as_str()))
}

/// Runs the full scenario grid and writes shards, metrics, and the manifest.
///
/// Identical configurations produce byte-identical metric CSVs regardless of
/// the worker thread count or any resume history.
pub fn run_benchmark(config: &BenchmarkConfig, out: &Path, opts: &RunOptions) -> Result<PathBuf> {
    config.validate()?;
    let mut manifest = RunManifest::new(config)?;
    let existing: Option<RunManifest> = read_json(&manifest_path(out)).ok();
    if let Some(old) = existing {
        if !manifest.same_run(&old) {
            return Err(Error::config(
                "results directory holds a different run; pick a fresh --out".to_string(),
            ));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::config(format!("mkdir {}: {e}", out.display())))?;
    write_json_atomic(&manifest_path(out), &manifest)?;

    let tasks: Vec<(usize, usize)> = config
        .scenarios
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.reps).map(move |r| (si, r)))
        .collect();

    let (tx, rx) = mpsc::channel::<(PathBuf, Vec<u8>)>();
    let writer = std::thread::spawn(move || -> Result<()> {
        for (path, bytes) in rx {
            write_bytes_atomic(&path, &bytes)?;
        }
        Ok(())
    });

    let work = |tx: &mut mpsc::Sender<(PathBuf, Vec<u8>)>, (si, rep): (usize, usize)| -> Result<()> {
        let scenario = &config.scenarios[si];
        let path = shard_path(out, &scenario.label(), rep);
        let existing: Option<RepShard> = if opts.resume { read_json(&path).ok() } else { None };
        if let Some(shard) = &existing {
            if shard.data_seed == rep_data_seed(config.master_seed, scenario.family_key(), rep)
                && shard_complete(shard, &config.methods)
            {
                return Ok(());
            }
        }
        let shard = compute_rep(config, scenario, rep, &config.methods, existing)?;
        let bytes = serde_json::to_vec_pretty(&shard)
            .map_err(|e| Error::config(format!("shard encode: {e}")))?;
        tx.send((path, bytes)).map_err(|_| Error::config("writer stopped early".to_string()))?;
        Ok(())
    };

    let run_result: Result<()> = if opts.threads == 0 {
        tasks.par_iter().copied().map_with(tx.clone(), |tx, task| work(tx, task)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| {
            tasks.par_iter().copied().map_with(tx.clone(), |tx, task| work(tx, task)).collect()
        })
    };
    drop(tx);
    let writer_result = writer.join().map_err(|_| Error::config("writer thread panicked".to_string()))?;
    run_result?;
    writer_result?;

    aggregate(config, out)?;
    manifest.finished_unix = Some(unix_now());
    write_json_atomic(&manifest_path(out), &manifest)?;
    Ok(out.to_path_buf())
}

struct ScenarioMetrics {
    tables: Vec<MetricsTable>,
    /// (method, rep, pehe, pct_increase) rows for successful replications.
    rep_rows: Vec<(String, usize, f64, Option<f64>)>,
}

/// Builds the per-scenario metric tables from completed shards.
fn scenario_metrics(
    config: &BenchmarkConfig,
    label: &str,
    shards: &[RepShard],
) -> Result<ScenarioMetrics> {
    let k = config.k_subclasses;
    let subclasses: Vec<SubclassIndex> =
        shards.iter().map(|s| subclass_assign(&s.e_true, k)).collect::<Result<_>>()?;

    let mut pehe_per_rep: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for (r, shard) in shards.iter().enumerate() {
        for method in &config.methods {
            let ms = shard.methods.get(method.as_str()).ok_or_else(|| {
                Error::config(format!(
                    "shard {label}/rep_{r:05} lacks {method}; rerun with --resume"
                ))
            })?;
            if ms.error.is_none() {
                pehe_per_rep
                    .entry(method.as_str())
                    .or_default()
                    .push((r, pehe(&ms.est, &shard.truth_capped)?));
            }
        }
    }

    // Percent increase is a within-replication comparison across whichever
    // methods succeeded there; it needs at least two to compare.
    let mut pct: BTreeMap<(&str, usize), f64> = BTreeMap::new();
    for (r, _) in shards.iter().enumerate() {
        let present: Vec<(&str, f64)> = config
            .methods
            .iter()
            .filter_map(|m| {
                pehe_per_rep
                    .get(m.as_str())
                    .and_then(|rows| rows.iter().find(|(rr, _)| *rr == r))
                    .map(|(_, p)| (m.as_str(), *p))
            })
            .collect();
        if present.len() < 2 {
            continue;
        }
        let values: Vec<f64> = present.iter().map(|(_, p)| *p).collect();
        for ((name, _), v) in present.iter().zip(pct_increase_pehe(&values)?) {
            pct.insert((name, r), v);
        }
    }

    let mut tables = Vec::new();
    let mut rep_rows = Vec::new();
    for method in &config.methods {
        let name = method.as_str();
        let rows = pehe_per_rep.get(name).cloned().unwrap_or_default();
        let ok_reps: Vec<usize> = rows.iter().map(|(r, _)| *r).collect();
        let pehes: Vec<f64> = rows.iter().map(|(_, p)| *p).collect();

        let effects: Vec<RepEffects> = ok_reps
            .iter()
            .map(|&r| RepEffects {
                est: &shards[r].methods[name].est,
                truth: &shards[r].truth_capped,
                subclass: &subclasses[r],
            })
            .collect();
        let (relbias, rmse, regret) = if effects.is_empty() {
            (vec![None; k], vec![f64::NAN; k], vec![f64::NAN; k])
        } else {
            (
                relbias_by_subclass(&effects)?,
                rmse_by_subclass(&effects)?,
                regret_by_subclass(&effects)?,
            )
        };

        let coverage = if method.is_bayesian() && !ok_reps.is_empty() {
            let ints: Vec<RepIntervals> = ok_reps
                .iter()
                .filter(|&&r| shards[r].methods[name].lo.is_some())
                .map(|&r| {
                    let ms = &shards[r].methods[name];
                    RepIntervals {
                        lo: ms.lo.as_deref().expect("filtered on lo"),
                        hi: ms.hi.as_deref().expect("bayesian shard lacks hi"),
                        truth: &shards[r].truth_capped,
                        subclass: &subclasses[r],
                    }
                })
                .collect();
            if ints.is_empty() { None } else { Some(coverage_by_subclass(&ints)?) }
        } else {
            None
        };

        let pct_vals: Vec<f64> =
            ok_reps.iter().filter_map(|&r| pct.get(&(name, r)).copied()).collect();
        for (&r, &p) in ok_reps.iter().zip(&pehes) {
            rep_rows.push((name.to_string(), r, p, pct.get(&(name, r)).copied()));
        }

        tables.push(MetricsTable {
            scenario: label.to_string(),
            method: name.to_string(),
            pehe_mean: if pehes.is_empty() { f64::NAN } else { mean(&pehes) },
            pehe_sd: if pehes.len() < 2 { f64::NAN } else { sd(&pehes) },
            relbias,
            rmse,
            regret,
            coverage,
            pct_increase: pct_vals,
            failed_reps: shards.len() - ok_reps.len(),
        });
    }
    Ok(ScenarioMetrics { tables, rep_rows })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// Long-format CSV rows: per method one overall PEHE row, then the four
/// subclass metric families over all K subclasses.
fn metrics_csv(tables: &[MetricsTable], k: usize) -> String {
    let mut out = String::from("scenario,method,metric,subclass,value\n");
    for t in tables {
        out.push_str(&format!("{},{},pehe_mean,,{}\n", t.scenario, t.method, fmt(t.pehe_mean)));
        for j in 0..k {
            let v = t.relbias[j].map(fmt).unwrap_or_default();
            out.push_str(&format!("{},{},relbias,{},{}\n", t.scenario, t.method, j + 1, v));
        }
        for j in 0..k {
            out.push_str(&format!("{},{},rmse,{},{}\n", t.scenario, t.method, j + 1, fmt(t.rmse[j])));
        }
        for j in 0..k {
            out.push_str(&format!(
                "{},{},regret,{},{}\n",
                t.scenario,
                t.method,
                j + 1,
                fmt(t.regret[j])
            ));
        }
        for j in 0..k {
            let v = t.coverage.as_ref().map(|c| fmt(c[j])).unwrap_or_default();
            out.push_str(&format!("{},{},coverage,{},{}\n", t.scenario, t.method, j + 1, v));
        }
    }
    out
}

fn reps_csv(label: &str, rows: &[(String, usize, f64, Option<f64>)]) -> String {
    let mut out = String::from("scenario,method,rep,pehe,pct_increase\n");
    for (method, rep, pehe, pct) in rows {
        out.push_str(&format!(
            "{label},{method},{rep},{},{}\n",
            fmt(*pehe),
            pct.map(fmt).unwrap_or_default()
        ));
    }
    out
}

/// Reads every shard back and emits metric JSON/CSV per scenario plus the
/// combined results table.
pub fn aggregate(config: &BenchmarkConfig, out: &Path) -> Result<()> {
    let metrics_dir = out.join("metrics");
    let mut combined = String::from("scenario,method,metric,subclass,value\n");
    for scenario in &config.scenarios {
        let label = scenario.label();
        let shards: Vec<RepShard> = (0..scenario.reps)
            .map(|r| {
                let path = shard_path(out, &label, r);
                let shard: RepShard = read_json(&path)?;
                if !shard_complete(&shard, &config.methods) {
                    return Err(Error::config(format!(
                        "incomplete shard {}; rerun with --resume",
                        path.display()
                    )));
                }
                Ok(shard)
            })
            .collect::<Result<_>>()?;
        let sm = scenario_metrics(config, &label, &shards)?;
        write_json_atomic(&metrics_dir.join(format!("{label}.json")), &sm.tables)?;
        let csv = metrics_csv(&sm.tables, config.k_subclasses);
        write_bytes_atomic(&metrics_dir.join(format!("{label}.csv")), csv.as_bytes())?;
        write_bytes_atomic(
            &metrics_dir.join(format!("{label}_reps.csv")),
            reps_csv(&label, &sm.rep_rows).as_bytes(),
        )?;
        combined.push_str(csv.split_once('\n').map(|(_, body)| body).unwrap_or(""));
    }
    write_bytes_atomic(&out.join("results.csv"), combined.as_bytes())?;
    Ok(())
}

/// Writes each scenario replication's analysis view and ground truth as CSV.
pub fn run_simulate(config: &BenchmarkConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let mut written = Vec::new();
    for scenario in &config.scenarios {
        let label = scenario.label();
        let dir = out.join(&label);
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::config(format!("mkdir {}: {e}", dir.display())))?;
        for rep in 0..scenario.reps {
            let seed = rep_data_seed(config.master_seed, scenario.family_key(), rep);
            let sim = simulate(&scenario.to_scenario_config(seed))?;
            let data_path = dir.join(format!("rep_{rep:04}_data.csv"));
            let truth_path = dir.join(format!("rep_{rep:04}_truth.csv"));
            write_data_csv(&data_path, &sim.data)?;
            write_truth_csv(&truth_path, &sim.truth)?;
            written.push(data_path);
            written.push(truth_path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config(methods: &str) -> BenchmarkConfig {
        BenchmarkConfig::from_toml_str(&format!(
            r#"
master_seed = 11
k_subclasses = 10
grid_points = 200
methods = {methods}

[[scenarios]]
n = 120
hs = "h1"
psi = 1.0
ph = true
censoring = {{ independent = {{ rate = 0.007 }} }}
reps = 3
"#
        ))
        .unwrap()
    }

    fn read(path: &Path) -> String {
        std::fs::read_to_string(path).unwrap()
    }

    #[test]
    fn benchmark_runs_and_emits_the_full_table_shape() {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(r#"["aft_lognormal", "cox_ph"]"#);
        run_benchmark(&config, dir.path(), &RunOptions::default()).unwrap();

        let label = config.scenarios[0].label();
        let csv = read(&dir.path().join("metrics").join(format!("{label}.csv")));
        let rows = csv.lines().count() - 1;
        assert_eq!(rows, 2 * (1 + 4 * 10), "2 methods x (1 + 4K) rows");
        let manifest: RunManifest = read_json(&manifest_path(dir.path())).unwrap();
        assert_eq!(manifest.scenarios[0].rep_seeds.len(), 3);
        assert!(manifest.finished_unix.is_some());

        let tables: Vec<MetricsTable> =
            read_json(&dir.path().join("metrics").join(format!("{label}.json"))).unwrap();
        assert_eq!(tables.len(), 2);
        for t in &tables {
            assert!(t.pehe_mean.is_finite() && t.pehe_mean > 0.0);
            assert_eq!(t.failed_reps, 0);
            assert_eq!(t.pct_increase.len(), 3);
        }
    }

    #[test]
    fn reruns_and_thread_counts_leave_the_csv_bytes_unchanged() {
        let config = micro_config(r#"["aft_lognormal", "cox_ph"]"#);
        let label = config.scenarios[0].label();

        let a = tempfile::tempdir().unwrap();
        run_benchmark(&config, a.path(), &RunOptions { threads: 1, resume: false }).unwrap();
        let first = read(&a.path().join("results.csv"));
        run_benchmark(&config, a.path(), &RunOptions { threads: 1, resume: false }).unwrap();
        assert_eq!(first, read(&a.path().join("results.csv")), "rerun changed bytes");

        let b = tempfile::tempdir().unwrap();
        run_benchmark(&config, b.path(), &RunOptions { threads: 4, resume: false }).unwrap();
        assert_eq!(first, read(&b.path().join("results.csv")), "threads changed bytes");
        assert_eq!(
            read(&a.path().join("metrics").join(format!("{label}.csv"))),
            read(&b.path().join("metrics").join(format!("{label}.csv")))
        );
    }

    #[test]
    fn interrupting_and_resuming_matches_the_uninterrupted_run() {
        let full = micro_config(r#"["aft_lognormal", "cox_ph"]"#);
        let mut partial = full.clone();
        partial.scenarios[0].reps = 1;

        let resumed = tempfile::tempdir().unwrap();
        run_benchmark(&partial, resumed.path(), &RunOptions::default()).unwrap();
        // The first shard survives; only reps 1..3 are computed on resume.
        let before = read(&shard_path(resumed.path(), &full.scenarios[0].label(), 0));
        std::fs::remove_file(manifest_path(resumed.path())).unwrap();
        run_benchmark(&full, resumed.path(), &RunOptions { threads: 0, resume: true }).unwrap();
        assert_eq!(before, read(&shard_path(resumed.path(), &full.scenarios[0].label(), 0)));

        let fresh = tempfile::tempdir().unwrap();
        run_benchmark(&full, fresh.path(), &RunOptions::default()).unwrap();
        assert_eq!(read(&fresh.path().join("results.csv")), read(&resumed.path().join("results.csv")));
    }

    #[test]
    fn a_failing_method_is_isolated_and_counted() {
        let with_failing = micro_config(r#"["cox_ph", "failing"]"#);
        let alone = micro_config(r#"["cox_ph"]"#);
        let label = with_failing.scenarios[0].label();

        let a = tempfile::tempdir().unwrap();
        run_benchmark(&with_failing, a.path(), &RunOptions::default()).unwrap();
        let tables: Vec<MetricsTable> =
            read_json(&a.path().join("metrics").join(format!("{label}.json"))).unwrap();
        let failing = tables.iter().find(|t| t.method == "failing").unwrap();
        assert_eq!(failing.failed_reps, 3);
        assert!(failing.pehe_mean.is_nan());
        assert!(failing.pct_increase.is_empty());

        let b = tempfile::tempdir().unwrap();
        run_benchmark(&alone, b.path(), &RunOptions::default()).unwrap();
        let solo: Vec<MetricsTable> =
            read_json(&b.path().join("metrics").join(format!("{label}.json"))).unwrap();
        let cox_with = tables.iter().find(|t| t.method == "cox_ph").unwrap();
        let cox_solo = solo.iter().find(|t| t.method == "cox_ph").unwrap();
        assert_eq!(cox_with.pehe_mean, cox_solo.pehe_mean, "failure leaked into cox numbers");
        assert_eq!(cox_with.rmse, cox_solo.rmse);
    }

    #[test]
    fn mismatched_output_directories_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(r#"["aft_lognormal"]"#);
        run_benchmark(&config, dir.path(), &RunOptions::default()).unwrap();
        let mut other = config.clone();
        other.master_seed = 99;
        let err = run_benchmark(&other, dir.path(), &RunOptions::default()).unwrap_err();
        assert!(format!("{err}").contains("different run"));
    }

    #[test]
    fn simulate_writes_round_trippable_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = micro_config(r#"["cox_ph"]"#);
        config.scenarios[0].reps = 2;
        let files = run_simulate(&config, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            assert!(f.exists());
        }
        let text = read(&files[0]);
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("x1,") && header.ends_with("z,y,delta"));
        assert_eq!(lines.count(), 120);
    }
}
