//! Command-line harness: simulation benchmarks, figure rendering, and
//! case-study analysis of user-supplied survival data.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use survhte::harness::{
    emit_plots, run_benchmark, run_case_study, run_simulate, BenchmarkConfig, CaseStudyOptions,
    ColumnMapping, RunOptions,
};
use survhte::learners::Method;

#[derive(Parser)]
#[command(
    name = "survhte",
    version,
    about = "Individual survival treatment effects from right-censored data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a benchmark grid: fit every method on every scenario replication
    /// and aggregate precision, bias, regret, and coverage tables.
    Benchmark(BenchmarkArgs),
    /// Write simulated scenario datasets together with their ground truth.
    Simulate(SimulateArgs),
    /// Render SVG figures for a completed benchmark results directory.
    Plots(PlotsArgs),
    /// Estimate individual treatment effects on a user-supplied CSV dataset.
    CaseStudy(CaseStudyArgs),
}

/// Where the benchmark configuration comes from: a TOML file or a preset.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Benchmark configuration TOML file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in configuration: "desk" (quick single scenario) or
    /// "paper-lite" (all methods, one moderate scenario)
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

impl Source {
    fn load(&self, seed: Option<u64>) -> anyhow::Result<BenchmarkConfig> {
        let config = match (&self.config, &self.preset) {
            (Some(path), None) => {
                let mut config = BenchmarkConfig::from_path(path)
                    .with_context(|| format!("loading {}", path.display()))?;
                if let Some(s) = seed {
                    config.master_seed = s;
                }
                config
            }
            (None, Some(name)) => BenchmarkConfig::preset(name, seed.unwrap_or(1))?,
            _ => unreachable!("clap enforces exactly one source"),
        };
        Ok(config)
    }
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    source: Source,
    /// Master seed; overrides the configuration value
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every available core
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Results directory
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Reuse completed replication shards from an identical earlier run
    #[arg(long)]
    resume: bool,
    /// Render SVG figures once aggregation finishes
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    /// Master seed; overrides the configuration value
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for data and truth CSV files
    #[arg(long, default_value = "simdata")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotsArgs {
    /// Completed benchmark results directory
    #[arg(long, default_value = "results")]
    results: PathBuf,
}

#[derive(Args)]
struct CaseStudyArgs {
    /// Input CSV with one row per subject
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Column holding the observed follow-up time
    #[arg(long, default_value = "time")]
    time: String,
    /// Column holding the event indicator (1 event, 0 censored)
    #[arg(long, default_value = "event")]
    event: String,
    /// Column holding the treatment indicator (1 treated, 0 control)
    #[arg(long, default_value = "treat")]
    treat: String,
    /// Covariate columns, comma separated; defaults to every other column
    #[arg(long, value_delimiter = ',')]
    covars: Vec<String>,
    /// Survival learner fit to each arm
    #[arg(long, default_value = "aft_bart_gauss")]
    method: Method,
    #[arg(long, default_value_t = 20200516)]
    seed: u64,
    /// Time grid resolution for survival curves
    #[arg(long, default_value_t = 500)]
    grid_points: usize,
    /// Subsample refits for frequentist interval estimates; 0 skips them
    #[arg(long, default_value_t = 0)]
    subsample_reps: usize,
    /// Fraction of subjects per subsample refit
    #[arg(long, default_value_t = 0.2)]
    subsample_fraction: f64,
    /// Output directory for tables and figures
    #[arg(long, default_value = "casestudy")]
    out: PathBuf,
}

fn header_columns(path: &Path) -> anyhow::Result<Vec<String>> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut line = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut line)
        .with_context(|| format!("cannot read header of {}", path.display()))?;
    Ok(line
        .trim_end()
        .trim_start_matches('\u{feff}')
        .split(',')
        .map(|s| s.trim().trim_matches('"').to_string())
        .collect())
}

fn cmd_benchmark(args: BenchmarkArgs) -> anyhow::Result<()> {
    let config = args.source.load(args.seed)?;
    let reps: usize = config.scenarios.iter().map(|s| s.reps).sum();
    println!(
        "benchmark: {} scenario(s), {} method(s), {} replication(s) total",
        config.scenarios.len(),
        config.methods.len(),
        reps
    );
    let opts = RunOptions { threads: args.threads, resume: args.resume };
    let out = run_benchmark(&config, &args.out, &opts)?;
    println!("results written to {}", out.display());
    println!("  combined table: {}", out.join("results.csv").display());
    if args.plots {
        let figures = emit_plots(&out)?;
        println!("  {} figure(s) under {}", figures.len(), out.join("plots").display());
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let config = args.source.load(args.seed)?;
    let files = run_simulate(&config, &args.out)?;
    println!("wrote {} file(s) under {}", files.len(), args.out.display());
    Ok(())
}

fn cmd_plots(args: PlotsArgs) -> anyhow::Result<()> {
    let figures = emit_plots(&args.results)?;
    for path in &figures {
        println!("{}", path.display());
    }
    println!("{} figure(s) rendered", figures.len());
    Ok(())
}

fn cmd_case_study(args: CaseStudyArgs) -> anyhow::Result<()> {
    let covariates = if args.covars.is_empty() {
        let reserved = [&args.time, &args.event, &args.treat];
        let derived: Vec<String> = header_columns(&args.data)?
            .into_iter()
            .filter(|c| !reserved.iter().any(|r| *r == c))
            .collect();
        if derived.is_empty() {
            bail!("no covariate columns left after removing time/event/treatment");
        }
        derived
    } else {
        args.covars
    };
    let mapping = ColumnMapping {
        time: args.time,
        event: args.event,
        treatment: args.treat,
        covariates,
    };
    let mut opts = CaseStudyOptions::new(args.method, args.seed);
    opts.grid_points = args.grid_points;
    opts.subsample_reps = args.subsample_reps;
    opts.subsample_fraction = args.subsample_fraction;

    let summary = run_case_study(&args.data, &mapping, &opts, &args.out)?;
    let n = summary.points.len();
    let mean = summary.points.iter().sum::<f64>() / n.max(1) as f64;
    let positive = summary.points.iter().filter(|v| **v > 0.0).count();
    println!("{n} subjects; mean effect {mean:.3}; {positive} with a positive estimate");
    for path in &summary.files {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Benchmark(args) => cmd_benchmark(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Plots(args) => cmd_plots(args),
        Cmd::CaseStudy(args) => cmd_case_study(args),
    }
}
