//! Orchestration: configs, manifests, benchmark execution, case-study
//! pipelines, and SVG reporting.

pub mod casestudy;
pub mod config;
pub mod manifest;
pub mod plots;
pub mod runner;

pub use casestudy::{run_case_study, CaseStudyOptions, CaseStudySummary, ColumnMapping};
pub use config::{BenchmarkConfig, ScenarioSpec};
pub use manifest::RunManifest;
pub use plots::emit_plots;
pub use runner::{aggregate, run_benchmark, run_simulate, RunOptions};
