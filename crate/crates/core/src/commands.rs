//! The `analyze`, `simulate` and `validate` commands. Each validates its
//! configuration and computes every result before creating the output
//! directory, so a failed run leaves no partial artifacts.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, SecondStageConfig, Subcommand, Thresholds};
use crate::dataset::{load_cohort, write_cohort, LoadReport};
use crate::output::{band_file_name, fmt_num, read_truth, write_band, write_json, write_truth, write_validation, ValidationRow};
use crate::pipeline::{analyze, analyze_strata, AnalysisSettings, StratumAnalysis};
use crate::pseudo::PseudoVariant;
use crate::second_stage::GridSpec;
use crate::simulate::{generate, true_cate, true_trial_cate, CovariateLaw, DgpSpec};
use crate::stats::{mean, sample_variance};
use crate::{Error, Result};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    /// False when a `validate` threshold failed.
    pub passed: bool,
}

fn out_dir(cfg: &RunConfig) -> &Path {
    cfg.out.as_deref().expect("validated")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn resolved(cfg: &RunConfig, command: Subcommand) -> RunConfig {
    RunConfig { replicates: Some(cfg.replicates_for(command)), ..cfg.clone() }
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate(Subcommand::Analyze)?;
    let input = cfg.input.as_deref().expect("validated");
    let schema = cfg.schema.clone().expect("validated");
    if let Some(col) = &cfg.stratify_by {
        if let Some(cov) = &schema.covariates {
            if !cov.contains(col) {
                return Err(Error::Config(format!("stratification column `{col}` is not a listed covariate")));
            }
        }
    }
    let file = File::open(input).map_err(|e| Error::Config(format!("cannot open input {}: {e}", input.display())))?;
    let (ds, load) = load_cohort(file, &schema)?;
    let settings = AnalysisSettings::from_config(cfg, Subcommand::Analyze);
    let strata = analyze_strata(&ds, &settings, cfg.stratify_by.as_deref())?;

    let dir = out_dir(cfg);
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut band_files = Vec::new();
    for stratum in &strata {
        let label = stratum.stratum.as_ref().map(|s| (s.column.as_str(), s.value));
        for m in &stratum.modifiers {
            let name = band_file_name(&m.modifier, label);
            let path = dir.join(&name);
            write_band(&m.band, create(&path)?)?;
            band_files.push(name);
            files.push(path);
        }
    }
    let manifest = dir.join("manifest.json");
    write_json(&manifest, &analyze_manifest(cfg, input, &load, &strata, &band_files))?;
    files.push(manifest);
    let summary = dir.join("summary.txt");
    std::fs::write(&summary, analyze_summary(&strata, &load))?;
    files.push(summary);
    Ok(RunOutcome { files, passed: true })
}

fn analyze_manifest(
    cfg: &RunConfig,
    input: &Path,
    load: &LoadReport,
    strata: &[StratumAnalysis],
    band_files: &[String],
) -> serde_json::Value {
    let mut files = band_files.iter();
    let strata_json: Vec<serde_json::Value> = strata
        .iter()
        .map(|s| {
            let modifiers: Vec<serde_json::Value> = s
                .modifiers
                .iter()
                .map(|m| {
                    json!({
                        "modifier": m.modifier,
                        "file": files.next(),
                        "grid_points": m.band.grid.len(),
                        "n_used": m.n_used,
                        "basis": m.basis,
                        "coefficients": m.coefficients,
                        "se_mode": m.se_mode,
                        "se_failures": m.se_failures,
                        "critical_value": m.band.critical_value,
                        "z": m.band.z,
                        "band_contains_pointwise": m.band.band_contains_pointwise,
                        "redrawn_replicates": m.band.redrawn,
                        "clamped": m.clamped,
                        "warnings": m.warnings,
                    })
                })
                .collect();
            json!({
                "stratum": s.stratum,
                "n_rows": s.n_rows,
                "n_trial": s.n_trial,
                "n_treated": s.n_treated,
                "n_control": s.n_control,
                "variant": s.variant,
                "crossfit": s.crossfit,
                "truncation_count": s.truncation_count,
                "nuisance_converged": s.nuisance_converged,
                "diagnostics": s.diagnostics,
                "modifiers": modifiers,
            })
        })
        .collect();
    json!({
        "tool": TOOL,
        "version": VERSION,
        "command": "analyze",
        "seed": cfg.seed,
        "replicates": cfg.replicates_for(Subcommand::Analyze),
        "alpha": cfg.alpha,
        "input": input,
        "load": load,
        "config": resolved(cfg, Subcommand::Analyze),
        "strata": strata_json,
    })
}

fn analyze_summary(strata: &[StratumAnalysis], load: &LoadReport) -> String {
    let mut out = format!(
        "{TOOL} {VERSION}\nrows read {}, dropped {} (missing covariate) and {} (incomplete trial row)\n",
        load.rows_read, load.dropped_missing_covariate, load.dropped_incomplete_trial
    );
    for s in strata {
        out.push('\n');
        match &s.stratum {
            Some(st) => out.push_str(&format!("stratum {} = {}\n", st.column, fmt_num(st.value))),
            None => out.push_str("all rows\n"),
        }
        out.push_str(&format!(
            "  n = {} ({} trial: {} treated, {} control)\n  pseudo-outcome {}, cross-fit {}, {} probabilities truncated\n  nuisance fits {}\n",
            s.n_rows,
            s.n_trial,
            s.n_treated,
            s.n_control,
            s.variant.as_str(),
            if s.crossfit { "yes" } else { "no" },
            s.truncation_count,
            if s.nuisance_converged { "converged" } else { "did NOT all converge" },
        ));
        for m in &s.modifiers {
            let b = &m.band;
            let (lo, hi) = (b.grid[0], b.grid[b.grid.len() - 1]);
            let excludes_zero = (0..b.grid.len()).filter(|&i| b.band_low[i] > 0.0 || b.band_high[i] < 0.0).count();
            out.push_str(&format!(
                "  modifier {}: {} grid points on [{}, {}], estimate range [{}, {}]\n    {:.0}% uniform band critical value {} (z = {}), band excludes zero at {} points\n",
                m.modifier,
                b.grid.len(),
                fmt_num(lo),
                fmt_num(hi),
                fmt_num(b.estimate.iter().copied().fold(f64::INFINITY, f64::min)),
                fmt_num(b.estimate.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                100.0 * (1.0 - b.alpha),
                fmt_num(b.critical_value),
                fmt_num(b.z),
                excludes_zero,
            ));
            for w in &m.warnings {
                out.push_str(&format!("    warning: {w}\n"));
            }
        }
    }
    out
}

/// Grid for simulation outputs: configured bounds, falling back to the
/// modifier's support (mean -/+ 2 sd for normal laws). Subgroup second
/// stages use the support points of a discrete modifier.
pub fn simulation_grid(cfg: &RunConfig, dgp: &DgpSpec) -> Result<Vec<f64>> {
    let law = &dgp.covariates[dgp.modifier_index().expect("validated")].law;
    if cfg.second_stage == SecondStageConfig::Subgroup {
        return match law {
            CovariateLaw::Bernoulli { .. } => Ok(vec![0.0, 1.0]),
            CovariateLaw::Discrete { values, .. } => {
                let mut v = values.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                Ok(v)
            }
            _ => Err(Error::Config("subgroup second stage needs a discrete effect modifier".into())),
        };
    }
    let range = match law {
        CovariateLaw::Uniform { low, high } => (*low, *high),
        CovariateLaw::Normal { mean, sd } => (mean - 2.0 * sd, mean + 2.0 * sd),
        CovariateLaw::Bernoulli { .. } => (0.0, 1.0),
        CovariateLaw::Discrete { values, .. } => (
            values.iter().copied().fold(f64::INFINITY, f64::min),
            values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
    };
    Ok(cfg.grid.build(range)?)
}

fn grid_spec_for(grid: &[f64], cfg: &GridSpec) -> GridSpec {
    GridSpec { min: grid.first().copied(), max: grid.last().copied(), step: cfg.step }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate(Subcommand::Simulate)?;
    let dgp = cfg.simulate.as_ref().expect("validated").with_seed(cfg.seed);
    let grid = simulation_grid(cfg, &dgp)?;
    let ds = generate(&dgp)?;
    let truth = true_cate(&dgp, &grid)?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(dir)?;
    let data_path = dir.join("data.csv");
    write_cohort(&ds, create(&data_path)?)?;
    let truth_path = dir.join("truth.csv");
    write_truth(&grid, &truth, create(&truth_path)?)?;
    let manifest = dir.join("manifest.json");
    let (n_control, n_treated) = ds.arm_counts();
    write_json(
        &manifest,
        &json!({
            "tool": TOOL,
            "version": VERSION,
            "command": "simulate",
            "seed": cfg.seed,
            "n_rows": ds.n_rows(),
            "n_trial": ds.n_trial(),
            "n_treated": n_treated,
            "n_control": n_control,
            "config": resolved(cfg, Subcommand::Simulate),
        }),
    )?;
    Ok(RunOutcome { files: vec![data_path, truth_path, manifest], passed: true })
}

/// One Monte Carlo replicate of a validation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub pointwise_covers: Vec<bool>,
    pub band_covers: Vec<bool>,
    pub critical_value: f64,
}

impl ReplicateResult {
    pub fn band_covers_all(&self) -> bool {
        self.band_covers.iter().all(|&c| c)
    }
}

/// Generates replicate `r` of `dgp`, analyzes it, and compares with `truth`.
pub fn run_replicate(dgp: &DgpSpec, settings: &AnalysisSettings, truth: &[f64], r: u64) -> Result<ReplicateResult> {
    let rep = dgp.replicate(r);
    let ds = generate(&rep)?;
    let settings = AnalysisSettings { seed: rep.seed, ..settings.clone() };
    let result = analyze(&ds, &settings)?;
    let band = &result.modifiers[0].band;
    if band.grid.len() != truth.len() {
        return Err(Error::Config(format!(
            "replicate {r}: {} grid points estimated, {} truth values",
            band.grid.len(),
            truth.len()
        )));
    }
    let within = |lo: &[f64], hi: &[f64]| -> Vec<bool> {
        truth.iter().enumerate().map(|(i, t)| lo[i] <= *t && *t <= hi[i]).collect()
    };
    Ok(ReplicateResult {
        estimate: band.estimate.clone(),
        se: band.se.clone(),
        pointwise_covers: within(&band.pointwise_low, &band.pointwise_high),
        band_covers: within(&band.band_low, &band.band_high),
        critical_value: band.critical_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub runs: usize,
    pub failed_runs: usize,
    pub failures: Vec<String>,
    pub truth: &'static str,
    pub uniform_coverage: f64,
    pub worst_pointwise_coverage: f64,
    pub max_abs_bias: f64,
    pub mean_abs_bias: f64,
    pub max_rmse: f64,
    pub mean_critical_value: f64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Aggregates replicate results point by point.
pub fn summarize(grid: &[f64], truth: &[f64], results: &[ReplicateResult]) -> Vec<ValidationRow> {
    let share = |f: &dyn Fn(&ReplicateResult) -> bool| {
        results.iter().filter(|r| f(r)).count() as f64 / results.len() as f64
    };
    (0..grid.len())
        .map(|j| {
            let est: Vec<f64> = results.iter().map(|r| r.estimate[j]).collect();
            let errors: Vec<f64> = est.iter().map(|e| e - truth[j]).collect();
            ValidationRow {
                grid: grid[j],
                truth: truth[j],
                mean_estimate: mean(&est),
                bias: mean(&errors),
                rmse: (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt(),
                sd_estimate: if est.len() > 1 { sample_variance(&est).sqrt() } else { 0.0 },
                mean_se: mean(&results.iter().map(|r| r.se[j]).collect::<Vec<_>>()),
                pointwise_coverage: share(&|r| r.pointwise_covers[j]),
                band_coverage: share(&|r| r.band_covers[j]),
            }
        })
        .collect()
}

fn checks(thresholds: &Thresholds, s: &ValidationSummary) -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &str, value: f64, limit: Option<f64>, at_most: bool| {
        if let Some(limit) = limit {
            let passed = if at_most { value <= limit } else { value >= limit };
            out.push(Check { name: name.to_string(), value, limit, passed });
        }
    };
    push("max_abs_bias", s.max_abs_bias, thresholds.max_abs_bias, true);
    push("max_rmse", s.max_rmse, thresholds.max_rmse, true);
    push("uniform_coverage", s.uniform_coverage, thresholds.min_uniform_coverage, false);
    push("worst_pointwise_coverage", s.worst_pointwise_coverage, thresholds.min_pointwise_coverage, false);
    out
}

pub fn cmd_validate(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate(Subcommand::Validate)?;
    let dgp = cfg.simulate.as_ref().expect("validated").with_seed(cfg.seed);
    let grid = simulation_grid(cfg, &dgp)?;
    let trial_truth = cfg.variant == PseudoVariant::TrialOnly;
    let truth = match &cfg.validate.truth {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::Config(format!("cannot open truth file {}: {e}", path.display())))?;
            let (truth_grid, truth) = read_truth(file)?;
            let matches = truth_grid.len() == grid.len()
                && truth_grid.iter().zip(&grid).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            if !matches {
                return Err(Error::Config(format!(
                    "truth file grid ({} points) does not match the configured grid ({} points)",
                    truth_grid.len(),
                    grid.len()
                )));
            }
            truth
        }
        None if trial_truth => true_trial_cate(&dgp, &grid)?,
        None => true_cate(&dgp, &grid)?,
    };
    let mut settings = AnalysisSettings::from_config(cfg, Subcommand::Validate);
    settings.grid = grid_spec_for(&grid, &cfg.grid);

    let outcomes: Vec<Result<ReplicateResult>> = (0..cfg.validate.runs as u64)
        .into_par_iter()
        .map(|r| run_replicate(&dgp, &settings, &truth, r))
        .collect();
    let mut failures = Vec::new();
    let mut results = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(res) => results.push(res),
            Err(e) => failures.push(format!("replicate {r}: {e}")),
        }
    }
    if results.is_empty() {
        return Err(Error::Config(format!("every validation replicate failed; first: {}", failures[0])));
    }
    let rows = summarize(&grid, &truth, &results);
    let mut summary = ValidationSummary {
        runs: cfg.validate.runs,
        failed_runs: failures.len(),
        truth: match (&cfg.validate.truth, trial_truth) {
            (Some(_), _) => "file",
            (None, true) => "trial",
            (None, false) => "target",
        },
        uniform_coverage: results.iter().filter(|r| r.band_covers_all()).count() as f64 / results.len() as f64,
        worst_pointwise_coverage: rows.iter().map(|r| r.pointwise_coverage).fold(f64::INFINITY, f64::min),
        max_abs_bias: rows.iter().map(|r| r.bias.abs()).fold(0.0, f64::max),
        mean_abs_bias: mean(&rows.iter().map(|r| r.bias.abs()).collect::<Vec<_>>()),
        max_rmse: rows.iter().map(|r| r.rmse).fold(0.0, f64::max),
        mean_critical_value: mean(&results.iter().map(|r| r.critical_value).collect::<Vec<_>>()),
        failures,
        checks: Vec::new(),
        passed: true,
    };
    summary.checks = checks(&cfg.validate.thresholds, &summary);
    summary.passed = summary.failed_runs == 0 && summary.checks.iter().all(|c| c.passed);

    let dir = out_dir(cfg);
    std::fs::create_dir_all(dir)?;
    let table = dir.join("validation.csv");
    write_validation(&rows, create(&table)?)?;
    let report = dir.join("report.json");
    write_json(&report, &summary)?;
    let manifest = dir.join("manifest.json");
    write_json(
        &manifest,
        &json!({
            "tool": TOOL,
            "version": VERSION,
            "command": "validate",
            "seed": cfg.seed,
            "replicates": cfg.replicates_for(Subcommand::Validate),
            "runs": cfg.validate.runs,
            "grid_points": grid.len(),
            "config": resolved(cfg, Subcommand::Validate),
        }),
    )?;
    Ok(RunOutcome { files: vec![table, report, manifest], passed: summary.passed })
}

pub fn run(command: Subcommand, cfg: &RunConfig) -> Result<RunOutcome> {
    match command {
        Subcommand::Analyze => cmd_analyze(cfg),
        Subcommand::Simulate => cmd_simulate(cfg),
        Subcommand::Validate => cmd_validate(cfg),
    }
}
