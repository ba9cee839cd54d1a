//! End-to-end analysis of one cohort: nuisance fits, pseudo-outcomes,
//! second stage, and confidence bands, optionally per stratum.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::BasisSpec;
use crate::config::{CrossfitConfig, RunConfig, SeConfig, SeMode, SecondStageConfig, Subcommand};
use crate::dataset::{assign_folds, CohortDataset};
use crate::inference::{multiplier_band_for_fit, InferenceError, subgroup_band, BandSettings, UniformBand, WeightScheme};
use crate::nuisance::{fit_nuisances, fit_nuisances_crossfit, FitDiagnostic, ModelSpec, NuisancePredictions, NuisanceSpecs};
use crate::pseudo::{compute_pseudo, PseudoOutcomes, PseudoVariant};
use crate::rng::{stream_rng, Stream};
use crate::second_stage::{
    evaluate_grid, fit_cate, fit_cate_with_basis, sparse_edge_warnings, subgroup_cate, CateFit, GridEvaluation,
    GridSpec,
};
use crate::stats::sample_variance;
use crate::{Error, Result};

/// Everything an analysis needs beyond the data.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSettings {
    /// Main effects of every covariate when `None`.
    pub nuisance: Option<NuisanceSpecs>,
    pub second_stage: SecondStageConfig,
    pub variant: PseudoVariant,
    pub crossfit: CrossfitConfig,
    pub grid: GridSpec,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    pub se: SeConfig,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings::from_config(&RunConfig::default(), Subcommand::Analyze)
    }
}

impl AnalysisSettings {
    pub fn from_config(cfg: &RunConfig, command: Subcommand) -> Self {
        AnalysisSettings {
            nuisance: cfg.nuisance.clone(),
            second_stage: cfg.second_stage.clone(),
            variant: cfg.variant,
            crossfit: cfg.crossfit,
            grid: cfg.grid,
            alpha: cfg.alpha,
            replicates: cfg.replicates_for(command),
            seed: cfg.seed,
            se: cfg.se,
        }
    }

    fn band_settings(&self) -> BandSettings {
        BandSettings { alpha: self.alpha, replicates: self.replicates, seed: self.seed, weights: WeightScheme::Exponential }
    }
}

/// Main effects of every covariate except `exclude`, intercept-only
/// treatment model.
pub fn default_nuisance(ds: &CohortDataset, exclude: Option<&str>) -> NuisanceSpecs {
    let covariates: Vec<&str> = ds
        .covariate_names()
        .iter()
        .map(String::as_str)
        .filter(|c| Some(*c) != exclude)
        .collect();
    NuisanceSpecs {
        participation: ModelSpec::main_effects(covariates.iter().copied()),
        treatment: ModelSpec::intercept_only(),
        outcome: ModelSpec::main_effects(covariates.iter().copied()),
    }
}

/// Step one: nuisance predictions for every row, cross-fit when enabled.
pub fn step_one(ds: &CohortDataset, specs: &NuisanceSpecs, settings: &AnalysisSettings) -> Result<NuisancePredictions> {
    if settings.crossfit.enabled {
        let folds = assign_folds(ds, settings.crossfit.k, settings.seed)?;
        Ok(fit_nuisances_crossfit(ds, &folds, specs)?)
    } else {
        Ok(fit_nuisances(ds, specs)?)
    }
}

/// Pseudo-outcomes and the matching modifier values.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTwoInput {
    pub pseudo: PseudoOutcomes,
    pub modifiers: Vec<f64>,
}

pub fn step_two_input(ds: &CohortDataset, np: &NuisancePredictions, variant: PseudoVariant, modifier: &str) -> Result<StepTwoInput> {
    let column = ds
        .column(modifier)
        .ok_or_else(|| Error::Config(format!("unknown effect modifier `{modifier}`")))?;
    let pseudo = compute_pseudo(variant, ds, np)?;
    let modifiers = pseudo.rows.iter().map(|&i| column[i]).collect();
    Ok(StepTwoInput { pseudo, modifiers })
}

fn data_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Point estimate of a CATE curve with sandwich standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveEstimate {
    pub input: StepTwoInput,
    pub fit: CateFit,
    pub evaluation: GridEvaluation,
    pub nuisance: NuisancePredictions,
}

/// Both estimation steps for one modifier with a regression second stage.
pub fn estimate_curve(ds: &CohortDataset, settings: &AnalysisSettings, modifier: &str) -> Result<CurveEstimate> {
    let specs = settings.nuisance.clone().unwrap_or_else(|| default_nuisance(ds, None));
    let np = step_one(ds, &specs, settings)?;
    curve_from_nuisance(ds, np, settings, modifier)
}

fn curve_from_nuisance(
    ds: &CohortDataset,
    np: NuisancePredictions,
    settings: &AnalysisSettings,
    modifier: &str,
) -> Result<CurveEstimate> {
    let basis = settings
        .second_stage
        .basis()
        .ok_or_else(|| Error::Config("subgroup second stage has no curve".into()))?;
    let input = step_two_input(ds, &np, settings.variant, modifier)?;
    let fit = fit_cate(&input.pseudo.values, &input.modifiers, &basis, None)?;
    let grid = settings.grid.build(data_range(&input.modifiers))?;
    let evaluation = evaluate_grid(&fit, &grid)?;
    Ok(CurveEstimate { input, fit, evaluation, nuisance: np })
}

/// Result for one effect modifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModifierAnalysis {
    pub modifier: String,
    pub band: UniformBand,
    /// Resolved basis; `None` for subgroup means.
    pub basis: Option<BasisSpec>,
    pub coefficients: Vec<f64>,
    pub se_mode: SeMode,
    /// Bootstrap standard-error replicates that failed and were skipped.
    pub se_failures: usize,
    /// Modifier values clamped to the basis boundary.
    pub clamped: usize,
    pub n_used: usize,
    pub warnings: Vec<String>,
}

/// Result for one stratum (or the whole cohort).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumAnalysis {
    pub stratum: Option<Stratum>,
    pub n_rows: usize,
    pub n_trial: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub variant: PseudoVariant,
    pub crossfit: bool,
    pub truncation_count: usize,
    pub nuisance_converged: bool,
    pub diagnostics: Vec<FitDiagnostic>,
    pub modifiers: Vec<ModifierAnalysis>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratum {
    pub column: String,
    pub value: f64,
}

/// Full analysis of every effect modifier in the schema.
pub fn analyze(ds: &CohortDataset, settings: &AnalysisSettings) -> Result<StratumAnalysis> {
    analyze_excluding(ds, settings, None)
}

fn analyze_excluding(ds: &CohortDataset, settings: &AnalysisSettings, exclude: Option<&str>) -> Result<StratumAnalysis> {
    let specs = match (&settings.nuisance, exclude) {
        (None, _) => default_nuisance(ds, exclude),
        (Some(specs), None) => specs.clone(),
        (Some(specs), Some(column)) => without_column(specs, column),
    };
    let np = step_one(ds, &specs, settings)?;
    let (n_control, n_treated) = ds.arm_counts();
    let mut modifiers = Vec::new();
    for modifier in ds.effect_modifiers() {
        modifiers.push(analyze_modifier(ds, &np, &specs, settings, modifier)?);
    }
    Ok(StratumAnalysis {
        stratum: None,
        n_rows: ds.n_rows(),
        n_trial: ds.n_trial(),
        n_treated,
        n_control,
        variant: settings.variant,
        crossfit: np.crossfit,
        truncation_count: np.truncation_count,
        nuisance_converged: np.diagnostics.iter().all(|d| d.converged),
        diagnostics: np.diagnostics,
        modifiers,
    })
}

/// Drops `column` from every explicit nuisance model; it is constant within
/// a stratum.
fn without_column(specs: &NuisanceSpecs, column: &str) -> NuisanceSpecs {
    let strip = |m: &ModelSpec| {
        let mut m = m.clone();
        if m.covariates.iter().any(|c| c == column) || m.splines.contains_key(column) {
            log::warn!("dropping stratification column `{column}` from a nuisance model");
        }
        m.covariates.retain(|c| c != column);
        m.splines.remove(column);
        m
    };
    NuisanceSpecs {
        participation: strip(&specs.participation),
        treatment: strip(&specs.treatment),
        outcome: strip(&specs.outcome),
    }
}

fn analyze_modifier(
    ds: &CohortDataset,
    np: &NuisancePredictions,
    specs: &NuisanceSpecs,
    settings: &AnalysisSettings,
    modifier: &str,
) -> Result<ModifierAnalysis> {
    let input = step_two_input(ds, np, settings.variant, modifier)?;
    let trial_column: Vec<f64> = {
        let column = ds.column(modifier).expect("checked in step_two_input");
        ds.trial_rows().into_iter().map(|i| column[i]).collect()
    };
    let Some(config) = settings.second_stage.basis() else {
        let estimates = subgroup_cate(&input.pseudo.values, &input.modifiers)?;
        let band = subgroup_band(&input.pseudo.values, &input.modifiers, &estimates, &settings.band_settings())?;
        return Ok(ModifierAnalysis {
            modifier: modifier.to_string(),
            coefficients: band.estimate.clone(),
            band,
            basis: None,
            se_mode: SeMode::Sandwich,
            se_failures: 0,
            clamped: 0,
            n_used: input.pseudo.values.len(),
            warnings: Vec::new(),
        });
    };
    let fit = fit_cate(&input.pseudo.values, &input.modifiers, &config, None)?;
    let grid = settings.grid.build(data_range(&input.modifiers))?;
    let mut evaluation = evaluate_grid(&fit, &grid)?;
    let mut warnings = sparse_edge_warnings(&trial_column, &grid);
    let se_failures = match settings.se.mode {
        SeMode::Sandwich => 0,
        SeMode::Bootstrap => {
            let (se, failures) = second_stage_bootstrap_se(&input, &fit.basis, &grid, settings)?;
            evaluation.se = se;
            failures
        }
        SeMode::BootstrapRefit => {
            let (se, failures) = refit_bootstrap_se(ds, specs, &fit.basis, modifier, &grid, settings)?;
            evaluation.se = se;
            failures
        }
    };
    if se_failures > 0 {
        warnings.push(format!("{se_failures} bootstrap standard-error replicates failed and were skipped"));
    }
    let band = multiplier_band_for_fit(&input.pseudo.values, &input.modifiers, &fit, &evaluation, &settings.band_settings())?;
    if !band.band_contains_pointwise {
        warnings.push(format!(
            "uniform critical value {:.4} is below the pointwise z {:.4}",
            band.critical_value, band.z
        ));
    }
    if fit.clamped > 0 {
        warnings.push(format!("{} modifier values clamped to the basis boundary", fit.clamped));
    }
    Ok(ModifierAnalysis {
        modifier: modifier.to_string(),
        band,
        basis: Some(fit.basis.clone()),
        coefficients: fit.beta.clone(),
        se_mode: settings.se.mode,
        se_failures,
        clamped: fit.clamped,
        n_used: fit.n_used,
        warnings,
    })
}

fn resample(n: usize, seed: u64, r: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Resample(r));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Per-grid-point standard deviation over successful replicates.
fn replicate_sd(curves: Vec<Option<Vec<f64>>>, grid_len: usize) -> Result<(Vec<f64>, usize)> {
    let failures = curves.iter().filter(|c| c.is_none()).count();
    let ok: Vec<Vec<f64>> = curves.into_iter().flatten().collect();
    if ok.len() < 2 {
        return Err(InferenceError::BootstrapSeFailed { succeeded: ok.len(), replicates: ok.len() + failures }.into());
    }
    let se = (0..grid_len)
        .map(|j| sample_variance(&ok.iter().map(|c| c[j]).collect::<Vec<_>>()).sqrt())
        .collect();
    Ok((se, failures))
}

/// Resamples (pseudo-outcome, modifier) pairs and refits the second stage
/// on the original basis.
fn second_stage_bootstrap_se(
    input: &StepTwoInput,
    basis: &BasisSpec,
    grid: &[f64],
    settings: &AnalysisSettings,
) -> Result<(Vec<f64>, usize)> {
    let n = input.pseudo.values.len();
    let curves = (0..settings.se.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let idx = resample(n, settings.seed, r);
            let v: Vec<f64> = idx.iter().map(|&i| input.pseudo.values[i]).collect();
            let m: Vec<f64> = idx.iter().map(|&i| input.modifiers[i]).collect();
            let fit = fit_cate_with_basis(&v, &m, basis, None).ok()?;
            Some(grid.iter().map(|&x| fit.estimate_at(x)).collect())
        })
        .collect();
    replicate_sd(curves, grid.len())
}

/// Resamples cohort rows and reruns both steps; the second stage keeps the
/// original basis.
fn refit_bootstrap_se(
    ds: &CohortDataset,
    specs: &NuisanceSpecs,
    basis: &BasisSpec,
    modifier: &str,
    grid: &[f64],
    settings: &AnalysisSettings,
) -> Result<(Vec<f64>, usize)> {
    let curves = (0..settings.se.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let boot = ds.subset(&resample(ds.n_rows(), settings.seed, r));
            let np = step_one(&boot, specs, settings).ok()?;
            let input = step_two_input(&boot, &np, settings.variant, modifier).ok()?;
            let fit = fit_cate_with_basis(&input.pseudo.values, &input.modifiers, basis, None).ok()?;
            Some(grid.iter().map(|&x| fit.estimate_at(x)).collect())
        })
        .collect();
    replicate_sd(curves, grid.len())
}

/// Runs [`analyze`] separately within each level of `stratify_by`, or once
/// on the whole cohort. Both steps are refit per stratum, and the
/// stratification column is left out of the nuisance models.
pub fn analyze_strata(ds: &CohortDataset, settings: &AnalysisSettings, stratify_by: Option<&str>) -> Result<Vec<StratumAnalysis>> {
    let Some(column_name) = stratify_by else {
        return Ok(vec![analyze(ds, settings)?]);
    };
    let column = ds
        .column(column_name)
        .ok_or_else(|| Error::Config(format!("unknown stratification column `{column_name}`")))?;
    if ds.effect_modifiers().iter().any(|m| m == column_name) {
        return Err(Error::Config(format!("`{column_name}` cannot be both a stratifier and an effect modifier")));
    }
    let mut levels = column.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut out = Vec::with_capacity(levels.len());
    for value in levels {
        let rows: Vec<usize> = (0..ds.n_rows()).filter(|&i| column[i] == value).collect();
        let sub = ds.subset(&rows);
        let mut result = analyze_excluding(&sub, settings, Some(column_name))?;
        result.stratum = Some(Stratum { column: column_name.to_string(), value });
        out.push(result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{generate, ArmMean, Covariate, CovariateLaw, DgpSpec, LinearPredictor, OutcomeFamily};

    fn spec(n: usize) -> DgpSpec {
        DgpSpec {
            n,
            covariates: vec![
                Covariate { name: "x1".into(), law: CovariateLaw::Uniform { low: 0.0, high: 1.0 } },
                Covariate { name: "g".into(), law: CovariateLaw::Bernoulli { p: 0.5 } },
            ],
            participation: LinearPredictor::constant(-0.3).with("x1", 0.5),
            treatment_probability: 0.5,
            treated: ArmMean::identity(LinearPredictor::constant(0.35).with("x1", 0.8)),
            control: ArmMean::identity(LinearPredictor::constant(0.5).with("x1", 0.5)),
            family: OutcomeFamily::Gaussian { sigma: 0.5 },
            effect_modifier: "x1".into(),
            seed: 11,
        }
    }

    #[test]
    fn analysis_produces_a_band_per_modifier() {
        let ds = generate(&spec(1500)).unwrap();
        let settings = AnalysisSettings { replicates: 200, ..AnalysisSettings::default() };
        let result = analyze(&ds, &settings).unwrap();
        assert_eq!(result.modifiers.len(), 1);
        let m = &result.modifiers[0];
        assert_eq!(m.band.grid.len(), 100);
        assert!(result.nuisance_converged);
        assert_eq!(result.n_treated + result.n_control, result.n_trial);
        assert!(m.band.critical_value > m.band.z);
        assert_eq!(result, analyze(&ds, &settings).unwrap());
    }

    #[test]
    fn stratified_analysis_splits_rows() {
        let ds = generate(&spec(2000)).unwrap();
        let settings = AnalysisSettings { replicates: 100, ..AnalysisSettings::default() };
        let strata = analyze_strata(&ds, &settings, Some("g")).unwrap();
        assert_eq!(strata.len(), 2);
        assert_eq!(strata.iter().map(|s| s.n_rows).sum::<usize>(), ds.n_rows());
        assert_eq!(strata[0].stratum.as_ref().unwrap().value, 0.0);
        // The stratifier is dropped from the default nuisance models.
        assert!(strata.iter().all(|s| s.nuisance_converged));
        assert!(analyze_strata(&ds, &settings, Some("zz")).is_err());
    }

    #[test]
    fn stratifier_is_dropped_from_explicit_nuisance_models() {
        let ds = generate(&spec(2000)).unwrap();
        let names: Vec<&str> = ds.covariate_names().iter().map(String::as_str).collect();
        let settings = AnalysisSettings {
            nuisance: Some(NuisanceSpecs::main_effects(&names)),
            replicates: 100,
            ..AnalysisSettings::default()
        };
        let strata = analyze_strata(&ds, &settings, Some("g")).unwrap();
        assert_eq!(strata.len(), 2);
        let specs = without_column(settings.nuisance.as_ref().unwrap(), "g");
        assert!(!specs.participation.covariates.iter().any(|c| c == "g"));
        assert!(!specs.outcome.covariates.iter().any(|c| c == "g"));
    }

    #[test]
    fn variants_differ_only_in_the_pseudo_outcome() {
        let ds = generate(&spec(1200)).unwrap();
        let base = AnalysisSettings::default();
        let aipw = estimate_curve(&ds, &base, "x1").unwrap();
        let ipw = estimate_curve(&ds, &AnalysisSettings { variant: PseudoVariant::Ipw, ..base.clone() }, "x1").unwrap();
        let trial = estimate_curve(&ds, &AnalysisSettings { variant: PseudoVariant::TrialOnly, ..base }, "x1").unwrap();
        assert_eq!(aipw.nuisance, ipw.nuisance);
        assert_eq!(aipw.input.pseudo.rows.len(), ds.n_rows());
        assert_eq!(trial.input.pseudo.rows, ds.trial_rows());
        assert_ne!(aipw.evaluation.estimate, ipw.evaluation.estimate);
    }

    #[test]
    fn bootstrap_se_modes_are_close_to_sandwich() {
        let ds = generate(&spec(1500)).unwrap();
        let grid = GridSpec { min: Some(0.2), max: Some(0.8), step: Some(0.3) };
        let base = AnalysisSettings { grid, replicates: 100, ..AnalysisSettings::default() };
        let sandwich = analyze(&ds, &base).unwrap().modifiers[0].band.se.clone();
        for mode in [SeMode::Bootstrap, SeMode::BootstrapRefit] {
            let s = AnalysisSettings { se: SeConfig { mode, replicates: 200 }, ..base.clone() };
            let m = &analyze(&ds, &s).unwrap().modifiers[0];
            assert_eq!(m.se_mode, mode);
            for (b, w) in m.band.se.iter().zip(&sandwich) {
                assert!((b / w - 1.0).abs() < 0.3, "{mode:?}: {b} vs {w}");
            }
        }
    }

    #[test]
    fn subgroup_second_stage() {
        let mut dgp = spec(2000);
        dgp.effect_modifier = "g".into();
        let ds = generate(&dgp).unwrap();
        let settings = AnalysisSettings {
            second_stage: SecondStageConfig::Subgroup,
            replicates: 200,
            ..AnalysisSettings::default()
        };
        let result = analyze(&ds, &settings).unwrap();
        let band = &result.modifiers[0].band;
        assert_eq!(band.grid, vec![0.0, 1.0]);
        assert!(result.modifiers[0].basis.is_none());
    }
}
