//! Step one: participation, treatment and per-arm outcome models, fit in
//! sample or cross-fitted, with predictions for every row.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisConfig, BasisError, BasisSpec};
use crate::dataset::{CohortDataset, FoldAssignment, OutcomeKind};
use crate::glm::{fit_glm, Family, GlmError, GlmFit};

/// Estimated probabilities are clipped to `[TRUNCATION_EPS, 1 - TRUNCATION_EPS]`.
pub const TRUNCATION_EPS: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum NuisanceError {
    #[error("single-arm trial: every trial row in the fitting data has a = {0}")]
    SingleArmTrial(u8),
    #[error("participation model needs both trial and non-trial rows in the fitting data")]
    NoParticipationContrast,
    #[error("model references unknown column `{0}`")]
    UnknownColumn(String),
    #[error("{model} model{}: {source}", fold.map(|f| format!(" (fold {f})")).unwrap_or_default())]
    Fit {
        model: NuisanceModel,
        fold: Option<usize>,
        source: GlmError,
    },
    #[error("{model} model basis: {source}")]
    Basis { model: NuisanceModel, source: BasisError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceModel {
    Participation,
    Treatment,
    OutcomeTreated,
    OutcomeControl,
}

impl std::fmt::Display for NuisanceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NuisanceModel::Participation => "participation",
            NuisanceModel::Treatment => "treatment",
            NuisanceModel::OutcomeTreated => "outcome (treated arm)",
            NuisanceModel::OutcomeControl => "outcome (control arm)",
        })
    }
}

/// Main-effects model with an intercept: each listed covariate enters raw,
/// or through a spline block when it has an entry in `splines`. An empty
/// covariate list is the intercept-only model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub splines: BTreeMap<String, BasisConfig>,
    /// Overrides the family picked from the data (outcome models only).
    #[serde(default)]
    pub family: Option<Family>,
}

impl ModelSpec {
    pub fn intercept_only() -> Self {
        ModelSpec::default()
    }

    pub fn main_effects<S: Into<String>>(covariates: impl IntoIterator<Item = S>) -> Self {
        ModelSpec { covariates: covariates.into_iter().map(Into::into).collect(), ..ModelSpec::default() }
    }

    pub fn with_spline(mut self, covariate: &str, basis: BasisConfig) -> Self {
        self.splines.insert(covariate.to_string(), basis);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSpecs {
    pub participation: ModelSpec,
    pub treatment: ModelSpec,
    /// Used for both arms; each arm is fit separately.
    pub outcome: ModelSpec,
}

impl NuisanceSpecs {
    /// Main effects of `covariates` in the participation and outcome models,
    /// intercept-only treatment model.
    pub fn main_effects(covariates: &[&str]) -> Self {
        NuisanceSpecs {
            participation: ModelSpec::main_effects(covariates.iter().copied()),
            treatment: ModelSpec::intercept_only(),
            outcome: ModelSpec::main_effects(covariates.iter().copied()),
        }
    }
}

/// Resolved design for one nuisance model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelDesign {
    pub columns: Vec<(String, Option<BasisSpec>)>,
}

impl ModelDesign {
    fn resolve(
        spec: &ModelSpec,
        ds: &CohortDataset,
        rows: &[usize],
        model: NuisanceModel,
    ) -> Result<Self, NuisanceError> {
        if let Some(name) = spec.splines.keys().find(|k| !spec.covariates.contains(k)) {
            return Err(NuisanceError::UnknownColumn(name.clone()));
        }
        let mut columns = Vec::with_capacity(spec.covariates.len());
        for name in &spec.covariates {
            let col = ds.column(name).ok_or_else(|| NuisanceError::UnknownColumn(name.clone()))?;
            let basis = match spec.splines.get(name) {
                Some(cfg) => {
                    let values: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
                    let resolved = cfg
                        .clone()
                        .with_intercept(false)
                        .resolve(&values)
                        .map_err(|source| NuisanceError::Basis { model, source })?;
                    Some(resolved)
                }
                None => None,
            };
            columns.push((name.clone(), basis));
        }
        Ok(ModelDesign { columns })
    }

    pub fn width(&self) -> usize {
        1 + self.columns.iter().map(|(_, b)| b.as_ref().map_or(1, BasisSpec::width)).sum::<usize>()
    }

    /// Intercept plus covariate blocks for `rows` of `ds`.
    pub fn matrix(&self, ds: &CohortDataset, rows: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows.len(), self.width());
        m.column_mut(0).fill(1.0);
        let mut j = 1;
        for (name, basis) in &self.columns {
            let col = ds.column(name).expect("design columns were checked when resolved");
            match basis {
                None => {
                    for (r, &i) in rows.iter().enumerate() {
                        m[(r, j)] = col[i];
                    }
                    j += 1;
                }
                Some(spec) => {
                    let w = spec.width();
                    for (r, &i) in rows.iter().enumerate() {
                        for (k, v) in spec.row(col[i]).into_iter().enumerate() {
                            m[(r, j + k)] = v;
                        }
                    }
                    j += w;
                }
            }
        }
        m
    }
}

/// A fitted nuisance model: resolved design plus GLM coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedModel {
    pub design: ModelDesign,
    pub fit: GlmFit,
}

impl FittedModel {
    pub fn predict(&self, ds: &CohortDataset, rows: &[usize]) -> Vec<f64> {
        self.fit.predict(&self.design.matrix(ds, rows))
    }
}

/// Convergence record for one nuisance fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostic {
    pub model: NuisanceModel,
    pub fold: Option<usize>,
    pub n: usize,
    pub family: Family,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
}

/// All four nuisance models fit on one set of rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceFits {
    pub participation: FittedModel,
    pub treatment: FittedModel,
    pub outcome_treated: FittedModel,
    pub outcome_control: FittedModel,
}

/// Per-row nuisance predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisancePredictions {
    pub p_hat: Vec<f64>,
    pub e1_hat: Vec<f64>,
    pub g1_hat: Vec<f64>,
    pub g0_hat: Vec<f64>,
    /// `A g1 + (1 - A) g0` on trial rows, `None` elsewhere.
    pub g_of_a: Vec<Option<f64>>,
    pub crossfit: bool,
    /// Number of `p_hat` and `e1_hat` entries clipped to `[eps, 1 - eps]`.
    pub truncation_count: usize,
    pub diagnostics: Vec<FitDiagnostic>,
}

impl NuisancePredictions {
    /// Assembles predictions from raw vectors, without truncation.
    pub fn from_parts(ds: &CohortDataset, p_hat: Vec<f64>, e1_hat: Vec<f64>, g1_hat: Vec<f64>, g0_hat: Vec<f64>) -> Self {
        let g_of_a = ds
            .a()
            .iter()
            .enumerate()
            .map(|(i, a)| a.map(|a| if a { g1_hat[i] } else { g0_hat[i] }))
            .collect();
        NuisancePredictions {
            p_hat,
            e1_hat,
            g1_hat,
            g0_hat,
            g_of_a,
            crossfit: false,
            truncation_count: 0,
            diagnostics: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.p_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_hat.is_empty()
    }
}

fn fit_one(
    spec: &ModelSpec,
    ds: &CohortDataset,
    rows: &[usize],
    response: &[f64],
    family: Family,
    model: NuisanceModel,
    fold: Option<usize>,
) -> Result<FittedModel, NuisanceError> {
    let design = ModelDesign::resolve(spec, ds, rows, model)?;
    let x = design.matrix(ds, rows);
    let fit = fit_glm(&x, response, family, None).map_err(|source| NuisanceError::Fit { model, fold, source })?;
    Ok(FittedModel { design, fit })
}

/// Fits all nuisance models on `rows` of `ds`.
pub fn fit_models(
    ds: &CohortDataset,
    specs: &NuisanceSpecs,
    rows: &[usize],
    fold: Option<usize>,
) -> Result<NuisanceFits, NuisanceError> {
    let s = ds.s();
    let a = ds.a();
    let y = ds.y();
    if rows.iter().all(|&i| s[i]) || !rows.iter().any(|&i| s[i]) {
        return Err(NuisanceError::NoParticipationContrast);
    }
    let trial: Vec<usize> = rows.iter().copied().filter(|&i| s[i]).collect();
    let treated: Vec<usize> = trial.iter().copied().filter(|&i| a[i] == Some(true)).collect();
    let control: Vec<usize> = trial.iter().copied().filter(|&i| a[i] == Some(false)).collect();
    if control.is_empty() {
        return Err(NuisanceError::SingleArmTrial(1));
    }
    if treated.is_empty() {
        return Err(NuisanceError::SingleArmTrial(0));
    }
    let outcome_family = specs.outcome.family.unwrap_or(match ds.outcome_kind() {
        OutcomeKind::Binary => Family::Logistic,
        OutcomeKind::Continuous => Family::Linear,
    });
    let indicator = |v: bool| if v { 1.0 } else { 0.0 };
    let s_resp: Vec<f64> = rows.iter().map(|&i| indicator(s[i])).collect();
    let a_resp: Vec<f64> = trial.iter().map(|&i| indicator(a[i] == Some(true))).collect();
    let y1: Vec<f64> = treated.iter().map(|&i| y[i].expect("trial row")).collect();
    let y0: Vec<f64> = control.iter().map(|&i| y[i].expect("trial row")).collect();
    Ok(NuisanceFits {
        participation: fit_one(&specs.participation, ds, rows, &s_resp, Family::Logistic, NuisanceModel::Participation, fold)?,
        treatment: fit_one(&specs.treatment, ds, &trial, &a_resp, Family::Logistic, NuisanceModel::Treatment, fold)?,
        outcome_treated: fit_one(&specs.outcome, ds, &treated, &y1, outcome_family, NuisanceModel::OutcomeTreated, fold)?,
        outcome_control: fit_one(&specs.outcome, ds, &control, &y0, outcome_family, NuisanceModel::OutcomeControl, fold)?,
    })
}

impl NuisanceFits {
    fn diagnostics(&self, ds: &CohortDataset, train: &[usize], fold: Option<usize>) -> Vec<FitDiagnostic> {
        let s = ds.s();
        let a = ds.a();
        let n_trial = train.iter().filter(|&&i| s[i]).count();
        let n_treated = train.iter().filter(|&&i| a[i] == Some(true)).count();
        [
            (NuisanceModel::Participation, &self.participation, train.len()),
            (NuisanceModel::Treatment, &self.treatment, n_trial),
            (NuisanceModel::OutcomeTreated, &self.outcome_treated, n_treated),
            (NuisanceModel::OutcomeControl, &self.outcome_control, n_trial - n_treated),
        ]
        .into_iter()
        .map(|(model, m, n)| FitDiagnostic {
            model,
            fold,
            n,
            family: m.fit.family,
            converged: m.fit.converged,
            iterations: m.fit.iterations,
            deviance: m.fit.deviance,
        })
        .collect()
    }
}

fn truncate(values: &mut [f64], count: &mut usize) {
    for v in values {
        let clipped = v.clamp(TRUNCATION_EPS, 1.0 - TRUNCATION_EPS);
        if clipped != *v {
            *count += 1;
            *v = clipped;
        }
    }
}

struct RowPredictions {
    rows: Vec<usize>,
    p: Vec<f64>,
    e1: Vec<f64>,
    g1: Vec<f64>,
    g0: Vec<f64>,
    diagnostics: Vec<FitDiagnostic>,
}

fn fit_and_predict(
    ds: &CohortDataset,
    specs: &NuisanceSpecs,
    train: &[usize],
    predict: Vec<usize>,
    fold: Option<usize>,
) -> Result<RowPredictions, NuisanceError> {
    let fits = fit_models(ds, specs, train, fold)?;
    Ok(RowPredictions {
        p: fits.participation.predict(ds, &predict),
        e1: fits.treatment.predict(ds, &predict),
        g1: fits.outcome_treated.predict(ds, &predict),
        g0: fits.outcome_control.predict(ds, &predict),
        diagnostics: fits.diagnostics(ds, train, fold),
        rows: predict,
    })
}

fn assemble(ds: &CohortDataset, parts: Vec<RowPredictions>, crossfit: bool) -> NuisancePredictions {
    let n = ds.n_rows();
    let (mut p, mut e1, mut g1, mut g0) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut diagnostics = Vec::new();
    for part in parts {
        for (k, &i) in part.rows.iter().enumerate() {
            p[i] = part.p[k];
            e1[i] = part.e1[k];
            g1[i] = part.g1[k];
            g0[i] = part.g0[k];
        }
        diagnostics.extend(part.diagnostics);
    }
    let mut truncation_count = 0;
    truncate(&mut p, &mut truncation_count);
    truncate(&mut e1, &mut truncation_count);
    if truncation_count > 0 {
        log::warn!("clipped {truncation_count} estimated probabilities to [{TRUNCATION_EPS}, {}]", 1.0 - TRUNCATION_EPS);
    }
    let mut out = NuisancePredictions::from_parts(ds, p, e1, g1, g0);
    out.crossfit = crossfit;
    out.truncation_count = truncation_count;
    out.diagnostics = diagnostics;
    out
}

/// Fits every nuisance model on the full data and predicts every row.
pub fn fit_nuisances(ds: &CohortDataset, specs: &NuisanceSpecs) -> Result<NuisancePredictions, NuisanceError> {
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    let part = fit_and_predict(ds, specs, &rows, rows.clone(), None)?;
    Ok(assemble(ds, vec![part], false))
}

/// Cross-fitting: rows of each fold are predicted by models fit on all
/// other folds. Fold fits run in parallel and merge by row index.
pub fn fit_nuisances_crossfit(
    ds: &CohortDataset,
    folds: &FoldAssignment,
    specs: &NuisanceSpecs,
) -> Result<NuisancePredictions, NuisanceError> {
    let parts = (1..=folds.k())
        .into_par_iter()
        .map(|fold| fit_and_predict(ds, specs, &folds.rows_not_in(fold), folds.rows_in(fold), Some(fold)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(ds, parts, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_cohort, Schema};

    fn small() -> CohortDataset {
        let text = "x,s,a,y\n0.1,1,1,1\n0.5,1,1,0\n0.9,1,1,1\n0.2,1,0,0\n0.6,1,0,1\n0.7,1,0,0\n0.3,0,,\n0.8,0,,\n0.4,0,,\n0.45,1,1,1\n";
        let schema = Schema { effect_modifiers: vec!["x".into()], ..Schema::default() };
        load_cohort(text.as_bytes(), &schema).unwrap().0
    }

    #[test]
    fn intercept_only_treatment_model_fits_arm_fraction() {
        let ds = small();
        let specs = NuisanceSpecs {
            participation: ModelSpec::intercept_only(),
            treatment: ModelSpec::intercept_only(),
            outcome: ModelSpec::intercept_only(),
        };
        let np = fit_nuisances(&ds, &specs).unwrap();
        let (control, treated) = ds.arm_counts();
        let frac = treated as f64 / (control + treated) as f64;
        assert!(np.e1_hat.iter().all(|e| (e - frac).abs() < 1e-10));
        assert!(np.p_hat.iter().all(|p| (p - 0.7).abs() < 1e-10));
        assert_eq!(np.diagnostics.len(), 4);
        for (i, g) in np.g_of_a.iter().enumerate() {
            match ds.a()[i] {
                Some(true) => assert_eq!(*g, Some(np.g1_hat[i])),
                Some(false) => assert_eq!(*g, Some(np.g0_hat[i])),
                None => assert_eq!(*g, None),
            }
        }
    }

    #[test]
    fn single_arm_trial_is_an_error() {
        let text = "x,s,a,y\n0.1,1,1,1\n0.5,1,1,0\n0.3,0,,\n";
        let schema = Schema { effect_modifiers: vec!["x".into()], ..Schema::default() };
        let ds = load_cohort(text.as_bytes(), &schema).unwrap().0;
        let err = fit_nuisances(&ds, &NuisanceSpecs::default()).unwrap_err();
        assert_eq!(err, NuisanceError::SingleArmTrial(1));
        assert!(err.to_string().contains("single-arm trial"));
    }

    #[test]
    fn unknown_column_is_reported() {
        let ds = small();
        let specs = NuisanceSpecs::main_effects(&["nope"]);
        assert_eq!(fit_nuisances(&ds, &specs).unwrap_err(), NuisanceError::UnknownColumn("nope".into()));
    }

    #[test]
    fn fit_errors_name_the_model() {
        // x perfectly separates participation
        let text = "x,s,a,y\n0.1,1,1,1\n0.2,1,0,0\n0.3,1,1,0\n0.35,1,0,1\n0.8,0,,\n0.9,0,,\n";
        let schema = Schema { effect_modifiers: vec!["x".into()], ..Schema::default() };
        let ds = load_cohort(text.as_bytes(), &schema).unwrap().0;
        let specs = NuisanceSpecs {
            participation: ModelSpec::main_effects(["x"]),
            ..NuisanceSpecs::default()
        };
        match fit_nuisances(&ds, &specs).unwrap_err() {
            NuisanceError::Fit { model, source, .. } => {
                assert_eq!(model, NuisanceModel::Participation);
                assert!(matches!(source, GlmError::Separation { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_clips_and_counts() {
        let mut v = vec![0.0, 0.5, 1.0, 0.0005];
        let mut count = 0;
        truncate(&mut v, &mut count);
        assert_eq!(count, 3);
        assert_eq!(v, vec![TRUNCATION_EPS, 0.5, 1.0 - TRUNCATION_EPS, TRUNCATION_EPS]);
    }
}
