//! Per-row pseudo-outcomes whose conditional mean given the effect
//! modifiers is the CATE.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CohortDataset;
use crate::nuisance::NuisancePredictions;

#[derive(Debug, Error, PartialEq)]
pub enum PseudoError {
    #[error("nuisance predictions cover {predictions} rows, dataset has {rows}")]
    LengthMismatch { predictions: usize, rows: usize },
    #[error("non-finite pseudo-outcome at row {0}")]
    NonFinite(usize),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PseudoVariant {
    /// Doubly robust, target population.
    #[default]
    Aipw,
    /// Weighting only, target population.
    Ipw,
    /// Doubly robust without the participation weight, trial rows only.
    TrialOnly,
}

impl PseudoVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PseudoVariant::Aipw => "aipw",
            PseudoVariant::Ipw => "ipw",
            PseudoVariant::TrialOnly => "trial_only",
        }
    }
}

/// Where the nuisance predictions behind a set of pseudo-outcomes came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub crossfit: bool,
    pub truncation_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomes {
    pub values: Vec<f64>,
    /// Dataset row index of each value.
    pub rows: Vec<usize>,
    pub variant: PseudoVariant,
    pub provenance: Provenance,
}

/// Trial-row inputs of the pseudo-outcome formulas.
#[derive(Debug, Clone, Copy)]
pub struct TrialRow {
    pub treated: bool,
    pub y: f64,
}

/// `S (A - e1) / (p e1 e0) * (Y - g(X, A)) + g1 - g0`, with `e0 = 1 - e1`.
pub fn aipw_value(trial: Option<TrialRow>, p: f64, e1: f64, g1: f64, g0: f64) -> f64 {
    let plug_in = g1 - g0;
    match trial {
        None => plug_in,
        Some(TrialRow { treated, y }) => {
            let a = if treated { 1.0 } else { 0.0 };
            let g_a = if treated { g1 } else { g0 };
            (a - e1) / (p * e1 * (1.0 - e1)) * (y - g_a) + plug_in
        }
    }
}

/// `S (A - e1) / (p e1 e0) * Y`.
pub fn ipw_value(trial: Option<TrialRow>, p: f64, e1: f64) -> f64 {
    match trial {
        None => 0.0,
        Some(TrialRow { treated, y }) => {
            let a = if treated { 1.0 } else { 0.0 };
            (a - e1) / (p * e1 * (1.0 - e1)) * y
        }
    }
}

/// `(A - e1) / (e1 e0) * (Y - g(X, A)) + g1 - g0`.
pub fn trial_value(row: TrialRow, e1: f64, g1: f64, g0: f64) -> f64 {
    aipw_value(Some(row), 1.0, e1, g1, g0)
}

fn trial_row(ds: &CohortDataset, i: usize) -> Option<TrialRow> {
    match (ds.a()[i], ds.y()[i]) {
        (Some(treated), Some(y)) => Some(TrialRow { treated, y }),
        _ => None,
    }
}

fn check(ds: &CohortDataset, np: &NuisancePredictions) -> Result<(), PseudoError> {
    if np.len() != ds.n_rows() {
        return Err(PseudoError::LengthMismatch { predictions: np.len(), rows: ds.n_rows() });
    }
    Ok(())
}

fn finish(
    values: Vec<f64>,
    rows: Vec<usize>,
    variant: PseudoVariant,
    np: &NuisancePredictions,
) -> Result<PseudoOutcomes, PseudoError> {
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(PseudoError::NonFinite(rows[k]));
    }
    Ok(PseudoOutcomes {
        values,
        rows,
        variant,
        provenance: Provenance { crossfit: np.crossfit, truncation_count: np.truncation_count },
    })
}

/// Doubly robust pseudo-outcome for every row.
pub fn aipw_pseudo(ds: &CohortDataset, np: &NuisancePredictions) -> Result<PseudoOutcomes, PseudoError> {
    check(ds, np)?;
    let values = (0..ds.n_rows())
        .map(|i| aipw_value(trial_row(ds, i), np.p_hat[i], np.e1_hat[i], np.g1_hat[i], np.g0_hat[i]))
        .collect();
    finish(values, (0..ds.n_rows()).collect(), PseudoVariant::Aipw, np)
}

/// Inverse probability weighted pseudo-outcome for every row; zero off the trial.
pub fn ipw_pseudo(ds: &CohortDataset, np: &NuisancePredictions) -> Result<PseudoOutcomes, PseudoError> {
    check(ds, np)?;
    let values = (0..ds.n_rows())
        .map(|i| ipw_value(trial_row(ds, i), np.p_hat[i], np.e1_hat[i]))
        .collect();
    finish(values, (0..ds.n_rows()).collect(), PseudoVariant::Ipw, np)
}

/// Pseudo-outcome without the participation weight, on trial rows only.
pub fn trial_pseudo(ds: &CohortDataset, np: &NuisancePredictions) -> Result<PseudoOutcomes, PseudoError> {
    check(ds, np)?;
    let rows = ds.trial_rows();
    let values = rows
        .iter()
        .map(|&i| {
            let row = trial_row(ds, i).expect("trial rows carry a and y");
            trial_value(row, np.e1_hat[i], np.g1_hat[i], np.g0_hat[i])
        })
        .collect();
    finish(values, rows, PseudoVariant::TrialOnly, np)
}

pub fn compute_pseudo(
    variant: PseudoVariant,
    ds: &CohortDataset,
    np: &NuisancePredictions,
) -> Result<PseudoOutcomes, PseudoError> {
    match variant {
        PseudoVariant::Aipw => aipw_pseudo(ds, np),
        PseudoVariant::Ipw => ipw_pseudo(ds, np),
        PseudoVariant::TrialOnly => trial_pseudo(ds, np),
    }
}

/// Debug dump: `row,s,value,variant`.
pub fn write_pseudo<W: Write>(ds: &CohortDataset, pseudo: &PseudoOutcomes, sink: W) -> Result<(), PseudoError> {
    let err = |e: csv::Error| PseudoError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["row", "s", "value", "variant"]).map_err(err)?;
    for (&row, value) in pseudo.rows.iter().zip(&pseudo.values) {
        let s = if ds.s()[row] { "1" } else { "0" };
        w.write_record([row.to_string().as_str(), s, value.to_string().as_str(), pseudo.variant.as_str()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| PseudoError::Csv(e.to_string()))
}
