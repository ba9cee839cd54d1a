//! Step two: series regression of pseudo-outcomes on a basis of the effect
//! modifier, or pseudo-outcome means within levels of a discrete modifier.
//!
//! Pseudo-outcomes are treated as fixed regressands; the sandwich covariance
//! ignores first-step estimation error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisConfig, BasisError, BasisSpec};
use crate::linalg::{sandwich_hc0, weighted_least_squares};
use crate::stats::{mean, sample_variance};

/// Grids default to this many evenly spaced points.
pub const DEFAULT_GRID_POINTS: usize = 100;
/// Fewer trial observations than this in the outer tenth of the grid range
/// triggers a sparse-data warning.
pub const SPARSE_EDGE_COUNT: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum SecondStageError {
    #[error("{what}: expected {expected} values, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("no pseudo-outcomes to regress")]
    Empty,
    #[error("second-stage design is rank deficient (column {column})")]
    RankDeficient { column: usize },
    #[error("evaluation grid is empty")]
    EmptyGrid,
    #[error("evaluation grid must be strictly increasing")]
    GridNotIncreasing,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("subgroup {level} has a single observation")]
    SingletonLevel { level: f64 },
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Fitted series regression `delta(x) = m(x)' beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CateFit {
    pub beta: Vec<f64>,
    pub basis: BasisSpec,
    /// HC0 sandwich covariance of `beta`.
    pub covariance: DMatrix<f64>,
    pub n_used: usize,
    pub residuals: Vec<f64>,
    /// Modifier values outside the basis boundary, clamped.
    pub clamped: usize,
    pub stratum_label: Option<String>,
}

impl CateFit {
    pub fn estimate_at(&self, x: f64) -> f64 {
        self.basis.row(x).iter().zip(&self.beta).map(|(m, b)| m * b).sum()
    }

    pub fn se_at(&self, x: f64) -> f64 {
        let m = DVector::from_vec(self.basis.row(x));
        (m.transpose() * &self.covariance * &m)[(0, 0)].max(0.0).sqrt()
    }
}

/// CATE estimates and standard errors over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEvaluation {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
}

fn check_lengths(values: &[f64], modifiers: &[f64], weights: Option<&[f64]>) -> Result<(), SecondStageError> {
    if values.is_empty() {
        return Err(SecondStageError::Empty);
    }
    if modifiers.len() != values.len() {
        return Err(SecondStageError::LengthMismatch { what: "modifiers", expected: values.len(), got: modifiers.len() });
    }
    if let Some(w) = weights {
        if w.len() != values.len() {
            return Err(SecondStageError::LengthMismatch { what: "weights", expected: values.len(), got: w.len() });
        }
    }
    Ok(())
}

/// Least squares of pseudo-outcomes on `basis(modifiers)`, optionally
/// weighted, with HC0 sandwich covariance.
pub fn fit_cate_with_basis(
    values: &[f64],
    modifiers: &[f64],
    basis: &BasisSpec,
    weights: Option<&[f64]>,
) -> Result<CateFit, SecondStageError> {
    check_lengths(values, modifiers, weights)?;
    let (design, clamped) = basis.design(modifiers)?;
    let ls = weighted_least_squares(&design, values, weights)
        .map_err(|e| SecondStageError::RankDeficient { column: e.rank_column })?;
    let fitted = &design * &ls.beta;
    let residuals: Vec<f64> = values.iter().zip(fitted.iter()).map(|(v, f)| v - f).collect();
    let covariance = sandwich_hc0(&design, &residuals, weights, &ls.gram_inverse);
    Ok(CateFit {
        beta: ls.beta.iter().copied().collect(),
        basis: basis.clone(),
        covariance,
        n_used: values.len(),
        residuals,
        clamped,
        stratum_label: None,
    })
}

/// Resolves `config` against the modifier values (e.g. the median knot)
/// and fits the series regression.
pub fn fit_cate(
    values: &[f64],
    modifiers: &[f64],
    config: &BasisConfig,
    weights: Option<&[f64]>,
) -> Result<CateFit, SecondStageError> {
    check_lengths(values, modifiers, weights)?;
    let basis = config.resolve(modifiers)?;
    fit_cate_with_basis(values, modifiers, &basis, weights)
}

fn check_grid(grid: &[f64]) -> Result<(), SecondStageError> {
    if grid.is_empty() {
        return Err(SecondStageError::EmptyGrid);
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(SecondStageError::GridNotIncreasing);
    }
    Ok(())
}

/// Point estimates `m(x)' beta` and standard errors `sqrt(m(x)' V m(x))`.
pub fn evaluate_grid(fit: &CateFit, grid: &[f64]) -> Result<GridEvaluation, SecondStageError> {
    check_grid(grid)?;
    Ok(GridEvaluation {
        grid: grid.to_vec(),
        estimate: grid.iter().map(|&x| fit.estimate_at(x)).collect(),
        se: grid.iter().map(|&x| fit.se_at(x)).collect(),
    })
}

/// Pseudo-outcome mean within one level of a discrete modifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupEstimate {
    pub level: f64,
    pub estimate: f64,
    /// Sample standard deviation over `sqrt(n)`.
    pub se: f64,
    pub n: usize,
}

/// Subgroup means of the pseudo-outcomes, levels in increasing order.
pub fn subgroup_cate(values: &[f64], levels: &[f64]) -> Result<Vec<SubgroupEstimate>, SecondStageError> {
    check_lengths(values, levels, None)?;
    let mut distinct: Vec<f64> = levels.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    distinct
        .into_iter()
        .map(|level| {
            let group: Vec<f64> = values
                .iter()
                .zip(levels)
                .filter(|(_, l)| **l == level)
                .map(|(v, _)| *v)
                .collect();
            if group.len() < 2 {
                return Err(SecondStageError::SingletonLevel { level });
            }
            let n = group.len();
            Ok(SubgroupEstimate {
                level,
                estimate: mean(&group),
                se: (sample_variance(&group) / n as f64).sqrt(),
                n,
            })
        })
        .collect()
}

/// Evaluation grid: explicit step from `min`, or [`DEFAULT_GRID_POINTS`]
/// evenly spaced points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct GridSpec {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub step: Option<f64>,
}

impl GridSpec {
    /// Builds the grid; missing bounds come from `data_range`.
    pub fn build(&self, data_range: (f64, f64)) -> Result<Vec<f64>, SecondStageError> {
        let lo = self.min.unwrap_or(data_range.0);
        let hi = self.max.unwrap_or(data_range.1);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(SecondStageError::InvalidGrid("bounds must be finite".into()));
        }
        if lo > hi {
            return Err(SecondStageError::InvalidGrid(format!("min {lo} exceeds max {hi}")));
        }
        if lo == hi {
            return Ok(vec![lo]);
        }
        match self.step {
            Some(step) => {
                if !(step > 0.0 && step.is_finite()) {
                    return Err(SecondStageError::InvalidGrid(format!("step must be positive, got {step}")));
                }
                let count = ((hi - lo) / step * (1.0 + 1e-12)).floor() as usize;
                Ok((0..=count).map(|i| lo + i as f64 * step).collect())
            }
            None => {
                let n = DEFAULT_GRID_POINTS;
                Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
            }
        }
    }
}

/// Warnings for grid ends with fewer than [`SPARSE_EDGE_COUNT`] trial
/// observations within the outer tenth of the grid range.
pub fn sparse_edge_warnings(trial_modifiers: &[f64], grid: &[f64]) -> Vec<String> {
    let (Some(&lo), Some(&hi)) = (grid.first(), grid.last()) else {
        return Vec::new();
    };
    let margin = 0.1 * (hi - lo);
    let below = trial_modifiers.iter().filter(|&&x| x <= lo + margin).count();
    let above = trial_modifiers.iter().filter(|&&x| x >= hi - margin).count();
    let mut warnings = Vec::new();
    if below < SPARSE_EDGE_COUNT {
        warnings.push(format!("only {below} trial observations near the lower grid bound {lo}"));
    }
    if above < SPARSE_EDGE_COUNT {
        warnings.push(format!("only {above} trial observations near the upper grid bound {hi}"));
    }
    warnings
}
