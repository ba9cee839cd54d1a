//! Logistic and linear regression on a prebuilt design matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::weighted_least_squares;
use crate::stats::expit;

pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 30;
/// Linear predictors beyond this size mean fitted probabilities within
/// about 1e-11 of 0 or 1; at termination that signals separation.
const SEPARATION_ETA: f64 = 25.0;

#[derive(Debug, Error, PartialEq)]
pub enum GlmError {
    #[error("design is rank deficient (column {column} is linearly dependent on earlier columns)")]
    RankDeficient { column: usize },
    #[error("design has {rows} rows but response has {response} entries")]
    LengthMismatch { rows: usize, response: usize },
    #[error("no observations to fit")]
    Empty,
    #[error("logistic response must be 0 or 1, got {0}")]
    InvalidResponse(f64),
    #[error("weights must be finite and non-negative")]
    InvalidWeights,
    #[error(
        "logistic fit separated: fitted probabilities reached 0/1 (max |linear predictor| {max_linear_predictor:.1}, coefficient norm {coefficient_norm:.1})"
    )]
    Separation { max_linear_predictor: f64, coefficient_norm: f64 },
    #[error("logistic fit did not converge in {iterations} iterations (gradient max-norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub family: Family,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Max-norm of the weighted score `X' W (y - mu)` at the returned coefficients.
    pub gradient_norm: f64,
}

impl GlmFit {
    pub fn linear_predictor(&self, design: &DMatrix<f64>) -> Vec<f64> {
        let beta = DVector::from_column_slice(&self.coefficients);
        (design * beta).iter().copied().collect()
    }

    /// Fitted means: probabilities for the logistic family.
    pub fn predict(&self, design: &DMatrix<f64>) -> Vec<f64> {
        let eta = self.linear_predictor(design);
        match self.family {
            Family::Logistic => eta.into_iter().map(expit).collect(),
            Family::Linear => eta,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic_deviance(eta: &[f64], y: &[f64], w: &[f64]) -> f64 {
    -2.0 * eta
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &y), &w)| w * (y * e - softplus(e)))
        .sum::<f64>()
}

fn score_max_norm(design: &DMatrix<f64>, residual: &[f64]) -> f64 {
    let r = DVector::from_column_slice(residual);
    (design.transpose() * r).amax()
}

/// Fits a GLM. Logistic fits run IRLS from zero coefficients with
/// step-halving on deviance increase, stopping when the score max-norm is
/// below [`GRADIENT_TOLERANCE`] or after [`MAX_ITERATIONS`]. Linear fits are
/// weighted least squares.
pub fn fit_glm(
    design: &DMatrix<f64>,
    response: &[f64],
    family: Family,
    weights: Option<&[f64]>,
) -> Result<GlmFit, GlmError> {
    let (n, p) = design.shape();
    if n == 0 {
        return Err(GlmError::Empty);
    }
    if response.len() != n {
        return Err(GlmError::LengthMismatch { rows: n, response: response.len() });
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GlmError::InvalidWeights);
        }
    }
    let w: Vec<f64> = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    match family {
        Family::Linear => {
            let ls = weighted_least_squares(design, response, Some(&w))
                .map_err(|e| GlmError::RankDeficient { column: e.rank_column })?;
            let fit = GlmFit {
                coefficients: ls.beta.iter().copied().collect(),
                family,
                converged: true,
                iterations: 1,
                deviance: 0.0,
                gradient_norm: 0.0,
            };
            let fitted = fit.predict(design);
            let resid: Vec<f64> = (0..n).map(|i| w[i] * (response[i] - fitted[i])).collect();
            let deviance = (0..n).map(|i| w[i] * (response[i] - fitted[i]).powi(2)).sum();
            Ok(GlmFit { deviance, gradient_norm: score_max_norm(design, &resid), ..fit })
        }
        Family::Logistic => {
            if let Some(&bad) = response.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(GlmError::InvalidResponse(bad));
            }
            fit_logistic(design, response, &w, p)
        }
    }
}

fn fit_logistic(design: &DMatrix<f64>, y: &[f64], w: &[f64], p: usize) -> Result<GlmFit, GlmError> {
    let n = y.len();
    let mut beta = DVector::<f64>::zeros(p);
    let mut eta = vec![0.0; n];
    let mut deviance = logistic_deviance(&eta, y, w);
    let mut iterations = 0;
    let mut converged = false;
    let mut gradient_norm;
    let mut working = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid: Vec<f64> = (0..n).map(|i| w[i] * (y[i] - mu[i])).collect();
        gradient_norm = score_max_norm(design, &resid);
        if gradient_norm <= GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        if iterations == MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        for i in 0..n {
            let v = (mu[i] * (1.0 - mu[i])).max(1e-10);
            working[i] = w[i] * v;
            z[i] = eta[i] + (y[i] - mu[i]) / v;
        }
        let ls = weighted_least_squares(design, &z, Some(&working))
            .map_err(|e| GlmError::RankDeficient { column: e.rank_column })?;
        let mut candidate = ls.beta;
        let mut cand_eta: Vec<f64> = (design * &candidate).iter().copied().collect();
        let mut cand_dev = logistic_deviance(&cand_eta, y, w);
        let mut halvings = 0;
        while !(cand_dev <= deviance + 1e-12 * (1.0 + deviance.abs())) && halvings < MAX_HALVINGS {
            candidate = (&candidate + &beta) * 0.5;
            cand_eta = (design * &candidate).iter().copied().collect();
            cand_dev = logistic_deviance(&cand_eta, y, w);
            halvings += 1;
        }
        let step = (&candidate - &beta).amax();
        let stalled = step <= 1e-13 * (1.0 + beta.amax()) || (deviance - cand_dev).abs() <= 1e-15 * deviance.abs();
        beta = candidate;
        eta = cand_eta;
        deviance = cand_dev;
        if stalled {
            // floating-point floor: accept a tiny score even if above the tolerance
            let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
            let resid: Vec<f64> = (0..n).map(|i| w[i] * (y[i] - mu[i])).collect();
            gradient_norm = score_max_norm(design, &resid);
            converged = gradient_norm <= 1e-6;
            break;
        }
    }
    let max_eta = eta
        .iter()
        .zip(w)
        .filter(|(_, &w)| w > 0.0)
        .map(|(e, _)| e.abs())
        .fold(0.0, f64::max);
    if max_eta > SEPARATION_ETA {
        return Err(GlmError::Separation { max_linear_predictor: max_eta, coefficient_norm: beta.norm() });
    }
    if !converged {
        return Err(GlmError::NonConvergence { iterations, gradient_norm });
    }
    Ok(GlmFit {
        coefficients: beta.iter().copied().collect(),
        family: Family::Logistic,
        converged,
        iterations,
        deviance,
        gradient_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intercept_slope(x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] })
    }

    #[test]
    fn saturated_logistic_closed_form() {
        // 1 of 4 successes at x = 0, 3 of 4 at x = 1
        let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let fit = fit_glm(&intercept_slope(&x), &y, Family::Logistic, None).unwrap();
        let intercept = (1.0f64 / 3.0).ln();
        let slope = 3.0f64.ln() - (1.0f64 / 3.0).ln();
        assert!((fit.coefficients[0] - intercept).abs() < 1e-6);
        assert!((fit.coefficients[1] - slope).abs() < 1e-6);
        assert!((fit.coefficients[0] + 1.09861).abs() < 1e-5);
        assert!((fit.coefficients[1] - 2.19722).abs() < 1e-5);
        assert!(fit.converged);
    }

    #[test]
    fn intercept_only_fits_logit_of_mean() {
        let design = DMatrix::from_element(6, 1, 1.0);
        let fit = fit_glm(&design, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], Family::Logistic, None).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        let fit = fit_glm(&design, &[1.0, 1.0, 1.0, 0.0, 1.0, 0.0], Family::Logistic, None).unwrap();
        assert!((expit(fit.coefficients[0]) - 4.0 / 6.0).abs() < 1e-8);
    }

    #[test]
    fn separated_data_is_an_error() {
        let x = [-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0];
        let y: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let err = fit_glm(&intercept_slope(&x), &y, Family::Logistic, None).unwrap_err();
        assert!(matches!(err, GlmError::Separation { .. }), "{err:?}");
    }

    #[test]
    fn rank_deficiency_and_bad_inputs() {
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            fit_glm(&design, &[0.0, 1.0, 1.0], Family::Linear, None),
            Err(GlmError::RankDeficient { .. })
        ));
        assert!(matches!(
            fit_glm(&design, &[0.0, 1.0, 1.0], Family::Logistic, None),
            Err(GlmError::RankDeficient { .. })
        ));
        let design = DMatrix::from_element(3, 1, 1.0);
        assert_eq!(fit_glm(&design, &[0.0, 2.0, 1.0], Family::Logistic, None), Err(GlmError::InvalidResponse(2.0)));
        assert_eq!(
            fit_glm(&design, &[0.0, 1.0, 1.0], Family::Logistic, Some(&[1.0, -1.0, 1.0])),
            Err(GlmError::InvalidWeights)
        );
    }

    #[test]
    fn linear_fit_satisfies_normal_equations() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 3.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 0.5 * v + (v * 7.0).sin()).collect();
        let design = intercept_slope(&x);
        let fit = fit_glm(&design, &y, Family::Linear, None).unwrap();
        let fitted = fit.predict(&design);
        let r: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        assert!(score_max_norm(&design, &r) < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn weighted_logistic_score_vanishes(
            rows in proptest::collection::vec((-2.0f64..2.0, 0.2f64..3.0, 0.0f64..1.0), 30..80),
        ) {
            let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let w: Vec<f64> = rows.iter().map(|r| r.1).collect();
            // noisy labels keep the problem away from separation
            let y: Vec<f64> = rows.iter().map(|r| if r.2 < expit(0.3 + 0.8 * r.0).clamp(0.2, 0.8) { 1.0 } else { 0.0 }).collect();
            prop_assume!(y.iter().any(|&v| v == 1.0) && y.iter().any(|&v| v == 0.0));
            let design = intercept_slope(&x);
            if let Ok(fit) = fit_glm(&design, &y, Family::Logistic, Some(&w)) {
                let mu = fit.predict(&design);
                let r: Vec<f64> = (0..y.len()).map(|i| w[i] * (y[i] - mu[i])).collect();
                prop_assert!(score_max_norm(&design, &r) <= 1e-6);
            }
        }
    }
}
