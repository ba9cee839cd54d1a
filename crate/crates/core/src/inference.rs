//! Pointwise intervals and multiplier-bootstrap uniform bands.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::BasisConfig;
use crate::linalg::weighted_least_squares;
use crate::rng::{stream_rng, Stream};
use crate::second_stage::{evaluate_grid, fit_cate, CateFit, GridEvaluation, SecondStageError, SubgroupEstimate};
use crate::stats::normal_quantile;

pub const MIN_REPLICATES: usize = 100;
/// Replicates may be redrawn after a rank-deficient refit; more than this
/// fraction of redraws is an error.
pub const MAX_REDRAW_FRACTION: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("at least {MIN_REPLICATES} bootstrap replicates required, got {0}")]
    TooFewReplicates(usize),
    #[error("standard error is zero at grid point {x} (index {index}); t-statistics undefined")]
    DegenerateSe { index: usize, x: f64 },
    #[error("{redrawn} of {replicates} bootstrap refits were rank deficient")]
    RankDeficientReplicates { redrawn: usize, replicates: usize },
    #[error("only {succeeded} of {replicates} bootstrap standard-error replicates succeeded")]
    BootstrapSeFailed { succeeded: usize, replicates: usize },
    #[error("{what}: expected {expected} values, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    SecondStage(#[from] SecondStageError),
}

/// Multiplier distribution for bootstrap refits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Independent standard exponential weights.
    #[default]
    Exponential,
    /// Every weight equal to one. Degenerate: replicates reproduce the
    /// original fit, so the critical value is zero. For checking only.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSettings {
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub weights: WeightScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformBand {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub alpha: f64,
    /// `z_{1 - alpha/2}`.
    pub z: f64,
    pub pointwise_low: Vec<f64>,
    pub pointwise_high: Vec<f64>,
    pub critical_value: f64,
    pub band_low: Vec<f64>,
    pub band_high: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    /// Replicates redrawn after a rank-deficient refit.
    pub redrawn: usize,
    /// Whether the critical value is at least `z`, so the band contains
    /// every pointwise interval.
    pub band_contains_pointwise: bool,
}

fn check_alpha(alpha: f64) -> Result<(), InferenceError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(InferenceError::InvalidAlpha(alpha))
    }
}

/// `estimate -/+ z_{1 - alpha/2} se` at each grid point.
pub fn pointwise_interval(ge: &GridEvaluation, alpha: f64) -> Result<(Vec<f64>, Vec<f64>), InferenceError> {
    check_alpha(alpha)?;
    let z = normal_quantile(1.0 - alpha / 2.0);
    let low = ge.estimate.iter().zip(&ge.se).map(|(e, s)| e - z * s).collect();
    let high = ge.estimate.iter().zip(&ge.se).map(|(e, s)| e + z * s).collect();
    Ok((low, high))
}

/// The `ceil(q B)`-th smallest of `values` (1-based). The small slack in
/// the ceiling keeps `q B` values that are integers up to rounding, such as
/// `0.95 * 100`, from moving up one order statistic.
///
/// # Panics
/// If `values` is empty or `q` is outside `(0, 1)`.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "empirical quantile of no values");
    assert!(q > 0.0 && q < 1.0, "quantile level must lie in (0, 1)");
    let b = values.len();
    let rank = ((q * b as f64) - 1e-9).ceil().clamp(1.0, b as f64) as usize;
    let mut sorted = values.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *kth
}

/// Fits the second stage on `values ~ basis(modifiers)`, evaluates it on
/// `grid`, and builds the multiplier-bootstrap band around it.
pub fn multiplier_band(
    values: &[f64],
    modifiers: &[f64],
    config: &BasisConfig,
    grid: &[f64],
    settings: &BandSettings,
) -> Result<UniformBand, InferenceError> {
    let fit = fit_cate(values, modifiers, config, None)?;
    let ge = evaluate_grid(&fit, grid)?;
    multiplier_band_for_fit(values, modifiers, &fit, &ge, settings)
}

/// Uniform band for an existing fit. Each replicate `b` draws `n` weights
/// from stream `Bootstrap(b)` of `settings.seed`, refits the weighted second
/// stage on the same basis, and records the largest `|delta_b - delta| / se`
/// over the grid using the standard errors in `ge`. The critical value is
/// the empirical `1 - alpha` quantile of those maxima.
pub fn multiplier_band_for_fit(
    values: &[f64],
    modifiers: &[f64],
    fit: &CateFit,
    ge: &GridEvaluation,
    settings: &BandSettings,
) -> Result<UniformBand, InferenceError> {
    check_alpha(settings.alpha)?;
    if settings.replicates < MIN_REPLICATES {
        return Err(InferenceError::TooFewReplicates(settings.replicates));
    }
    if settings.replicates < 1000 {
        log::warn!("{} bootstrap replicates; at least 1000 recommended", settings.replicates);
    }
    if modifiers.len() != values.len() {
        return Err(InferenceError::LengthMismatch { what: "modifiers", expected: values.len(), got: modifiers.len() });
    }
    if let Some(index) = ge.se.iter().position(|&s| !(s > 0.0)) {
        return Err(InferenceError::DegenerateSe { index, x: ge.grid[index] });
    }
    let n = values.len();
    let (design, _) = fit.basis.design(modifiers).map_err(SecondStageError::from)?;
    let (grid_basis, _) = fit.basis.design(&ge.grid).map_err(SecondStageError::from)?;
    let max_redraws = (MAX_REDRAW_FRACTION * settings.replicates as f64).floor() as usize;

    let outcomes: Vec<(f64, usize)> = (0..settings.replicates as u64)
        .into_par_iter()
        .map(|b| replicate_t_max(values, &design, &grid_basis, ge, settings, b, n, max_redraws))
        .collect();
    let redrawn: usize = outcomes.iter().map(|o| o.1).sum();
    if redrawn > max_redraws || outcomes.iter().any(|o| o.0.is_nan()) {
        return Err(InferenceError::RankDeficientReplicates { redrawn, replicates: settings.replicates });
    }
    let t_max: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    Ok(assemble_band(ge, settings, &t_max, redrawn))
}

/// Uniform band over the levels of a discrete modifier. Replicate `b`
/// replaces each subgroup mean with its multiplier-weighted mean.
pub fn subgroup_band(
    values: &[f64],
    levels: &[f64],
    estimates: &[SubgroupEstimate],
    settings: &BandSettings,
) -> Result<UniformBand, InferenceError> {
    check_alpha(settings.alpha)?;
    if settings.replicates < MIN_REPLICATES {
        return Err(InferenceError::TooFewReplicates(settings.replicates));
    }
    if levels.len() != values.len() {
        return Err(InferenceError::LengthMismatch { what: "levels", expected: values.len(), got: levels.len() });
    }
    let ge = GridEvaluation {
        grid: estimates.iter().map(|e| e.level).collect(),
        estimate: estimates.iter().map(|e| e.estimate).collect(),
        se: estimates.iter().map(|e| e.se).collect(),
    };
    if let Some(index) = ge.se.iter().position(|&s| !(s > 0.0)) {
        return Err(InferenceError::DegenerateSe { index, x: ge.grid[index] });
    }
    let group: Vec<usize> = levels
        .iter()
        .map(|l| ge.grid.iter().position(|g| g == l).expect("every level has an estimate"))
        .collect();
    let k = ge.grid.len();
    let t_max: Vec<f64> = (0..settings.replicates as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(settings.seed, Stream::Bootstrap(b));
            let (mut num, mut den) = (vec![0.0; k], vec![0.0; k]);
            for (v, &g) in values.iter().zip(&group) {
                let w: f64 = match settings.weights {
                    WeightScheme::Exponential => rng.sample(Exp1),
                    WeightScheme::Unit => 1.0,
                };
                num[g] += w * v;
                den[g] += w;
            }
            (0..k).map(|j| ((num[j] / den[j] - ge.estimate[j]) / ge.se[j]).abs()).fold(0.0, f64::max)
        })
        .collect();
    Ok(assemble_band(&ge, settings, &t_max, 0))
}

fn assemble_band(ge: &GridEvaluation, settings: &BandSettings, t_max: &[f64], redrawn: usize) -> UniformBand {
    let critical_value = empirical_quantile(t_max, 1.0 - settings.alpha);
    let z = normal_quantile(1.0 - settings.alpha / 2.0);
    let band_contains_pointwise = critical_value >= z;
    if !band_contains_pointwise {
        log::warn!("uniform critical value {critical_value:.4} is below z = {z:.4}");
    }
    let offset = |c: f64, sign: f64| -> Vec<f64> {
        ge.estimate.iter().zip(&ge.se).map(|(e, s)| e + sign * c * s).collect()
    };
    UniformBand {
        grid: ge.grid.clone(),
        estimate: ge.estimate.clone(),
        se: ge.se.clone(),
        alpha: settings.alpha,
        z,
        pointwise_low: offset(z, -1.0),
        pointwise_high: offset(z, 1.0),
        critical_value,
        band_low: offset(critical_value, -1.0),
        band_high: offset(critical_value, 1.0),
        replicates: settings.replicates,
        seed: settings.seed,
        redrawn,
        band_contains_pointwise,
    }
}

/// Returns `(t_max, redraws)`; `t_max` is NaN when the redraw budget ran out.
#[allow(clippy::too_many_arguments)]
fn replicate_t_max(
    values: &[f64],
    design: &DMatrix<f64>,
    grid_basis: &DMatrix<f64>,
    ge: &GridEvaluation,
    settings: &BandSettings,
    b: u64,
    n: usize,
    max_redraws: usize,
) -> (f64, usize) {
    let mut rng = stream_rng(settings.seed, Stream::Bootstrap(b));
    let mut redraws = 0;
    loop {
        let weights: Vec<f64> = match settings.weights {
            WeightScheme::Exponential => (0..n).map(|_| rng.sample(Exp1)).collect(),
            WeightScheme::Unit => vec![1.0; n],
        };
        match weighted_least_squares(design, values, Some(&weights)) {
            Ok(ls) => {
                let delta: DVector<f64> = grid_basis * &ls.beta;
                let t_max = delta
                    .iter()
                    .zip(&ge.estimate)
                    .zip(&ge.se)
                    .map(|((d, e), s)| ((d - e) / s).abs())
                    .fold(0.0, f64::max);
                return (t_max, redraws);
            }
            Err(_) => {
                redraws += 1;
                if redraws > max_redraws || settings.weights == WeightScheme::Unit {
                    return (f64::NAN, redraws);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::second_stage::fit_cate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let phi = x.iter().map(|v| 0.3 * (v - 0.5) + rng.random::<f64>() * 2.0 - 1.0).collect();
        (phi, x)
    }

    #[test]
    fn pointwise_examples() {
        let ge = GridEvaluation { grid: vec![0.0], estimate: vec![0.2], se: vec![0.1] };
        let (lo, hi) = pointwise_interval(&ge, 0.05).unwrap();
        assert!((lo[0] - 0.00401).abs() < 1e-5 && (hi[0] - 0.39599).abs() < 1e-5);
        assert!((lo[0] - (0.2 - 1.959964 * 0.1)).abs() < 1e-7);

        let ge = GridEvaluation { grid: vec![0.0], estimate: vec![0.2], se: vec![0.0] };
        assert_eq!(pointwise_interval(&ge, 0.05).unwrap(), (vec![0.2], vec![0.2]));

        let ge = GridEvaluation { grid: vec![0.0], estimate: vec![0.0], se: vec![1.0] };
        let (lo, hi) = pointwise_interval(&ge, 0.32).unwrap();
        assert!(((hi[0] - lo[0]) / 2.0 - 1.0).abs() < 0.006);
        assert!((hi[0] - 0.994457883209753).abs() < 1e-8);

        assert_eq!(pointwise_interval(&ge, 1.5).unwrap_err(), InferenceError::InvalidAlpha(1.5));
    }

    #[test]
    fn quantile_examples() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_quantile(&values, 0.95), 95.0);
        assert_eq!(empirical_quantile(&[2.5; 7], 0.3), 2.5);
        assert_eq!(empirical_quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
    }

    #[test]
    fn quantile_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for len in [1usize, 2, 7, 200, 1000] {
            let values: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 10.0 - 3.0).collect();
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for q in [0.01, 0.25, 0.5, 0.9, 0.95, 0.99] {
                // smallest k with k / len >= q
                let k = (1..=len).find(|&k| k as f64 / len as f64 >= q - 1e-12).unwrap();
                assert_eq!(empirical_quantile(&values, q), sorted[k - 1]);
            }
        }
    }

    #[test]
    fn unit_weights_collapse_the_band() {
        let (phi, x) = noisy(300, 1);
        let grid: Vec<f64> = (0..=20).map(|i| 0.05 + i as f64 * 0.045).collect();
        let settings = BandSettings { alpha: 0.05, replicates: 100, seed: 4, weights: WeightScheme::Unit };
        let band = multiplier_band(&phi, &x, &BasisConfig::default(), &grid, &settings).unwrap();
        assert_eq!(band.critical_value, 0.0);
        assert_eq!(band.band_low, band.estimate);
        assert_eq!(band.band_high, band.estimate);
        assert!(!band.band_contains_pointwise);
    }

    #[test]
    fn band_is_deterministic_and_nested_in_alpha() {
        let (phi, x) = noisy(400, 2);
        let grid: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        let s95 = BandSettings { alpha: 0.05, replicates: 400, seed: 9, weights: WeightScheme::Exponential };
        let a = multiplier_band(&phi, &x, &BasisConfig::default(), &grid, &s95).unwrap();
        let b = multiplier_band(&phi, &x, &BasisConfig::default(), &grid, &s95).unwrap();
        assert_eq!(a, b);
        let s90 = BandSettings { alpha: 0.10, ..s95 };
        let c = multiplier_band(&phi, &x, &BasisConfig::default(), &grid, &s90).unwrap();
        assert!(a.critical_value >= c.critical_value);
        for i in 0..grid.len() {
            assert!(a.band_low[i] <= c.band_low[i] && c.band_high[i] <= a.band_high[i]);
        }
        assert!(a.band_contains_pointwise);
        for i in 0..grid.len() {
            assert!(a.band_low[i] <= a.pointwise_low[i]);
            assert!(a.pointwise_low[i] <= a.estimate[i] && a.estimate[i] <= a.pointwise_high[i]);
            assert!(a.pointwise_high[i] <= a.band_high[i]);
            let width = a.band_high[i] - a.band_low[i];
            assert!((width - 2.0 * a.critical_value * a.se[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn subgroup_band_brackets_pointwise() {
        let (phi, x) = noisy(600, 5);
        let levels: Vec<f64> = x.iter().map(|v| (v * 3.0).floor()).collect();
        let est = crate::second_stage::subgroup_cate(&phi, &levels).unwrap();
        let s = BandSettings { alpha: 0.05, replicates: 500, seed: 2, weights: WeightScheme::Exponential };
        let band = subgroup_band(&phi, &levels, &est, &s).unwrap();
        assert_eq!(band.grid, vec![0.0, 1.0, 2.0]);
        assert!(band.critical_value > band.z && band.critical_value < 3.5);
        let unit = subgroup_band(&phi, &levels, &est, &BandSettings { weights: WeightScheme::Unit, ..s }).unwrap();
        assert!(unit.critical_value < 1e-12);
    }

    #[test]
    fn exponential_weights_average_near_one() {
        let n = 200;
        let replicates = 1000;
        let within = (0..replicates as u64)
            .filter(|&b| {
                let mut rng = stream_rng(3, Stream::Bootstrap(b));
                let m = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).sum::<f64>() / n as f64;
                m > 0.8 && m < 1.2
            })
            .count();
        assert!(within as f64 >= 0.99 * replicates as f64, "{within}");
    }

    #[test]
    fn band_errors() {
        let (phi, x) = noisy(200, 3);
        let grid = [0.2, 0.5];
        let s = BandSettings { alpha: 0.05, replicates: 50, seed: 1, weights: WeightScheme::Exponential };
        assert_eq!(
            multiplier_band(&phi, &x, &BasisConfig::default(), &grid, &s).unwrap_err(),
            InferenceError::TooFewReplicates(50)
        );
        let fit = fit_cate(&phi, &x, &BasisConfig::default(), None).unwrap();
        let ge = GridEvaluation { grid: vec![0.2, 0.5], estimate: vec![0.0, 0.0], se: vec![0.1, 0.0] };
        let s = BandSettings { replicates: 100, ..s };
        assert!(matches!(
            multiplier_band_for_fit(&phi, &x, &fit, &ge, &s),
            Err(InferenceError::DegenerateSe { index: 1, .. })
        ));
    }

    #[test]
    fn constant_phi_on_two_distinct_points_triggers_redraws() {
        // Two support points with a 3-column basis: every refit is rank deficient.
        let x = vec![0.0, 1.0, 0.0, 1.0];
        let phi = vec![0.0, 1.0, 0.5, 0.2];
        let fit = fit_cate(&phi, &x, &BasisConfig::polynomial(1), None).unwrap();
        let mut wide = fit.clone();
        wide.basis = crate::basis::BasisConfig::polynomial(2).resolve(&x).unwrap();
        let ge = GridEvaluation { grid: vec![0.0, 1.0], estimate: vec![0.0, 0.0], se: vec![1.0, 1.0] };
        let s = BandSettings { alpha: 0.05, replicates: 100, seed: 1, weights: WeightScheme::Exponential };
        assert!(matches!(
            multiplier_band_for_fit(&phi, &x, &wide, &ge, &s),
            Err(InferenceError::RankDeficientReplicates { .. })
        ));
    }
}
