//! Polynomial and B-spline bases for one real covariate.
//!
//! A [`BasisConfig`] is what a run configuration asks for ("order-3 spline
//! with a knot at the median"); [`BasisConfig::resolve`] turns it into a
//! concrete [`BasisSpec`] against observed values. Specs evaluate any `x`,
//! clamping values outside the boundary knots.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::quantile_type7;

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("cannot build a basis from no values")]
    Empty,
    #[error("interior knots must be strictly increasing")]
    UnsortedKnots,
    #[error("interior knot {0} is not strictly inside the boundary knots")]
    KnotOutsideBoundary(f64),
    #[error("boundary knots must satisfy low < high, got [{0}, {1}]")]
    InvalidBoundary(f64, f64),
    #[error("spline order must be at least 1")]
    InvalidOrder,
    #[error("polynomial degree must be at least 1")]
    InvalidDegree,
    #[error("non-finite value {0} in basis input")]
    NonFinite(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    /// The raw value.
    Identity,
    /// Powers `x, x^2, ..., x^degree`.
    Polynomial { degree: usize },
    /// Clamped B-splines: each boundary knot repeated `order` times.
    Bspline {
        order: usize,
        interior_knots: Vec<f64>,
        boundary_knots: [f64; 2],
    },
}

/// A fully specified basis.
///
/// `include_intercept` says whether the block spans constants on its own:
/// for powers it prepends the column of ones, for B-splines it keeps the
/// first basis function (the full spline basis already sums to one). Blocks
/// combined under a shared intercept column use `include_intercept = false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(flatten)]
    pub kind: BasisKind,
    pub include_intercept: bool,
}

/// `[1, x, x^2, ..., x^degree]`.
pub fn polynomial_row(x: f64, degree: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(degree + 1);
    let mut power = 1.0;
    for _ in 0..=degree {
        row.push(power);
        power *= x;
    }
    row
}

fn check_bspline(order: usize, interior: &[f64], boundary: [f64; 2]) -> Result<(), BasisError> {
    if order < 1 {
        return Err(BasisError::InvalidOrder);
    }
    if !(boundary[0] < boundary[1]) {
        return Err(BasisError::InvalidBoundary(boundary[0], boundary[1]));
    }
    if interior.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(BasisError::UnsortedKnots);
    }
    if let Some(&k) = interior.iter().find(|&&k| !(k > boundary[0] && k < boundary[1])) {
        return Err(BasisError::KnotOutsideBoundary(k));
    }
    Ok(())
}

/// Full clamped B-spline basis of the given order at `x` (length
/// `interior.len() + order`), via the Cox-de Boor triangle. `x` outside
/// the boundary is clamped to it.
pub fn bspline_row(x: f64, order: usize, interior: &[f64], boundary: [f64; 2]) -> Result<Vec<f64>, BasisError> {
    check_bspline(order, interior, boundary)?;
    Ok(bspline_row_unchecked(x, order, interior, boundary))
}

fn bspline_row_unchecked(x: f64, order: usize, interior: &[f64], boundary: [f64; 2]) -> Vec<f64> {
    let degree = order - 1;
    let n_basis = interior.len() + order;
    let mut knots = Vec::with_capacity(n_basis + order);
    knots.extend(std::iter::repeat_n(boundary[0], order));
    knots.extend_from_slice(interior);
    knots.extend(std::iter::repeat_n(boundary[1], order));

    let x = x.clamp(boundary[0], boundary[1]);
    // last span whose left knot is <= x; the right boundary belongs to the last span
    let mut span = degree;
    while span + 1 < n_basis && knots[span + 1] <= x {
        span += 1;
    }

    let mut local = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    local[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = local[r] / (right[r + 1] + left[j - r]);
            local[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        local[j] = saved;
    }
    let mut row = vec![0.0; n_basis];
    row[span - degree..=span].copy_from_slice(&local);
    row
}

impl BasisSpec {
    pub fn validate(&self) -> Result<(), BasisError> {
        match &self.kind {
            BasisKind::Identity => Ok(()),
            BasisKind::Polynomial { degree } if *degree < 1 => Err(BasisError::InvalidDegree),
            BasisKind::Polynomial { .. } => Ok(()),
            BasisKind::Bspline { order, interior_knots, boundary_knots } => {
                check_bspline(*order, interior_knots, *boundary_knots)
            }
        }
    }

    /// Number of columns produced.
    pub fn width(&self) -> usize {
        let full = match &self.kind {
            BasisKind::Identity => 2,
            BasisKind::Polynomial { degree } => degree + 1,
            BasisKind::Bspline { order, interior_knots, .. } => interior_knots.len() + order,
        };
        if self.include_intercept {
            full
        } else {
            full - 1
        }
    }

    /// True when `x` lies outside the boundary knots and would be clamped.
    pub fn clamps(&self, x: f64) -> bool {
        match &self.kind {
            BasisKind::Bspline { boundary_knots, .. } => x < boundary_knots[0] || x > boundary_knots[1],
            _ => false,
        }
    }

    /// Basis row at `x`. Assumes the spec is valid.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let mut full = match &self.kind {
            BasisKind::Identity => vec![1.0, x],
            BasisKind::Polynomial { degree } => polynomial_row(x, *degree),
            BasisKind::Bspline { order, interior_knots, boundary_knots } => {
                bspline_row_unchecked(x, *order, interior_knots, *boundary_knots)
            }
        };
        if !self.include_intercept {
            full.remove(0);
        }
        full
    }

    /// Design matrix with one row per value, and the number of clamped values.
    pub fn design(&self, values: &[f64]) -> Result<(DMatrix<f64>, usize), BasisError> {
        self.validate()?;
        if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
            return Err(BasisError::NonFinite(v));
        }
        let width = self.width();
        let mut matrix = DMatrix::zeros(values.len(), width);
        let mut clamped = 0;
        for (i, &x) in values.iter().enumerate() {
            if self.clamps(x) {
                clamped += 1;
            }
            for (j, v) in self.row(x).into_iter().enumerate() {
                matrix[(i, j)] = v;
            }
        }
        Ok((matrix, clamped))
    }
}

/// Where interior knots go when a spline basis is resolved against data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    /// One knot at the empirical median.
    Median,
    /// `count` knots at the evenly spaced empirical quantiles `j / (count + 1)`.
    Quantiles(usize),
    /// Explicit knots.
    At(Vec<f64>),
}

fn default_order() -> usize {
    3
}

fn default_knots() -> KnotRule {
    KnotRule::Median
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisConfigKind {
    Identity,
    Polynomial {
        degree: usize,
    },
    Bspline {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_knots")]
        knots: KnotRule,
        /// Defaults to the range of the values the basis is resolved against.
        #[serde(default)]
        boundary: Option<[f64; 2]>,
    },
}

/// A basis request, resolved against data by [`BasisConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    #[serde(flatten)]
    pub kind: BasisConfigKind,
    #[serde(default = "default_true")]
    pub include_intercept: bool,
}

impl Default for BasisConfig {
    /// Order-3 (quadratic) B-spline with one interior knot at the median.
    fn default() -> Self {
        BasisConfig {
            kind: BasisConfigKind::Bspline { order: 3, knots: KnotRule::Median, boundary: None },
            include_intercept: true,
        }
    }
}

impl BasisConfig {
    pub fn polynomial(degree: usize) -> Self {
        BasisConfig { kind: BasisConfigKind::Polynomial { degree }, include_intercept: true }
    }

    pub fn identity() -> Self {
        BasisConfig { kind: BasisConfigKind::Identity, include_intercept: true }
    }

    pub fn bspline(order: usize, knots: KnotRule) -> Self {
        BasisConfig { kind: BasisConfigKind::Bspline { order, knots, boundary: None }, include_intercept: true }
    }

    pub fn with_intercept(mut self, include_intercept: bool) -> Self {
        self.include_intercept = include_intercept;
        self
    }

    /// Fixes knots and boundaries from `values`. A constant column gets
    /// boundaries widened by 0.5 either side so the spec stays valid.
    pub fn resolve(&self, values: &[f64]) -> Result<BasisSpec, BasisError> {
        if values.is_empty() {
            return Err(BasisError::Empty);
        }
        if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
            return Err(BasisError::NonFinite(v));
        }
        let kind = match &self.kind {
            BasisConfigKind::Identity => BasisKind::Identity,
            BasisConfigKind::Polynomial { degree } => BasisKind::Polynomial { degree: *degree },
            BasisConfigKind::Bspline { order, knots, boundary } => {
                let boundary_knots = match boundary {
                    Some(b) => *b,
                    None => {
                        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        if lo == hi {
                            [lo - 0.5, hi + 0.5]
                        } else {
                            [lo, hi]
                        }
                    }
                };
                let interior_knots = match knots {
                    KnotRule::Median => vec![quantile_type7(values, 0.5)],
                    KnotRule::Quantiles(count) => (1..=*count)
                        .map(|j| quantile_type7(values, j as f64 / (*count as f64 + 1.0)))
                        .collect(),
                    KnotRule::At(k) => k.clone(),
                };
                BasisKind::Bspline { order: *order, interior_knots, boundary_knots }
            }
        };
        let spec = BasisSpec { kind, include_intercept: self.include_intercept };
        spec.validate()?;
        Ok(spec)
    }
}

/// A design matrix together with the resolved spec that produced it.
#[derive(Debug, Clone)]
pub struct Design {
    pub spec: BasisSpec,
    pub matrix: DMatrix<f64>,
    pub clamped: usize,
}

/// Resolves `config` against `values` and evaluates the basis at each value.
pub fn build_design(values: &[f64], config: &BasisConfig) -> Result<Design, BasisError> {
    let spec = config.resolve(values)?;
    let (matrix, clamped) = spec.design(values)?;
    Ok(Design { spec, matrix, clamped })
}
