use nalgebra::{DMatrix, DVector};

/// Relative pivot size below which a column is treated as linearly dependent.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RankDeficient {
    pub rank_column: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LeastSquares {
    pub beta: DVector<f64>,
    /// `(X' W X)^{-1}`.
    pub gram_inverse: DMatrix<f64>,
}

/// Weighted least squares through a Householder QR of `sqrt(W) X` with
/// columns scaled to unit norm, so the rank check does not depend on units.
pub(crate) fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
) -> Result<LeastSquares, RankDeficient> {
    let (n, p) = x.shape();
    if n < p || p == 0 {
        return Err(RankDeficient { rank_column: n.min(p) });
    }
    let mut xw = x.clone();
    let mut yw = DVector::from_column_slice(y);
    if let Some(w) = weights {
        for i in 0..n {
            let s = w[i].sqrt();
            yw[i] *= s;
            for j in 0..p {
                xw[(i, j)] *= s;
            }
        }
    }
    let mut scale = vec![0.0; p];
    for (j, sc) in scale.iter_mut().enumerate() {
        let norm = xw.column(j).norm();
        if norm == 0.0 {
            return Err(RankDeficient { rank_column: j });
        }
        *sc = norm;
        xw.column_mut(j).unscale_mut(norm);
    }
    let qr = xw.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    for j in 0..p {
        if r[(j, j)].abs() <= RANK_TOL * max_diag {
            return Err(RankDeficient { rank_column: j });
        }
    }
    qr.q_tr_mul(&mut yw);
    let qty = yw.rows(0, p).into_owned();
    let beta_scaled = r
        .solve_upper_triangular(&qty)
        .ok_or(RankDeficient { rank_column: p - 1 })?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or(RankDeficient { rank_column: p - 1 })?;
    let mut gram_inverse = &r_inv * r_inv.transpose();
    let mut beta = beta_scaled;
    for j in 0..p {
        beta[j] /= scale[j];
        for k in 0..p {
            gram_inverse[(j, k)] /= scale[j] * scale[k];
        }
    }
    Ok(LeastSquares { beta, gram_inverse })
}

/// `A^{-1} (sum_i w_i^2 r_i^2 x_i x_i') A^{-1}` with `A = X' W X` (HC0).
pub(crate) fn sandwich_hc0(
    x: &DMatrix<f64>,
    residuals: &[f64],
    weights: Option<&[f64]>,
    gram_inverse: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let s = w * w * residuals[i] * residuals[i];
        if s == 0.0 {
            continue;
        }
        for j in 0..p {
            let xj = x[(i, j)] * s;
            for k in j..p {
                meat[(j, k)] += xj * x[(i, k)];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            meat[(j, k)] = meat[(k, j)];
        }
    }
    let mut cov = gram_inverse * meat * gram_inverse;
    // exact symmetry
    for j in 0..p {
        for k in 0..j {
            let avg = 0.5 * (cov[(j, k)] + cov[(k, j)]);
            cov[(j, k)] = avg;
            cov[(k, j)] = avg;
        }
    }
    cov
}
