use nalgebra::{DMatrix, DVector};

use crate::error::{FmeError, Result};

/// `sign(u) * max(|u| - t, 0)`.
pub fn soft_threshold(u: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

/// Solves the symmetric positive semidefinite system `a x = b`, adding a
/// growing ridge when the Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let d = a.nrows();
    let scale = (0..d).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut eps = 1e-12;
    while eps < 1.0 {
        let mut j = a.clone();
        for i in 0..d {
            j[(i, i)] += eps * scale;
        }
        if let Some(ch) = j.cholesky() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        eps *= 100.0;
    }
    None
}

/// `argmin_b sum_i w_i (y_i - X_i b)^2`.
pub fn weighted_ols(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.nrows();
    if y.len() != n || w.len() != n {
        return Err(FmeError::InvalidInput(format!(
            "weighted_ols: X has {n} rows, y has {}, w has {}",
            y.len(),
            w.len()
        )));
    }
    if w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(FmeError::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = w.sum();
    if total <= 0.0 {
        return Err(FmeError::EmptyComponent("all regression weights are zero".into()));
    }
    let d = x.ncols();
    let mut xtwx = DMatrix::zeros(d, d);
    let mut xtwy = DVector::zeros(d);
    for i in 0..n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..d {
            let xa = wi * row[a];
            xtwy[a] += xa * y[i];
            for b in a..d {
                xtwx[(a, b)] += xa * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    solve_spd(&xtwx, &xtwy)
        .ok_or_else(|| FmeError::InvalidInput("weighted normal equations are not solvable".into()))
}

/// Weighted least squares with an unpenalized intercept prepended to `x`.
/// Returns `(intercept, coefficients)`.
pub fn weighted_ols_intercept(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let aug = x.clone().insert_column(0, 1.0);
    let b = weighted_ols(&aug, y, w)?;
    Ok((b[0], b.rows(1, x.ncols()).into_owned()))
}
