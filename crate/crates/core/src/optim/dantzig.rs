//! Dantzig-selector linear programs with linear equality constraints on the
//! coefficient vector.

use nalgebra::{DMatrix, DVector};

use crate::error::{FmeError, Result};

use super::lp::{solve_lp, LinearProgram, LpStatus};

/// LP for `min ||Omega w||_1  s.t.  |X^T (c - X w)| <= bound,  A w = 0`, in
/// split variables `z = (w+, w-)`.
pub fn dantzig_lp_build(
    xw: &DMatrix<f64>,
    cw: &DVector<f64>,
    omega: &[f64],
    constraint: Option<&DMatrix<f64>>,
    bound: f64,
) -> Result<LinearProgram> {
    let (n, d) = xw.shape();
    if cw.len() != n || omega.len() != d {
        return Err(FmeError::InvalidInput(format!(
            "Dantzig LP: design is {n}x{d}, response has {}, weights have {}",
            cw.len(),
            omega.len()
        )));
    }
    if let Some(a) = constraint {
        if a.ncols() != d {
            return Err(FmeError::InvalidInput(format!(
                "Dantzig LP: constraint has {} columns, expected {d}",
                a.ncols()
            )));
        }
    }
    if !(bound >= 0.0) {
        return Err(FmeError::InvalidInput("Dantzig bound must be non-negative".into()));
    }
    let g = xw.tr_mul(xw);
    let h = xw.tr_mul(cw);
    let mut a_ub = DMatrix::zeros(2 * d, 2 * d);
    a_ub.view_mut((0, 0), (d, d)).copy_from(&g);
    a_ub.view_mut((0, d), (d, d)).copy_from(&(-&g));
    a_ub.view_mut((d, 0), (d, d)).copy_from(&(-&g));
    a_ub.view_mut((d, d), (d, d)).copy_from(&g);
    let mut b_ub = Vec::with_capacity(2 * d);
    b_ub.extend(h.iter().map(|v| bound + v));
    b_ub.extend(h.iter().map(|v| bound - v));
    let mut objective = omega.to_vec();
    objective.extend_from_slice(omega);
    let mut lp = LinearProgram::new(objective).with_ub(a_ub, b_ub);
    if let Some(a) = constraint {
        let c = a.nrows();
        let mut a_eq = DMatrix::zeros(c, 2 * d);
        a_eq.view_mut((0, 0), (c, d)).copy_from(a);
        a_eq.view_mut((0, d), (c, d)).copy_from(&(-a));
        lp = lp.with_eq(a_eq, vec![0.0; c]);
    }
    Ok(lp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DantzigFit {
    /// `w = w+ - w-`.
    pub coef: DVector<f64>,
    /// Bound actually used, after any feasibility relaxation.
    pub bound: f64,
    pub relaxations: usize,
}

/// Solves the Dantzig LP, relaxing an infeasible bound by a factor 1.5 up to
/// ten times.
pub fn dantzig_select(
    xw: &DMatrix<f64>,
    cw: &DVector<f64>,
    omega: &[f64],
    constraint: Option<&DMatrix<f64>>,
    bound: f64,
) -> Result<DantzigFit> {
    let d = xw.ncols();
    let mut b = bound;
    for relaxations in 0..=10 {
        let lp = dantzig_lp_build(xw, cw, omega, constraint, b)?;
        let sol = solve_lp(&lp)?;
        match sol.status {
            LpStatus::Optimal => {
                let coef = DVector::from_fn(d, |j, _| sol.z[j] - sol.z[d + j]);
                if relaxations > 0 {
                    log::warn!("Dantzig bound relaxed from {bound:.4e} to {b:.4e} to reach feasibility");
                }
                return Ok(DantzigFit {
                    coef,
                    bound: b,
                    relaxations,
                });
            }
            LpStatus::Infeasible => b *= 1.5,
            other => {
                return Err(FmeError::GatingUpdate(format!(
                    "Dantzig LP ended with status {other:?}"
                )))
            }
        }
    }
    Err(FmeError::GatingUpdate(format!(
        "Dantzig LP infeasible after relaxing the bound to {b:.4e}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::wls::soft_threshold;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_design_is_soft_thresholding() {
        // X^T X = I: the Dantzig solution is soft-thresholding of X^T c
        let x = DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 0.5, -0.5, 0.5, 0.5, 0.5, -0.5]);
        let c = DVector::from_vec(vec![3.0, 1.0, 2.0, -1.0]);
        let h = x.tr_mul(&c);
        let fit = dantzig_select(&x, &c, &[1.0, 1.0], None, 0.7).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(fit.coef[j], soft_threshold(h[j], 0.7), epsilon = 1e-10);
        }
        let one = DMatrix::from_element(1, 1, 2.0);
        let fit = dantzig_select(&one, &DVector::from_element(1, 1.0), &[1.0], None, 0.5).unwrap();
        // |2 (1 - 2 w)| <= 0.5 -> smallest |w| is 0.375
        assert_abs_diff_eq!(fit.coef[0], 0.375, epsilon = 1e-12);
    }

    #[test]
    fn zero_response_gives_zero() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 1.0, 1.0]);
        let fit = dantzig_select(&x, &DVector::zeros(3), &[1.0, 1.0], None, 0.1).unwrap();
        assert!(fit.coef.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unweighted_intercept_is_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let c = DVector::from_fn(n, |i, _| 4.0 + x[(i, 1)]);
        let free = dantzig_select(&x, &c, &[0.0, 1.0, 1.0], None, 1.0).unwrap();
        let pen = dantzig_select(&x, &c, &[1.0, 1.0, 1.0], None, 1.0).unwrap();
        assert!(free.coef[0].abs() > pen.coef[0].abs() - 1e-9);
        assert!((free.coef[0] - 4.0).abs() < 0.2);
        let res = &c - &x * &free.coef;
        assert!(x.tr_mul(&res).amax() <= 1.0 + 1e-7);
    }

    #[test]
    fn equality_constraints_and_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let x = DMatrix::from_fn(n, 5, |_, j| if j >= 3 { 0.0 } else { rng.random_range(-1.0..1.0) });
        let c = DVector::from_fn(n, |i, _| 2.0 * x[(i, 1)] - x[(i, 2)] + rng.random_range(-0.1..0.1));
        // w3 = w1 + w2, w4 = w1 - w2
        let a = DMatrix::from_row_slice(2, 5, &[0.0, 1.0, 1.0, -1.0, 0.0, 0.0, 1.0, -1.0, 0.0, -1.0]);
        let fit = dantzig_select(&x, &c, &[0.0, 1.0, 1.0, 0.5, 0.5], Some(&a), 0.3).unwrap();
        let res = &c - &x * &fit.coef;
        assert!(x.tr_mul(&res).amax() <= 0.3 + 1e-7);
        assert!((&a * &fit.coef).amax() <= 1e-8);
    }
}
