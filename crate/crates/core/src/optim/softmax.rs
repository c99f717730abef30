//! Softmax gating networks: probabilities, the gating Q-function, and its
//! Newton-Raphson maximization.
//!
//! Gating coefficients are stored as a `(K - 1) x (q + 1)` matrix whose first
//! column holds the intercepts; the K-th gate is fixed at zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{FmeError, Result};
use crate::tol;

use super::wls::solve_spd;

/// Linear predictors of row `i` for all K gates (the last one is 0).
pub fn gate_scores_row(coef: &DMatrix<f64>, design: &DMatrix<f64>, i: usize, out: &mut [f64]) {
    let km1 = coef.nrows();
    let q = design.ncols();
    for k in 0..km1 {
        let mut s = coef[(k, 0)];
        for j in 0..q {
            s += coef[(k, j + 1)] * design[(i, j)];
        }
        out[k] = s;
    }
    out[km1] = 0.0;
}

/// Numerically stable `log softmax` in place.
pub fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    for s in v.iter_mut() {
        *s -= lse;
    }
}

/// `log(sum_k exp(v_k))` with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// `n x K` matrix of `log pi_k(r_i)`.
pub fn log_gates(coef: &DMatrix<f64>, design: &DMatrix<f64>) -> DMatrix<f64> {
    let n = design.nrows();
    let k = coef.nrows() + 1;
    let mut out = DMatrix::zeros(n, k);
    let mut buf = vec![0.0; k];
    for i in 0..n {
        gate_scores_row(coef, design, i, &mut buf);
        log_softmax_in_place(&mut buf);
        for (c, v) in buf.iter().enumerate() {
            out[(i, c)] = *v;
        }
    }
    out
}

/// `n x K` matrix of gate probabilities.
pub fn gates(coef: &DMatrix<f64>, design: &DMatrix<f64>) -> DMatrix<f64> {
    log_gates(coef, design).map(f64::exp)
}

/// Gate probabilities for a single design vector.
pub fn gate_probs(coef: &DMatrix<f64>, r: &[f64]) -> Vec<f64> {
    let design = DMatrix::from_row_slice(1, r.len(), r);
    let mut buf = vec![0.0; coef.nrows() + 1];
    gate_scores_row(coef, &design, 0, &mut buf);
    log_softmax_in_place(&mut buf);
    buf.iter().map(|v| v.exp()).collect()
}

/// `Q(xi) = sum_i sum_k tau_ik log pi_k(r_i; xi)`.
pub fn softmax_gating_q(coef: &DMatrix<f64>, design: &DMatrix<f64>, tau: &DMatrix<f64>) -> f64 {
    let lg = log_gates(coef, design);
    let mut q = 0.0;
    for (l, t) in lg.iter().zip(tau.iter()) {
        if *t > 0.0 {
            q += t * l;
        }
    }
    q
}

/// Gradient of the gating Q-function, same shape as `coef`.
pub fn gating_gradient(coef: &DMatrix<f64>, design: &DMatrix<f64>, tau: &DMatrix<f64>) -> DMatrix<f64> {
    let pi = gates(coef, design);
    let km1 = coef.nrows();
    let q = design.ncols();
    let mut g = DMatrix::zeros(km1, q + 1);
    for i in 0..design.nrows() {
        for k in 0..km1 {
            let e = tau[(i, k)] - pi[(i, k)];
            g[(k, 0)] += e;
            for j in 0..q {
                g[(k, j + 1)] += e * design[(i, j)];
            }
        }
    }
    g
}

/// Block Hessian `H_kl = -sum_i pi_k (delta_kl - pi_l) r~_i r~_i^T`, with
/// coefficients flattened gate-major.
pub fn gating_hessian(coef: &DMatrix<f64>, design: &DMatrix<f64>) -> DMatrix<f64> {
    let pi = gates(coef, design);
    let km1 = coef.nrows();
    let d = design.ncols() + 1;
    let dim = km1 * d;
    let mut h = DMatrix::zeros(dim, dim);
    let mut rt = vec![1.0; d];
    for i in 0..design.nrows() {
        for j in 0..d - 1 {
            rt[j + 1] = design[(i, j)];
        }
        for k in 0..km1 {
            for l in k..km1 {
                let delta = if k == l { 1.0 } else { 0.0 };
                let w = -pi[(i, k)] * (delta - pi[(i, l)]);
                if w == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let wa = w * rt[a];
                    for b in 0..d {
                        h[(k * d + a, l * d + b)] += wa * rt[b];
                    }
                }
            }
        }
    }
    for k in 0..km1 {
        for l in 0..k {
            for a in 0..d {
                for b in 0..d {
                    h[(k * d + a, l * d + b)] = h[(l * d + b, k * d + a)];
                }
            }
        }
    }
    h
}

/// One safeguarded Newton-Raphson step. Returns the new coefficients and
/// their Q value; never returns a point with lower Q than the start.
pub fn nr_gating_step(
    coef: &DMatrix<f64>,
    design: &DMatrix<f64>,
    tau: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let q_old = softmax_gating_q(coef, design, tau);
    let km1 = coef.nrows();
    if km1 == 0 {
        return Ok((coef.clone(), q_old));
    }
    let d = coef.ncols();
    let g = gating_gradient(coef, design, tau);
    let neg_h = -gating_hessian(coef, design);
    // flatten gate-major
    let gv = DVector::from_iterator(km1 * d, (0..km1).flat_map(|k| (0..d).map(move |j| (k, j))).map(|(k, j)| g[(k, j)]));
    let step = solve_spd(&neg_h, &gv).ok_or_else(|| {
        FmeError::NrFailure("gating Hessian stays singular after ridge jitter".into())
    })?;
    let mut nu = 1.0;
    for _ in 0..=30 {
        let mut cand = coef.clone();
        for k in 0..km1 {
            for j in 0..d {
                cand[(k, j)] += nu * step[k * d + j];
            }
        }
        let q_new = softmax_gating_q(&cand, design, tau);
        if q_new.is_finite() && q_new >= q_old {
            return Ok((cand, q_new));
        }
        nu *= 0.5;
    }
    Ok((coef.clone(), q_old))
}

/// Newton-Raphson iterations until `|dQ| < 1e-8` or `max_iter` steps.
pub fn nr_maximize(
    coef: &DMatrix<f64>,
    design: &DMatrix<f64>,
    tau: &DMatrix<f64>,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let mut cur = coef.clone();
    let mut q = softmax_gating_q(&cur, design, tau);
    for _ in 0..max_iter {
        let (next, q_next) = nr_gating_step(&cur, design, tau)?;
        let change = q_next - q;
        cur = next;
        q = q_next;
        if change.abs() < tol::INNER_CONVERGENCE {
            break;
        }
    }
    Ok(cur)
}
