//! Cyclic coordinate descent for the weighted Lasso
//! `1/2 sum_i w_i (y_i - b0 - x_i^T b)^2 + penalty * scale * ||b||_1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{FmeError, Result};

use super::wls::soft_threshold;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LassoOptions {
    /// Relative objective change that ends the sweeps.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    pub coef: DVector<f64>,
    pub sweeps: usize,
    /// Penalized weighted half residual sum of squares at the solution.
    pub objective: f64,
}

/// Value of the weighted Lasso objective.
pub fn lasso_objective(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    threshold: f64,
    intercept: f64,
    coef: &DVector<f64>,
) -> f64 {
    let fit = x * coef;
    let rss: f64 = (0..y.len())
        .map(|i| w[i] * (y[i] - intercept - fit[i]).powi(2))
        .sum();
    0.5 * rss + threshold * coef.iter().map(|b| b.abs()).sum::<f64>()
}

#[allow(clippy::too_many_arguments)]
pub fn coord_lasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    penalty: f64,
    scale: f64,
    start: Option<(f64, &DVector<f64>)>,
    with_intercept: bool,
    opts: LassoOptions,
) -> Result<LassoFit> {
    let (n, d) = x.shape();
    if y.len() != n || w.len() != n {
        return Err(FmeError::InvalidInput(format!(
            "coord_lasso: X has {n} rows, y has {}, w has {}",
            y.len(),
            w.len()
        )));
    }
    if !(penalty >= 0.0) || !(scale >= 0.0) {
        return Err(FmeError::InvalidInput("penalty and scale must be non-negative".into()));
    }
    let wsum: f64 = w.sum();
    if wsum <= 0.0 {
        return Err(FmeError::EmptyComponent("all Lasso weights are zero".into()));
    }
    let threshold = penalty * scale;

    // the start intercept is implied by the centering and not needed
    let mut b = match start {
        Some((_, s)) if s.len() == d => s.clone(),
        Some((_, s)) => {
            return Err(FmeError::InvalidInput(format!(
                "start has {} coefficients, expected {d}",
                s.len()
            )))
        }
        None => DVector::zeros(d),
    };

    // Weighted centering absorbs the unpenalized intercept; the sweeps then
    // work on the weighted Gram matrix.
    let (xbar, ybar) = if with_intercept {
        let xb = DVector::from_fn(d, |j, _| (0..n).map(|i| w[i] * x[(i, j)]).sum::<f64>() / wsum);
        let yb = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / wsum;
        (xb, yb)
    } else {
        (DVector::zeros(d), 0.0)
    };
    let mut gram = DMatrix::zeros(d, d);
    let mut h = DVector::zeros(d);
    let mut c0 = 0.0;
    let mut xc = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            xc[j] = x[(i, j)] - xbar[j];
        }
        let yc = y[i] - ybar;
        c0 += w[i] * yc * yc;
        for j in 0..d {
            let wx = w[i] * xc[j];
            h[j] += wx * yc;
            for l in j..d {
                gram[(j, l)] += wx * xc[l];
            }
        }
    }
    c0 *= 0.5;
    for j in 0..d {
        for l in 0..j {
            gram[(j, l)] = gram[(l, j)];
        }
    }
    // columns without weighted variance stay at zero
    let active: Vec<bool> = (0..d)
        .map(|j| {
            let raw: f64 = (0..n).map(|i| w[i] * x[(i, j)] * x[(i, j)]).sum();
            gram[(j, j)] > 1e-12 * raw && gram[(j, j)] > 0.0
        })
        .collect();
    for j in 0..d {
        if !active[j] {
            if b[j] != 0.0 {
                log::debug!("column {j} has zero weighted variance; coefficient fixed at 0");
            }
            b[j] = 0.0;
        }
    }

    let smooth = |b: &DVector<f64>| -> f64 { 0.5 * b.dot(&(&gram * b)) - h.dot(b) + c0 };
    let obj = |b: &DVector<f64>| -> f64 { smooth(b) + threshold * b.iter().map(|v| v.abs()).sum::<f64>() };
    let curv_max = (0..d).map(|j| gram[(j, j)]).fold(wsum, f64::max);
    let grad_ref = (2.0 * c0.max(1e-12) * curv_max).sqrt();
    let kkt_tol = 1e-9 * (1.0 + threshold + grad_ref);
    // KKT violation of a point given its gradient of the smooth part
    let violation = |b: &DVector<f64>, g: &DVector<f64>| -> f64 {
        (0..d)
            .filter(|&j| active[j])
            .map(|j| {
                if b[j] == 0.0 {
                    (g[j].abs() - threshold).max(0.0)
                } else {
                    (g[j] - threshold * b[j].signum()).abs()
                }
            })
            .fold(0.0, f64::max)
    };

    // g = h - G b, the negative gradient of the smooth part
    let mut g = &h - &gram * &b;
    let mut current = obj(&b);
    let mut sweeps = 0;
    let mut last_signs: Vec<i8> = Vec::new();
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_move: f64 = 0.0;
        for j in 0..d {
            if !active[j] {
                continue;
            }
            let old = b[j];
            let rho = g[j] + gram[(j, j)] * old;
            let new = soft_threshold(rho, threshold) / gram[(j, j)];
            if new != old {
                let delta = new - old;
                for l in 0..d {
                    g[l] -= gram[(l, j)] * delta;
                }
                b[j] = new;
                max_move = max_move.max(delta.abs() * gram[(j, j)]);
            }
        }
        let next = obj(&b);
        let change = (current - next).abs();
        current = next;

        let signs: Vec<i8> = b.iter().map(|v| if *v > 0.0 { 1 } else if *v < 0.0 { -1 } else { 0 }).collect();
        if signs == last_signs {
            if let Some((pb, pg, pv)) = polish(&gram, &h, &b, &signs, threshold, &obj) {
                if pv <= current && violation(&pb, &pg) <= kkt_tol {
                    b = pb;
                    current = pv;
                    break;
                }
            }
        }
        last_signs = signs;

        let scale_ref = current.abs().max(1e-12);
        if change <= opts.tol * scale_ref && max_move <= 1e-8 * (1.0 + threshold + grad_ref) {
            break;
        }
        if max_move == 0.0 {
            break;
        }
    }
    // Slow coordinate descent (ill-conditioned or rank-deficient Gram) is
    // finished by an exact active-set search.
    let g = &h - &gram * &b;
    if violation(&b, &g) > kkt_tol {
        let fb = feature_sign(&gram, &h, threshold, &active, &b, kkt_tol, &obj);
        let fg = &h - &gram * &fb;
        let fv = obj(&fb);
        if fv <= current && violation(&fb, &fg) < violation(&b, &g) {
            b = fb;
            current = fv;
        }
    }
    let b0 = if with_intercept { ybar - xbar.dot(&b) } else { 0.0 };
    Ok(LassoFit {
        intercept: b0,
        coef: b,
        sweeps,
        objective: current,
    })
}

/// Exact minimizer on a fixed signed support, `G_AA b_A = h_A - t s_A`.
/// The current iterate is moved to the nearest solution, so a singular
/// `G_AA` (more active columns than observations) still works.
fn polish(
    gram: &DMatrix<f64>,
    h: &DVector<f64>,
    current: &DVector<f64>,
    signs: &[i8],
    threshold: f64,
    obj: &dyn Fn(&DVector<f64>) -> f64,
) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let support: Vec<usize> = (0..signs.len()).filter(|&j| signs[j] != 0).collect();
    let d = signs.len();
    let mut b = DVector::zeros(d);
    if !support.is_empty() {
        let a = DMatrix::from_fn(support.len(), support.len(), |r, c| gram[(support[r], support[c])]);
        let start = DVector::from_fn(support.len(), |r, _| current[support[r]]);
        let rhs = DVector::from_fn(support.len(), |r, _| h[support[r]] - threshold * signs[support[r]] as f64);
        let resid = rhs - &a * &start;
        let svd = a.svd(true, true);
        let eps = 1e-12 * svd.singular_values.max();
        let sol = start + svd.solve(&resid, eps).ok()?;
        for (r, &j) in support.iter().enumerate() {
            if sol[r].signum() as i8 != signs[j] || !sol[r].is_finite() {
                return None;
            }
            b[j] = sol[r];
        }
    }
    let g = h - gram * &b;
    let v = obj(&b);
    Some((b, g, v))
}

/// Feature-sign search for `min 0.5 b'Gb - h'b + t|b|_1` from `start`.
/// Each step minimizes over the current signed support and line-searches
/// the zero crossings, so the objective never increases.
fn feature_sign(
    gram: &DMatrix<f64>,
    h: &DVector<f64>,
    threshold: f64,
    usable: &[bool],
    start: &DVector<f64>,
    tol: f64,
    obj: &dyn Fn(&DVector<f64>) -> f64,
) -> DVector<f64> {
    let d = start.len();
    let mut b = start.clone();
    let mut theta: Vec<f64> = b.iter().map(|v| if *v == 0.0 { 0.0 } else { v.signum() }).collect();
    for _ in 0..(20 * d + 100) {
        let g = h - gram * &b;
        let on_support_ok = (0..d)
            .filter(|&j| theta[j] != 0.0)
            .all(|j| (g[j] - threshold * theta[j]).abs() <= tol);
        if on_support_ok {
            let entering = (0..d)
                .filter(|&j| usable[j] && theta[j] == 0.0)
                .map(|j| (j, g[j].abs() - threshold))
                .filter(|&(_, v)| v > tol)
                .max_by(|a, c| a.1.total_cmp(&c.1));
            match entering {
                Some((j, _)) => theta[j] = g[j].signum(),
                None => break,
            }
        }
        let support: Vec<usize> = (0..d).filter(|&j| theta[j] != 0.0).collect();
        let m = support.len();
        let a = DMatrix::from_fn(m, m, |r, c| gram[(support[r], support[c])]);
        let r = DVector::from_fn(m, |k, _| g[support[k]] - threshold * theta[support[k]]);
        let svd = a.clone().svd(true, true);
        let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        let Ok(step) = svd.solve(&r, eps) else { break };
        let miss = &r - &a * &step;
        // on a singular support the orthant minimum is unbounded along the
        // null direction, so only the zero crossings bound the step
        let (dir, bounded) = if miss.norm() > 1e-10 * (1.0 + r.norm()) {
            (miss, false)
        } else {
            (step, true)
        };
        // each candidate is a step length and the coordinate that hits zero
        let mut cands: Vec<(f64, Option<usize>)> = support
            .iter()
            .enumerate()
            .filter(|&(k, _)| dir[k] != 0.0)
            .map(|(k, &j)| (-b[j] / dir[k], Some(j)))
            .filter(|&(s, _)| s > 0.0 && (!bounded || s < 1.0))
            .collect();
        if bounded {
            cands.push((1.0, None));
        }
        let point = |s: f64, hit: Option<usize>| {
            let mut nb = b.clone();
            for (k, &j) in support.iter().enumerate() {
                let v = b[j] + s * dir[k];
                nb[j] = if Some(j) == hit || v * theta[j] <= 0.0 { 0.0 } else { v };
            }
            nb
        };
        let best = cands
            .into_iter()
            .map(|(s, hit)| {
                let nb = point(s, hit);
                let v = obj(&nb);
                (nb, v)
            })
            .min_by(|x, y| x.1.total_cmp(&y.1));
        let Some((nb, nv)) = best else { break };
        if nv > obj(&b) {
            break;
        }
        b = nb;
        for j in 0..d {
            if b[j] == 0.0 {
                theta[j] = 0.0;
            }
        }
    }
    b
}
