//! B-spline bases, curve projection, Gram matrices and finite-difference
//! derivative matrices.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FmeError, Result};
use crate::tol;

/// Strictly increasing sampling times of a curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(FmeError::InvalidInput(format!(
                "a time grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(FmeError::InvalidInput("non-finite time point".into()));
        }
        if let Some(w) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(FmeError::InvalidInput(format!(
                "time grid is not strictly increasing at index {}",
                w + 1
            )));
        }
        Ok(Self { points })
    }

    /// `m` evenly spaced points `t_j = (j - 1) / (m - 1)` on `[0, 1]`.
    pub fn even(m: usize) -> Result<Self> {
        Self::even_on(m, 0.0, 1.0)
    }

    pub fn even_on(m: usize, lo: f64, hi: f64) -> Result<Self> {
        if m < 2 {
            return Err(FmeError::InvalidInput(format!(
                "a time grid needs at least 2 points, got {m}"
            )));
        }
        let step = (hi - lo) / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|j| lo + step * j as f64).collect();
        points[m - 1] = hi;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Riemann weights `dt_j = t_j - t_{j-1}` with `dt_1 = t_2 - t_1`.
    pub fn riemann_weights(&self) -> Vec<f64> {
        let t = &self.points;
        let mut w = Vec::with_capacity(t.len());
        w.push(t[1] - t[0]);
        w.extend(t.windows(2).map(|p| p[1] - p[0]));
        w
    }

    /// Bitwise identity of the grid, usable as a cache key.
    pub fn key(&self) -> Vec<u64> {
        self.points.iter().map(|t| t.to_bits()).collect()
    }
}

/// One noisy functional predictor `U_i` observed on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSample {
    pub grid: Arc<TimeGrid>,
    pub values: Vec<f64>,
    pub response: Option<f64>,
    /// 1-based cluster label.
    pub label: Option<usize>,
}

impl CurveSample {
    pub fn new(grid: Arc<TimeGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FmeError::InvalidInput(format!(
                "curve has {} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            values,
            response: None,
            label: None,
        })
    }

    pub fn with_response(mut self, y: f64) -> Self {
        self.response = Some(y);
        self
    }

    pub fn with_label(mut self, z: usize) -> Self {
        self.label = Some(z);
        self
    }
}

/// Clamped B-spline basis with evenly spaced interior knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    dimension: usize,
    degree: usize,
    knots: Vec<f64>,
    domain: (f64, f64),
}

impl BSplineBasis {
    pub fn new(dimension: usize, degree: usize, domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(FmeError::InvalidBasis(format!(
                "domain [{lo}, {hi}] is not a proper interval"
            )));
        }
        if dimension < degree + 1 {
            return Err(FmeError::InvalidBasis(format!(
                "dimension {dimension} is smaller than degree + 1 = {}",
                degree + 1
            )));
        }
        let interior = dimension - degree - 1;
        let mut knots = Vec::with_capacity(dimension + degree + 1);
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        for j in 1..=interior {
            knots.push(lo + (hi - lo) * j as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(Self {
            dimension,
            degree,
            knots,
            domain,
        })
    }

    /// Cubic basis on `[0, 1]`.
    pub fn cubic(dimension: usize) -> Result<Self> {
        Self::new(dimension, 3, (0.0, 1.0))
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    fn check_domain(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.domain;
        let slack = 1e-12 * (hi - lo);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(FmeError::Domain { t, lo, hi });
        }
        Ok(t.clamp(lo, hi))
    }

    /// Knot span index `mu` with `knots[mu] <= t < knots[mu + 1]`; the right
    /// end of the domain belongs to the last non-empty span.
    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let n = self.dimension;
        if t >= self.knots[n] {
            return n - 1;
        }
        // knots[p..=n] is non-decreasing; find the last index with knots[i] <= t.
        let slice = &self.knots[p..=n];
        let idx = slice.partition_point(|&k| k <= t);
        (p + idx - 1).min(n - 1)
    }

    /// The `degree + 1` possibly non-zero basis values at `t` and the index of
    /// the first of them.
    fn nonzero(&self, t: f64, out: &mut [f64]) -> usize {
        let p = self.degree;
        let i = self.span(t);
        let u = &self.knots;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[i + 1 - j];
            right[j] = u[i + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        i - p
    }

    /// All basis functions evaluated at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let t = self.check_domain(t)?;
        let mut local = vec![0.0; self.degree + 1];
        let first = self.nonzero(t, &mut local);
        let mut out = vec![0.0; self.dimension];
        out[first..first + local.len()].copy_from_slice(&local);
        Ok(out)
    }

    /// `m x dimension` matrix whose rows are the basis evaluated on the grid.
    pub fn evaluation_matrix(&self, grid: &TimeGrid) -> Result<DMatrix<f64>> {
        let mut e = DMatrix::zeros(grid.len(), self.dimension);
        let mut local = vec![0.0; self.degree + 1];
        for (row, &t) in grid.points().iter().enumerate() {
            let t = self.check_domain(t)?;
            let first = self.nonzero(t, &mut local);
            for (c, v) in local.iter().enumerate() {
                e[(row, first + c)] = *v;
            }
        }
        Ok(e)
    }
}

/// Riemann approximation of `int U(t) b_j(t) dt` for every basis function.
pub fn project_curve(curve: &CurveSample, basis: &BSplineBasis) -> Result<DVector<f64>> {
    if curve.values.is_empty() {
        return Err(FmeError::InvalidInput("empty curve".into()));
    }
    if curve.values.len() != curve.grid.len() {
        return Err(FmeError::InvalidInput(format!(
            "curve has {} values for a grid of {} points",
            curve.values.len(),
            curve.grid.len()
        )));
    }
    let e = basis.evaluation_matrix(&curve.grid)?;
    let w = curve.grid.riemann_weights();
    let weighted = DVector::from_iterator(
        w.len(),
        curve.values.iter().zip(&w).map(|(u, dt)| u * dt),
    );
    Ok(e.tr_mul(&weighted))
}

/// Matrix of Riemann approximations of `int b^A_j(t) b^B_l(t) dt`.
pub fn cross_gram(
    a: &BSplineBasis,
    b: &BSplineBasis,
    grid: &TimeGrid,
) -> Result<DMatrix<f64>> {
    if a.domain() != b.domain() {
        return Err(FmeError::InvalidBasis(format!(
            "domain mismatch: {:?} vs {:?}",
            a.domain(),
            b.domain()
        )));
    }
    let ea = a.evaluation_matrix(grid)?;
    let eb = b.evaluation_matrix(grid)?;
    let w = grid.riemann_weights();
    let mut weighted = eb;
    for (mut row, dt) in weighted.row_iter_mut().zip(&w) {
        row *= *dt;
    }
    Ok(ea.tr_mul(&weighted))
}

/// Pointwise `coeffs . b(t_j)` over the grid.
pub fn reconstruct_function(
    coeffs: &[f64],
    basis: &BSplineBasis,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if coeffs.len() != basis.dimension() {
        return Err(FmeError::InvalidInput(format!(
            "{} coefficients for a basis of dimension {}",
            coeffs.len(),
            basis.dimension()
        )));
    }
    let e = basis.evaluation_matrix(grid)?;
    let c = DVector::from_column_slice(coeffs);
    Ok((e * c).iter().copied().collect())
}

/// How the first `d` rows of a `d`-th difference block are filled, where the
/// backward recursion would reach before the first grid point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryRule {
    /// Forward differences of the same order. For `d >= 1` this repeats
    /// rows, so a `d1 >= 1` block is singular and falls back to jitter.
    #[default]
    Forward,
    /// Row `j < d` holds the `j`-th backward difference at `t_j`. Keeps the
    /// block invertible for every order.
    Anchored,
}

/// Finite-difference approximations of the `d1`-th and `d2`-th derivatives
/// of a basis on `dimension` evenly spaced points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeMatrices {
    pub d1: usize,
    pub d2: usize,
    pub boundary: BoundaryRule,
    /// `dimension x dimension`, rows `D^{d1} b(t_j)`.
    pub a_d1: DMatrix<f64>,
    /// `dimension x dimension`, rows `D^{d2} b(t_j)`.
    pub a_d2: DMatrix<f64>,
    /// Inverse of `a_d1` (after jitter, when jitter was needed).
    pub a_d1_inv: DMatrix<f64>,
    /// `a_d2 * a_d1^{-1}`: maps d1-coefficients onto d2-coefficients.
    pub link: DMatrix<f64>,
    /// Whether ridge jitter had to be added to `a_d1`.
    pub jittered: bool,
}

impl DerivativeMatrices {
    pub fn dimension(&self) -> usize {
        self.a_d1.nrows()
    }

    /// Stacked `2 dimension x dimension` matrix `[a_d1; a_d2]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let p = self.dimension();
        let mut a = DMatrix::zeros(2 * p, p);
        a.rows_mut(0, p).copy_from(&self.a_d1);
        a.rows_mut(p, p).copy_from(&self.a_d2);
        a
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `D^d` block: `dimension^d * sum_i (-1)^i C(d, i) b(t_{j-i})`.
pub fn difference_block(
    basis: &BSplineBasis,
    d: usize,
    rule: BoundaryRule,
) -> Result<DMatrix<f64>> {
    let p = basis.dimension();
    let (lo, hi) = basis.domain();
    let grid = TimeGrid::even_on(p, lo, hi)?;
    let e = basis.evaluation_matrix(&grid)?;
    let scale = p as f64;
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        let (order, terms): (usize, Vec<(usize, f64)>) = if j >= d {
            (d, (0..=d).map(|i| (j - i, sign(i) * binomial(d, i))).collect())
        } else {
            match rule {
                BoundaryRule::Forward => (
                    d,
                    (0..=d)
                        .map(|i| (j + i, sign(d - i) * binomial(d, i)))
                        .collect(),
                ),
                BoundaryRule::Anchored => (
                    j,
                    (0..=j).map(|i| (j - i, sign(i) * binomial(j, i))).collect(),
                ),
            }
        };
        if terms.iter().any(|&(row, _)| row >= p) {
            return Err(FmeError::InvalidInput(format!(
                "difference order {d} needs more than {p} grid points"
            )));
        }
        let factor = scale.powi(order as i32);
        for (row, coef) in terms {
            for c in 0..p {
                out[(j, c)] += factor * coef * e[(row, c)];
            }
        }
    }
    Ok(out)
}

fn sign(i: usize) -> f64 {
    if i % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Ratio of extreme singular values; infinite for a singular matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn derivative_matrices(
    basis: &BSplineBasis,
    d1: usize,
    d2: usize,
) -> Result<DerivativeMatrices> {
    derivative_matrices_with(basis, d1, d2, BoundaryRule::default())
}

pub fn derivative_matrices_with(
    basis: &BSplineBasis,
    d1: usize,
    d2: usize,
    boundary: BoundaryRule,
) -> Result<DerivativeMatrices> {
    let p = basis.dimension();
    if !(d1 < d2 && d2 < p) {
        return Err(FmeError::InvalidInput(format!(
            "need 0 <= d1 < d2 < dimension, got d1 = {d1}, d2 = {d2}, dimension = {p}"
        )));
    }
    let a_d1 = difference_block(basis, d1, boundary)?;
    let a_d2 = difference_block(basis, d2, boundary)?;

    let mut target = a_d1.clone();
    let mut jittered = false;
    let cond = condition_number(&a_d1);
    if cond > tol::MAX_CONDITION {
        log::warn!(
            "derivative matrix for d1 = {d1} has condition {cond:.3e}; adding ridge jitter"
        );
        for i in 0..p {
            target[(i, i)] += 1e-10;
        }
        jittered = true;
    }
    let a_d1_inv = target.clone().try_inverse().ok_or_else(|| {
        FmeError::DegenerateDerivative(format!("A^[{d1}] is singular"))
    })?;
    if a_d1_inv.iter().any(|v| !v.is_finite()) {
        return Err(FmeError::DegenerateDerivative(format!(
            "A^[{d1}] inverse is not finite"
        )));
    }
    let link = &a_d2 * &a_d1_inv;
    Ok(DerivativeMatrices {
        d1,
        d2,
        boundary,
        a_d1,
        a_d2,
        a_d1_inv,
        link,
        jittered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Textbook recursive Cox-de Boor definition with half-open spans and the
    /// right end assigned to the last non-degenerate span.
    fn cox_de_boor(knots: &[f64], i: usize, k: usize, t: f64, n: usize) -> f64 {
        if k == 0 {
            let last = knots[knots.len() - 1];
            if t == last {
                // last basis function owns the right endpoint
                let j = n - 1;
                let mut idx = j;
                while knots[idx] == knots[idx + 1] {
                    idx -= 1;
                }
                return if i == idx { 1.0 } else { 0.0 };
            }
            return if knots[i] <= t && t < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + k] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, t, n);
        }
        let d2 = knots[i + k + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + k + 1] - t) / d2 * cox_de_boor(knots, i + 1, k - 1, t, n);
        }
        v
    }

    #[test]
    fn cubic_single_segment_is_bernstein() {
        let b = BSplineBasis::cubic(4).unwrap();
        assert_eq!(b.eval(0.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        let e1 = b.eval(1.0).unwrap();
        assert_abs_diff_eq!(e1[3], 1.0, epsilon = 1e-15);
        let t: f64 = 0.3;
        let v = b.eval(t).unwrap();
        let s = 1.0 - t;
        let bern = [s.powi(3), 3.0 * t * s * s, 3.0 * t * t * s, t.powi(3)];
        for (a, e) in v.iter().zip(bern) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-14);
        }
    }

    #[test]
    fn dimension_below_order_is_rejected() {
        assert!(matches!(
            BSplineBasis::new(3, 3, (0.0, 1.0)),
            Err(FmeError::InvalidBasis(_))
        ));
    }

    #[test]
    fn interior_knots_are_even() {
        let b = BSplineBasis::cubic(10).unwrap();
        let k = b.knots();
        assert_eq!(k.len(), 14);
        for j in 1..=6 {
            assert_abs_diff_eq!(k[3 + j], j as f64 / 7.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn matches_recursive_reference_on_dense_grid() {
        let b = BSplineBasis::cubic(10).unwrap();
        let n = b.dimension();
        for s in 0..1000 {
            let t = s as f64 / 999.0;
            let v = b.eval(t).unwrap();
            for (i, vi) in v.iter().enumerate() {
                let r = cox_de_boor(b.knots(), i, 3, t, n);
                assert_abs_diff_eq!(*vi, r, epsilon = 1e-12);
            }
        }
        let mid = b.eval(0.5).unwrap();
        for (i, vi) in mid.iter().enumerate() {
            assert_abs_diff_eq!(*vi, cox_de_boor(b.knots(), i, 3, 0.5, n), epsilon = 1e-12);
        }
    }

    #[test]
    fn eval_outside_domain_fails() {
        let b = BSplineBasis::cubic(6).unwrap();
        assert!(matches!(b.eval(1.5), Err(FmeError::Domain { .. })));
        assert!(matches!(b.eval(-0.1), Err(FmeError::Domain { .. })));
    }

    #[test]
    fn projection_of_constant_matches_integrals() {
        let b = BSplineBasis::cubic(8).unwrap();
        let m = 2000;
        let grid = Arc::new(TimeGrid::even(m).unwrap());
        let curve = CurveSample::new(grid, vec![1.0; m]).unwrap();
        let xhat = project_curve(&curve, &b).unwrap();
        // int b_j = (knot_{j+d+1} - knot_j) / (d + 1)
        let k = b.knots();
        for j in 0..8 {
            let exact = (k[j + 4] - k[j]) / 4.0;
            assert!((xhat[j] - exact).abs() < 2.0 / m as f64);
        }
    }

    #[test]
    fn projection_of_zero_is_zero() {
        let b = BSplineBasis::cubic(6).unwrap();
        let grid = Arc::new(TimeGrid::even(50).unwrap());
        let curve = CurveSample::new(grid, vec![0.0; 50]).unwrap();
        assert!(project_curve(&curve, &b).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gram_corrected_projection_recovers_basis_function() {
        let b = BSplineBasis::cubic(10).unwrap();
        let grid = TimeGrid::even(1000).unwrap();
        let values: Vec<f64> = grid.points().iter().map(|&t| b.eval(t).unwrap()[2]).collect();
        let curve = CurveSample::new(Arc::new(grid.clone()), values).unwrap();
        let xhat = project_curve(&curve, &b).unwrap();
        let g = cross_gram(&b, &b, &grid).unwrap();
        // least-squares oracle: solve G c = xhat
        let c = g.lu().solve(&xhat).unwrap();
        for (j, cj) in c.iter().enumerate() {
            let e = if j == 2 { 1.0 } else { 0.0 };
            assert!((cj - e).abs() < 1e-2, "coefficient {j} = {cj}");
        }
    }

    #[test]
    fn self_gram_is_symmetric_psd() {
        let b = BSplineBasis::cubic(12).unwrap();
        let grid = TimeGrid::even(400).unwrap();
        let g = cross_gram(&b, &b, &grid).unwrap();
        assert_abs_diff_eq!((&g - g.transpose()).amax(), 0.0, epsilon = 1e-14);
        let eig = g.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-12);
        let total: f64 = g.iter().sum();
        assert!((total - 1.0).abs() < 2.0 / 400.0);
    }

    #[test]
    fn piecewise_constant_gram() {
        let b = BSplineBasis::new(2, 0, (0.0, 1.0)).unwrap();
        let m = 1001;
        let grid = TimeGrid::even(m).unwrap();
        let g = cross_gram(&b, &b, &grid).unwrap();
        assert!((g[(0, 0)] - 0.5).abs() < 2.0 / m as f64);
        assert!((g[(1, 1)] - 0.5).abs() < 2.0 / m as f64);
        assert_eq!(g[(0, 1)], 0.0);
    }

    #[test]
    fn zeroth_difference_is_evaluation() {
        let b = BSplineBasis::cubic(10).unwrap();
        let dm = derivative_matrices(&b, 0, 3).unwrap();
        let e = b.evaluation_matrix(&TimeGrid::even(10).unwrap()).unwrap();
        assert_eq!(dm.a_d1, e);
        assert!(!dm.jittered);
        assert_eq!(dm.stacked().nrows(), 20);
    }

    /// Coefficients of a polynomial in a clamped B-spline basis via
    /// interpolation at the Greville abscissae (exact for degree <= spline degree).
    fn poly_coeffs(b: &BSplineBasis, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let n = b.dimension();
        let d = b.degree();
        let k = b.knots();
        let pts: Vec<f64> = (0..n)
            .map(|j| k[j + 1..=j + d].iter().sum::<f64>() / d as f64)
            .collect();
        let e = DMatrix::from_fn(n, n, |i, j| b.eval(pts[i]).unwrap()[j]);
        let rhs = DVector::from_iterator(n, pts.iter().map(|&t| f(t)));
        e.lu().solve(&rhs).unwrap()
    }

    #[test]
    fn first_difference_of_linear_function_is_one() {
        let p = 40;
        let b = BSplineBasis::cubic(p).unwrap();
        let c = poly_coeffs(&b, |t| t);
        let dm = derivative_matrices(&b, 1, 2).unwrap();
        let d = &dm.a_d1 * &c;
        for v in d.iter() {
            assert!((v - 1.0).abs() < 2.0 / p as f64, "{v}");
        }
    }

    #[test]
    fn third_difference_of_quadratic_vanishes() {
        let p = 40;
        let b = BSplineBasis::cubic(p).unwrap();
        let c = poly_coeffs(&b, |t| 3.0 * t * t - t + 0.5);
        let dm = derivative_matrices(&b, 0, 3).unwrap();
        let d3 = &dm.a_d2 * &c;
        assert!(d3.amax() <= 10.0 / p as f64, "{}", d3.amax());
    }

    #[test]
    fn anchored_boundary_keeps_first_derivative_block_invertible() {
        let b = BSplineBasis::cubic(12).unwrap();
        let dm = derivative_matrices_with(&b, 1, 2, BoundaryRule::Anchored).unwrap();
        assert!(!dm.jittered);
        let id = &dm.a_d1 * &dm.a_d1_inv;
        assert_abs_diff_eq!((id - DMatrix::identity(12, 12)).amax(), 0.0, epsilon = 1e-8);
        // forward rule duplicates the first row for d1 = 1
        let fwd = derivative_matrices(&b, 1, 2).unwrap();
        assert!(fwd.jittered);
    }

    #[test]
    fn bad_derivative_orders_rejected() {
        let b = BSplineBasis::cubic(6).unwrap();
        assert!(derivative_matrices(&b, 2, 2).is_err());
        assert!(derivative_matrices(&b, 0, 6).is_err());
    }

    #[test]
    fn reconstruction_of_smooth_sine() {
        let b = BSplineBasis::cubic(10).unwrap();
        let grid = TimeGrid::even(100).unwrap();
        let f = |t: f64| (2.0 * std::f64::consts::PI * t).sin();
        let values: Vec<f64> = grid.points().iter().map(|&t| f(t)).collect();
        let curve = CurveSample::new(Arc::new(grid.clone()), values.clone()).unwrap();
        let xhat = project_curve(&curve, &b).unwrap();
        let g = cross_gram(&b, &b, &grid).unwrap();
        let c = g.lu().solve(&xhat).unwrap();
        let rec = reconstruct_function(c.as_slice(), &b, &grid).unwrap();
        let err = rec
            .iter()
            .zip(&values)
            .map(|(a, e)| (a - e).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "{err}");
        assert!(reconstruct_function(&[0.0; 10], &b, &grid).unwrap().iter().all(|v| *v == 0.0));
        for v in reconstruct_function(&[1.0; 10], &b, &grid).unwrap() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
        assert!(reconstruct_function(&[1.0; 3], &b, &grid).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        let g = TimeGrid::even(5).unwrap();
        assert_eq!(g.riemann_weights(), vec![0.25; 5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_of_unity(dim in 4usize..30, degree in 0usize..4, t in 0.0f64..=1.0) {
                prop_assume!(dim > degree);
                let b = BSplineBasis::new(dim, degree, (0.0, 1.0)).unwrap();
                let v = b.eval(t).unwrap();
                prop_assert!(v.iter().all(|x| *x >= -1e-15));
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }
}
