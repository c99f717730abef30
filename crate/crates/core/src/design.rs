//! Per-observation design vectors built from curve projections.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{cross_gram, project_curve, BSplineBasis, CurveSample, DerivativeMatrices};
use crate::error::{FmeError, Result};

/// The three bases of a functional mixture: `r` represents the curves,
/// `p` the expert coefficient functions and `q` the gating ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    pub r: BSplineBasis,
    pub p: BSplineBasis,
    pub q: BSplineBasis,
}

impl Bases {
    pub fn new(r: BSplineBasis, p: BSplineBasis, q: BSplineBasis) -> Result<Self> {
        if p.dimension() > r.dimension() || q.dimension() > r.dimension() {
            return Err(FmeError::Identifiability(format!(
                "need p <= r and q <= r, got r = {}, p = {}, q = {}",
                r.dimension(),
                p.dimension(),
                q.dimension()
            )));
        }
        if p.domain() != r.domain() || q.domain() != r.domain() {
            return Err(FmeError::InvalidBasis("bases must share one domain".into()));
        }
        Ok(Self { r, p, q })
    }

    /// Bases of the given dimensions and degree on `[0, 1]`.
    pub fn with_dims(r: usize, p: usize, q: usize, degree: usize) -> Result<Self> {
        Self::new(
            BSplineBasis::new(r, degree, (0.0, 1.0))?,
            BSplineBasis::new(p, degree, (0.0, 1.0))?,
            BSplineBasis::new(q, degree, (0.0, 1.0))?,
        )
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.r.dimension(), self.p.dimension(), self.q.dimension())
    }
}

/// How raw projections `xhat_i = int U_i b_r` are mapped to design vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    /// `x_i = G_rp^T G_rr^{-1} xhat_i`: the curve is first represented by its
    /// least-squares coefficients in `b_r`, so `x_i^T eta` approximates
    /// `int U_i(t) eta^T b_p(t) dt` for any basis.
    #[default]
    GramCorrected,
    /// `x_i = G_rp^T xhat_i` taken at face value; only matches the integral
    /// when `b_r` is orthonormal.
    Literal,
}

/// Column centring and scaling learned on one design and replayable on another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub r_mean: Vec<f64>,
    pub r_scale: Vec<f64>,
}

fn column_stats(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows().max(1) as f64;
    m.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .unzip()
}

fn apply_stats(m: &mut DMatrix<f64>, mean: &[f64], scale: &[f64]) {
    for (j, mut c) in m.column_iter_mut().enumerate() {
        for v in c.iter_mut() {
            *v = (*v - mean[j]) / scale[j];
        }
    }
}

/// Design vectors of a dataset, one row per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignSet {
    /// `n x p` expert designs.
    pub x: DMatrix<f64>,
    /// `n x q` gating designs.
    pub r: DMatrix<f64>,
    /// `n x p` expert designs in derivative coordinates (iFME).
    pub v: Option<DMatrix<f64>>,
    /// `n x q` gating designs in derivative coordinates (iFME).
    pub s: Option<DMatrix<f64>>,
    /// `n x r` raw projections.
    pub xhat: DMatrix<f64>,
}

impl DesignSet {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.r.ncols()
    }

    /// Design set from explicit matrices, for callers that build their own
    /// features.
    pub fn from_matrices(x: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != r.nrows() {
            return Err(FmeError::InvalidInput(format!(
                "x has {} rows but r has {}",
                x.nrows(),
                r.nrows()
            )));
        }
        let xhat = DMatrix::zeros(x.nrows(), 0);
        Ok(Self {
            x,
            r,
            v: None,
            s: None,
            xhat,
        })
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| m.select_rows(idx.iter());
        Self {
            x: pick(&self.x),
            r: pick(&self.r),
            v: self.v.as_ref().map(pick),
            s: self.s.as_ref().map(pick),
            xhat: pick(&self.xhat),
        }
    }

    /// Centre and scale the columns of `x` and `r` in place. Derivative
    /// designs must be rebuilt afterwards.
    pub fn standardize(&mut self) -> Standardizer {
        let (x_mean, x_scale) = column_stats(&self.x);
        let (r_mean, r_scale) = column_stats(&self.r);
        let st = Standardizer {
            x_mean,
            x_scale,
            r_mean,
            r_scale,
        };
        st.apply(self);
        st
    }

    pub fn expert_row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }
}

impl Standardizer {
    pub fn apply(&self, d: &mut DesignSet) {
        apply_stats(&mut d.x, &self.x_mean, &self.x_scale);
        apply_stats(&mut d.r, &self.r_mean, &self.r_scale);
        d.v = None;
        d.s = None;
    }
}

struct GridMaps {
    rp: DMatrix<f64>,
    rq: DMatrix<f64>,
}

fn grid_maps(bases: &Bases, curve: &CurveSample, mode: ProjectionMode) -> Result<GridMaps> {
    let grid = &curve.grid;
    let g_rp = cross_gram(&bases.r, &bases.p, grid)?;
    let g_rq = cross_gram(&bases.r, &bases.q, grid)?;
    match mode {
        ProjectionMode::Literal => Ok(GridMaps {
            rp: g_rp.transpose(),
            rq: g_rq.transpose(),
        }),
        ProjectionMode::GramCorrected => {
            let g_rr = cross_gram(&bases.r, &bases.r, grid)?;
            let solve = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
                match g_rr.clone().cholesky() {
                    Some(ch) => Ok(ch.solve(rhs)),
                    None => g_rr.clone().lu().solve(rhs).ok_or_else(|| {
                        FmeError::InvalidInput(format!(
                            "Gram matrix of the curve basis is singular on a grid of {} points; \
                             the grid is too coarse for r = {}",
                            grid.len(),
                            bases.r.dimension()
                        ))
                    }),
                }
            };
            // (G_rr^{-1} G_rp)^T = G_rp^T G_rr^{-1}
            Ok(GridMaps {
                rp: solve(&g_rp)?.transpose(),
                rq: solve(&g_rq)?.transpose(),
            })
        }
    }
}

/// Projects every curve and maps the projections to expert and gating designs.
pub fn build_designs(
    curves: &[CurveSample],
    bases: &Bases,
    mode: ProjectionMode,
) -> Result<DesignSet> {
    let (rd, pd, qd) = bases.dims();
    if pd > rd || qd > rd {
        return Err(FmeError::Identifiability(format!(
            "need p <= r and q <= r, got r = {rd}, p = {pd}, q = {qd}"
        )));
    }
    let n = curves.len();
    let mut x = DMatrix::zeros(n, pd);
    let mut r = DMatrix::zeros(n, qd);
    let mut xhat = DMatrix::zeros(n, rd);
    let mut cache: HashMap<Vec<u64>, GridMaps> = HashMap::new();
    for (i, curve) in curves.iter().enumerate() {
        let key = curve.grid.key();
        if !cache.contains_key(&key) {
            let maps = grid_maps(bases, curve, mode)?;
            cache.insert(key.clone(), maps);
        }
        let maps = &cache[&key];
        let proj = project_curve(curve, &bases.r)?;
        x.row_mut(i).copy_from(&(&maps.rp * &proj).transpose());
        r.row_mut(i).copy_from(&(&maps.rq * &proj).transpose());
        xhat.row_mut(i).copy_from(&proj.transpose());
    }
    Ok(DesignSet {
        x,
        r,
        v: None,
        s: None,
        xhat,
    })
}

/// Adds `v_i = (A_p^{[d1]})^{-T} x_i` and `s_i = (A_q^{[d1]})^{-T} r_i`.
pub fn extend_for_ifme(
    designs: &DesignSet,
    dm_p: &DerivativeMatrices,
    dm_q: &DerivativeMatrices,
) -> Result<DesignSet> {
    if dm_p.dimension() != designs.p() || dm_q.dimension() != designs.q() {
        return Err(FmeError::InvalidInput(format!(
            "derivative matrices of sizes ({}, {}) do not match designs (p = {}, q = {})",
            dm_p.dimension(),
            dm_q.dimension(),
            designs.p(),
            designs.q()
        )));
    }
    let mut out = designs.clone();
    // row form: v_i^T = x_i^T A^{-1}
    out.v = Some(&designs.x * &dm_p.a_d1_inv);
    out.s = Some(&designs.r * &dm_q.a_d1_inv);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{derivative_matrices, derivative_matrices_with, BoundaryRule, TimeGrid};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn sine_curve(m: usize) -> CurveSample {
        let grid = Arc::new(TimeGrid::even(m).unwrap());
        let values = grid
            .points()
            .iter()
            .map(|t| (2.0 * std::f64::consts::PI * t).sin())
            .collect();
        CurveSample::new(grid, values).unwrap()
    }

    #[test]
    fn literal_designs_match_two_step_composition() {
        let bases = Bases::with_dims(10, 8, 8, 3).unwrap();
        let c = sine_curve(100);
        let d = build_designs(std::slice::from_ref(&c), &bases, ProjectionMode::Literal).unwrap();
        let xhat = project_curve(&c, &bases.r).unwrap();
        let g = cross_gram(&bases.r, &bases.p, &c.grid).unwrap();
        let expect = g.transpose() * &xhat;
        for j in 0..8 {
            assert_abs_diff_eq!(d.x[(0, j)], expect[j], epsilon = 1e-12);
            assert_abs_diff_eq!(d.r[(0, j)], expect[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn corrected_designs_integrate_against_coefficient_functions() {
        let bases = Bases::with_dims(12, 10, 6, 3).unwrap();
        let m = 400;
        let c = sine_curve(m);
        let d = build_designs(std::slice::from_ref(&c), &bases, ProjectionMode::GramCorrected)
            .unwrap();
        // beta(t) = b_p(t)^T eta for a fixed eta; compare x^T eta with the Riemann integral
        let eta: Vec<f64> = (0..10).map(|j| (j as f64 - 4.5) / 3.0).collect();
        let beta = crate::basis::reconstruct_function(&eta, &bases.p, &c.grid).unwrap();
        let w = c.grid.riemann_weights();
        let integral: f64 = (0..m).map(|j| c.values[j] * beta[j] * w[j]).sum();
        let lin: f64 = (0..10).map(|j| d.x[(0, j)] * eta[j]).sum();
        assert!((lin - integral).abs() < 0.02, "{lin} vs {integral}");
    }

    #[test]
    fn zero_curves_give_zero_rows() {
        let bases = Bases::with_dims(10, 10, 10, 3).unwrap();
        let grid = Arc::new(TimeGrid::even(30).unwrap());
        let c = CurveSample::new(grid, vec![0.0; 30]).unwrap();
        for mode in [ProjectionMode::Literal, ProjectionMode::GramCorrected] {
            let d = build_designs(&[c.clone(), c.clone()], &bases, mode).unwrap();
            assert!(d.x.iter().chain(d.r.iter()).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn p_larger_than_r_is_rejected() {
        let r = BSplineBasis::cubic(8).unwrap();
        let p = BSplineBasis::cubic(10).unwrap();
        assert!(matches!(
            Bases::new(r.clone(), p.clone(), r.clone()),
            Err(FmeError::Identifiability(_))
        ));
        let bases = Bases {
            r: r.clone(),
            p,
            q: r,
        };
        assert!(matches!(
            build_designs(&[sine_curve(20)], &bases, ProjectionMode::Literal),
            Err(FmeError::Identifiability(_))
        ));
    }

    #[test]
    fn per_grid_caching_is_transparent() {
        let bases = Bases::with_dims(8, 6, 6, 3).unwrap();
        let a = sine_curve(60);
        let b = sine_curve(80);
        let both = build_designs(&[a.clone(), b.clone(), a.clone()], &bases, ProjectionMode::default())
            .unwrap();
        let solo = build_designs(&[b], &bases, ProjectionMode::default()).unwrap();
        assert_eq!(both.x.row(1), solo.x.row(0));
        assert_eq!(both.x.row(0), both.x.row(2));
        let again = build_designs(&[a.clone(), sine_curve(80), a], &bases, ProjectionMode::default())
            .unwrap();
        assert_eq!(both, again);
    }

    #[test]
    fn ifme_designs_invert_the_derivative_map() {
        let bases = Bases::with_dims(10, 10, 8, 3).unwrap();
        let curves: Vec<_> = (0..5)
            .map(|k| {
                let grid = Arc::new(TimeGrid::even(50).unwrap());
                let values = grid.points().iter().map(|t| (t * k as f64).cos()).collect();
                CurveSample::new(grid, values).unwrap()
            })
            .collect();
        let d = build_designs(&curves, &bases, ProjectionMode::default()).unwrap();
        let dm_p = derivative_matrices_with(&bases.p, 1, 3, BoundaryRule::Anchored).unwrap();
        let dm_q = derivative_matrices(&bases.q, 0, 3).unwrap();
        let e = extend_for_ifme(&d, &dm_p, &dm_q).unwrap();
        let v = e.v.as_ref().unwrap();
        let s = e.s.as_ref().unwrap();
        for i in 0..5 {
            let back = dm_p.a_d1.transpose() * v.row(i).transpose();
            let back_s = dm_q.a_d1.transpose() * s.row(i).transpose();
            for j in 0..10 {
                assert_abs_diff_eq!(back[j], d.x[(i, j)], epsilon = 1e-8);
            }
            for j in 0..8 {
                assert_abs_diff_eq!(back_s[j], d.r[(i, j)], epsilon = 1e-8);
            }
        }
        assert!(extend_for_ifme(&d, &dm_q, &dm_p).is_err());
    }

    #[test]
    fn standardization_centres_columns() {
        let bases = Bases::with_dims(6, 6, 6, 3).unwrap();
        let curves: Vec<_> = (1..8)
            .map(|k| {
                let grid = Arc::new(TimeGrid::even(40).unwrap());
                let values = grid.points().iter().map(|t| (t * k as f64).sin() + k as f64).collect();
                CurveSample::new(grid, values).unwrap()
            })
            .collect();
        let mut d = build_designs(&curves, &bases, ProjectionMode::default()).unwrap();
        let raw = d.clone();
        let st = d.standardize();
        for c in d.x.column_iter() {
            assert_abs_diff_eq!(c.sum(), 0.0, epsilon = 1e-10);
            let var = c.iter().map(|v| v * v).sum::<f64>() / 7.0;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-10);
        }
        let mut replay = raw;
        st.apply(&mut replay);
        assert_eq!(replay.x, d.x);
    }
}
