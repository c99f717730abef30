//! Dense two-phase primal simplex for small linear programs
//! `min c^T z  s.t.  A_ub z <= b_ub,  A_eq z = b_eq,  lower <= z <= upper`.

use nalgebra::{DMatrix, DVector};

use crate::error::{FmeError, Result};
use crate::tol;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProgram {
    /// Cost vector, minimized.
    pub objective: Vec<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: Vec<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: Vec<f64>,
    /// Finite lower bounds, zero by default.
    pub lower: Vec<f64>,
    pub upper: Vec<Option<f64>>,
}

impl LinearProgram {
    /// `min c^T z` over `z >= 0` with no further constraints.
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            objective,
            a_ub: DMatrix::zeros(0, n),
            b_ub: Vec::new(),
            a_eq: DMatrix::zeros(0, n),
            b_eq: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![None; n],
        }
    }

    pub fn with_ub(mut self, a: DMatrix<f64>, b: Vec<f64>) -> Self {
        self.a_ub = a;
        self.b_ub = b;
        self
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: Vec<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        let bad = |what: &str| Err(FmeError::InvalidInput(format!("linear program: {what}")));
        if self.a_ub.nrows() > 0 && self.a_ub.ncols() != n
            || self.a_eq.nrows() > 0 && self.a_eq.ncols() != n
        {
            return bad("constraint matrices do not match the number of variables");
        }
        if self.a_ub.nrows() != self.b_ub.len() || self.a_eq.nrows() != self.b_eq.len() {
            return bad("right-hand sides do not match the constraint rows");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bounds do not match the number of variables");
        }
        let finite = self.objective.iter().all(|v| v.is_finite())
            && self.a_ub.iter().all(|v| v.is_finite())
            && self.a_eq.iter().all(|v| v.is_finite())
            && self.b_ub.iter().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite())
            && self.lower.iter().all(|v| v.is_finite())
            && self.upper.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return bad("non-finite data");
        }
        Ok(())
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.objective.iter().zip(z).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of any constraint or bound at `z`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let zv = DVector::from_column_slice(z);
        let mut worst: f64 = 0.0;
        if self.a_ub.nrows() > 0 {
            let lhs = &self.a_ub * &zv;
            for (l, b) in lhs.iter().zip(&self.b_ub) {
                worst = worst.max(l - b);
            }
        }
        if self.a_eq.nrows() > 0 {
            let lhs = &self.a_eq * &zv;
            for (l, b) in lhs.iter().zip(&self.b_eq) {
                worst = worst.max((l - b).abs());
            }
        }
        for (j, v) in z.iter().enumerate() {
            worst = worst.max(self.lower[j] - v);
            if let Some(u) = self.upper[j] {
                worst = worst.max(v - u);
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub z: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LpOptions {
    pub max_iter: usize,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub stall_limit: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self {
            max_iter: 50_000,
            stall_limit: 50,
        }
    }
}

const PIVOT_TOL: f64 = 1e-9;

#[derive(PartialEq)]
enum Phase {
    Optimal,
    Unbounded,
    IterationLimit,
}

struct Tableau {
    m: usize,
    width: usize,
    /// `m` rows of `width` coefficients followed by the right-hand side.
    t: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.width + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.t[i * (self.width + 1) + self.width]
    }

    fn row(&self, i: usize) -> &[f64] {
        let s = self.width + 1;
        &self.t[i * s..(i + 1) * s]
    }

    fn pivot(&mut self, r: usize, e: usize, reduced: &mut [f64]) {
        let s = self.width + 1;
        let p = self.at(r, e);
        for v in &mut self.t[r * s..(r + 1) * s] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.row(r).to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * s + e];
            if f != 0.0 {
                let row = &mut self.t[i * s..(i + 1) * s];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[e] = 0.0;
            }
        }
        let f = reduced[e];
        if f != 0.0 {
            for (v, pv) in reduced.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            reduced[e] = 0.0;
        }
        self.basis[r] = e;
    }

    fn remove_row(&mut self, r: usize) {
        let s = self.width + 1;
        self.t.drain(r * s..(r + 1) * s);
        self.basis.remove(r);
        self.m -= 1;
    }

    /// Reduced costs `c - c_B^T B^{-1} A`, with the negated objective value
    /// in the final slot.
    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = cost.to_vec();
        d.push(0.0);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (v, a) in d.iter_mut().zip(self.row(i)) {
                    *v -= cb * a;
                }
            }
        }
        d
    }

    fn run(
        &mut self,
        cost: &[f64],
        allowed: &[bool],
        opts: &LpOptions,
        iterations: &mut usize,
    ) -> Phase {
        let mut d = self.reduced_costs(cost);
        let cmax = cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let opt_tol = 1e-9 * (1.0 + cmax);
        let mut bland = false;
        let mut stall = 0usize;
        loop {
            let entering = if bland {
                (0..self.width).find(|&j| allowed[j] && d[j] < -opt_tol)
            } else {
                let mut best = None;
                let mut best_val = -opt_tol;
                for j in 0..self.width {
                    if allowed[j] && d[j] < best_val {
                        best_val = d[j];
                        best = Some(j);
                    }
                }
                best
            };
            let Some(e) = entering else {
                return Phase::Optimal;
            };
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..self.m {
                let a = self.at(i, e);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    let eps = 1e-12 * (1.0 + best_ratio.abs().min(ratio.abs()));
                    let better = match leave {
                        None => true,
                        Some(_) if ratio < best_ratio - eps => true,
                        Some(l) if ratio <= best_ratio + eps => {
                            if bland {
                                self.basis[i] < self.basis[l]
                            } else {
                                a > self.at(l, e)
                            }
                        }
                        Some(_) => false,
                    };
                    if better {
                        best_ratio = ratio;
                        leave = Some(i);
                    }
                }
            }
            let Some(r) = leave else {
                return Phase::Unbounded;
            };
            if best_ratio <= 1e-12 {
                stall += 1;
                if stall > opts.stall_limit {
                    bland = true;
                }
            } else {
                stall = 0;
            }
            self.pivot(r, e, &mut d);
            *iterations += 1;
            if *iterations >= opts.max_iter {
                return Phase::IterationLimit;
            }
        }
    }
}

pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution> {
    solve_lp_with(lp, LpOptions::default())
}

pub fn solve_lp_with(lp: &LinearProgram, opts: LpOptions) -> Result<LpSolution> {
    lp.validate()?;
    let n = lp.n_vars();
    let fail = |status: LpStatus, iterations: usize| LpSolution {
        status,
        z: lp.lower.clone(),
        objective_value: f64::NAN,
        iterations,
    };

    // rows of the shifted problem in z' = z - lower >= 0
    let mut le_rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut eq_rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let shift = |row: Vec<f64>, b: f64| -> (Vec<f64>, f64) {
        let adj: f64 = row.iter().zip(&lp.lower).map(|(a, l)| a * l).sum();
        (row, b - adj)
    };
    for i in 0..lp.a_ub.nrows() {
        le_rows.push(shift(lp.a_ub.row(i).iter().copied().collect(), lp.b_ub[i]));
    }
    for (j, u) in lp.upper.iter().enumerate() {
        if let Some(u) = u {
            let mut row = vec![0.0; n];
            row[j] = 1.0;
            le_rows.push((row, u - lp.lower[j]));
        }
    }
    for i in 0..lp.a_eq.nrows() {
        eq_rows.push(shift(lp.a_eq.row(i).iter().copied().collect(), lp.b_eq[i]));
    }

    // presolve empty rows, equilibrate the rest
    let feas = tol::LP_FEASIBILITY;
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for (row, b, is_eq) in le_rows
        .into_iter()
        .map(|(r, b)| (r, b, false))
        .chain(eq_rows.into_iter().map(|(r, b)| (r, b, true)))
    {
        let amax = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if amax == 0.0 {
            let ok = if is_eq { b.abs() <= feas } else { b >= -feas };
            if !ok {
                return Ok(fail(LpStatus::Infeasible, 0));
            }
            continue;
        }
        let row: Vec<f64> = row.iter().map(|v| v / amax).collect();
        rows.push((row, b / amax, is_eq));
    }

    let m = rows.len();
    let n_slack = rows.iter().filter(|r| !r.2).count();
    let needs_art: Vec<bool> = rows.iter().map(|(_, b, is_eq)| *is_eq || *b < 0.0).collect();
    let n_art = needs_art.iter().filter(|v| **v).count();
    let width = n + n_slack + n_art;
    let mut tab = Tableau {
        m,
        width,
        t: vec![0.0; m * (width + 1)],
        basis: vec![0; m],
    };
    let mut slack_col = n;
    let mut art_col = n + n_slack;
    let s = width + 1;
    for (i, (row, b, is_eq)) in rows.iter().enumerate() {
        let sign = if *b < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab.t[i * s + j] = sign * row[j];
        }
        tab.t[i * s + width] = sign * b;
        if !is_eq {
            tab.t[i * s + slack_col] = sign;
            if !needs_art[i] {
                tab.basis[i] = slack_col;
            }
            slack_col += 1;
        }
        if needs_art[i] {
            tab.t[i * s + art_col] = 1.0;
            tab.basis[i] = art_col;
            art_col += 1;
        }
    }
    let is_art = |j: usize| j >= n + n_slack;
    let mut iterations = 0usize;

    if n_art > 0 {
        let cost1: Vec<f64> = (0..width).map(|j| if is_art(j) { 1.0 } else { 0.0 }).collect();
        let allowed = vec![true; width];
        let phase = tab.run(&cost1, &allowed, &opts, &mut iterations);
        if phase == Phase::IterationLimit {
            return Ok(fail(LpStatus::IterationLimit, iterations));
        }
        let infeas: f64 = (0..tab.m)
            .filter(|&i| is_art(tab.basis[i]))
            .map(|i| tab.rhs(i).max(0.0))
            .sum();
        let bscale = rows.iter().fold(1.0f64, |a, r| a.max(r.1.abs()));
        if infeas > 1e-9 * bscale {
            return Ok(fail(LpStatus::Infeasible, iterations));
        }
        // drive artificials out of the basis; drop redundant rows
        let mut i = 0;
        while i < tab.m {
            if is_art(tab.basis[i]) {
                let col = (0..n + n_slack)
                    .filter(|&j| tab.at(i, j).abs() > PIVOT_TOL)
                    .max_by(|&a, &b| tab.at(i, a).abs().total_cmp(&tab.at(i, b).abs()));
                match col {
                    Some(j) => {
                        let mut dummy = vec![0.0; width + 1];
                        tab.pivot(i, j, &mut dummy);
                        i += 1;
                    }
                    None => tab.remove_row(i),
                }
            } else {
                i += 1;
            }
        }
    }

    let mut cost2 = vec![0.0; width];
    cost2[..n].copy_from_slice(&lp.objective);
    let allowed: Vec<bool> = (0..width).map(|j| !is_art(j)).collect();
    let status = match tab.run(&cost2, &allowed, &opts, &mut iterations) {
        Phase::Optimal => LpStatus::Optimal,
        Phase::Unbounded => return Ok(fail(LpStatus::Unbounded, iterations)),
        Phase::IterationLimit => LpStatus::IterationLimit,
    };

    // basic solution, refined by a direct solve with the basis matrix
    let mut x = vec![0.0; width];
    for i in 0..tab.m {
        x[tab.basis[i]] = tab.rhs(i).max(0.0);
    }
    if tab.m > 0 {
        if let Some(refined) = polish(&rows, &needs_art, n, n_slack, &tab.basis) {
            for (i, v) in refined.iter().enumerate() {
                x[tab.basis[i]] = v.max(0.0);
            }
        }
    }
    let z: Vec<f64> = (0..n).map(|j| lp.lower[j] + x[j]).collect();
    let viol = lp.max_violation(&z);
    if status == LpStatus::Optimal && viol > 1e-7 {
        log::warn!("simplex solution violates constraints by {viol:.3e}");
    }
    Ok(LpSolution {
        status,
        objective_value: lp.value(&z),
        z,
        iterations,
    })
}

/// Re-solves `B x_B = b` for the final basis to remove accumulated pivoting
/// error. Returns `None` if the basis matrix is singular or the refined point
/// is noticeably infeasible.
fn polish(
    rows: &[(Vec<f64>, f64, bool)],
    needs_art: &[bool],
    n: usize,
    n_slack: usize,
    basis: &[usize],
) -> Option<Vec<f64>> {
    let m_full = rows.len();
    // column j of the standard-form matrix, in the original row signs
    let mut slack_of_row = vec![usize::MAX; m_full];
    let mut art_of_row = vec![usize::MAX; m_full];
    let mut sc = n;
    let mut ac = n + n_slack;
    for (i, (_, _, is_eq)) in rows.iter().enumerate() {
        if !is_eq {
            slack_of_row[i] = sc;
            sc += 1;
        }
        if needs_art[i] {
            art_of_row[i] = ac;
            ac += 1;
        }
    }
    let column = |j: usize| -> Vec<f64> {
        (0..m_full)
            .map(|i| {
                let sign = if rows[i].1 < 0.0 { -1.0 } else { 1.0 };
                if j < n {
                    sign * rows[i].0[j]
                } else if j == slack_of_row[i] {
                    sign
                } else if j == art_of_row[i] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let b: Vec<f64> = rows.iter().map(|r| r.1.abs()).collect();
    let m = basis.len();
    let bmat = DMatrix::from_fn(m_full, m, |i, c| column(basis[c])[i]);
    let rhs = DVector::from_vec(b);
    let xb = if m == m_full {
        bmat.clone().lu().solve(&rhs)?
    } else {
        // rows were dropped as redundant: least squares on the full system
        let normal = bmat.transpose() * &bmat;
        normal.lu().solve(&(bmat.transpose() * &rhs))?
    };
    if xb.iter().any(|v| !v.is_finite() || *v < -1e-7) {
        return None;
    }
    let resid = (&bmat * &xb - &rhs).amax();
    if resid > 1e-9 {
        return None;
    }
    Some(xb.iter().copied().collect())
}
