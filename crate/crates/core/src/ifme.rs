//! Interpretable functional mixture of experts: sparsity on two chosen
//! derivatives of the expert and gating coefficient functions, fitted by EM
//! with Dantzig-selector M-steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{derivative_matrices_with, BSplineBasis, BoundaryRule, DerivativeMatrices, TimeGrid};
use crate::design::{extend_for_ifme, Bases, DesignSet};
use crate::em::{self, EmProblem, FitOptions, FitReport};
use crate::error::{FmeError, Result};
use crate::fme::{check_fit_inputs, check_y, component_mass};
use crate::fme_lasso::LassoPenalty;
use crate::metrics::{count_nonzero, posteriors, MixturePredictor};
use crate::optim::{dantzig_select, gates, log_gates};
use crate::tol;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DerivativeSpec {
    pub d1: usize,
    pub d2: usize,
    /// Weight of the d2 term in the expert penalty.
    pub rho: f64,
    /// Weight of the d2 term in the gating penalty.
    pub varrho: f64,
    #[serde(default)]
    pub boundary: BoundaryRule,
}

impl Default for DerivativeSpec {
    fn default() -> Self {
        Self {
            d1: 0,
            d2: 3,
            rho: 1e-3,
            varrho: 1e2,
            boundary: BoundaryRule::Forward,
        }
    }
}

impl DerivativeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d1 >= self.d2 {
            return Err(FmeError::InvalidInput(format!(
                "need d1 < d2, got d1 = {}, d2 = {}",
                self.d1, self.d2
            )));
        }
        if !(self.rho > 0.0 && self.varrho > 0.0) || !self.rho.is_finite() || !self.varrho.is_finite() {
            return Err(FmeError::InvalidInput("rho and varrho must be positive".into()));
        }
        Ok(())
    }

    pub fn matrices(&self, basis: &BSplineBasis) -> Result<DerivativeMatrices> {
        derivative_matrices_with(basis, self.d1, self.d2, self.boundary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfmeExpertParams {
    pub beta0: f64,
    pub gamma_d1: Vec<f64>,
    /// Derived: `link_p * gamma_d1`.
    pub gamma_d2: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfmeGate {
    pub alpha0: f64,
    pub omega_d1: Vec<f64>,
    /// Derived: `link_q * omega_d1`.
    pub omega_d2: Vec<f64>,
}

/// The `K - 1` stored gates; gate `K` is the zero reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IfmeGatingParams {
    pub gates: Vec<IfmeGate>,
}

fn apply(link: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (link * DVector::from_column_slice(v)).iter().copied().collect()
}

impl IfmeGatingParams {
    pub fn zeros(k: usize, q: usize) -> Self {
        Self {
            gates: (0..k.saturating_sub(1))
                .map(|_| IfmeGate {
                    alpha0: 0.0,
                    omega_d1: vec![0.0; q],
                    omega_d2: vec![0.0; q],
                })
                .collect(),
        }
    }

    /// `(K - 1) x (q + 1)` matrix of `(alpha0, omega_d1)` rows.
    pub fn matrix(&self, q: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.gates.len(), q + 1, |k, j| {
            if j == 0 {
                self.gates[k].alpha0
            } else {
                self.gates[k].omega_d1[j - 1]
            }
        })
    }

    pub fn from_matrix(coef: &DMatrix<f64>, link: &DMatrix<f64>) -> Self {
        Self {
            gates: coef
                .row_iter()
                .map(|row| {
                    let omega: Vec<f64> = row.iter().skip(1).copied().collect();
                    IfmeGate {
                        alpha0: row[0],
                        omega_d2: apply(link, &omega),
                        omega_d1: omega,
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfmeModel {
    pub k: usize,
    pub gating: IfmeGatingParams,
    pub experts: Vec<IfmeExpertParams>,
    pub spec: DerivativeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bases: Option<Bases>,
}

impl IfmeModel {
    pub fn p(&self) -> usize {
        self.experts.first().map_or(0, |e| e.gamma_d1.len())
    }

    pub fn q(&self) -> usize {
        match &self.bases {
            Some(b) => b.q.dimension(),
            None => self.gating.gates.first().map_or(0, |g| g.omega_d1.len()),
        }
    }

    /// Only the d1 coefficients count as free.
    pub fn df(&self) -> usize {
        count_nonzero(self.gating.gates.iter().flat_map(|g| g.omega_d1.iter()))
            + (self.k - 1)
            + count_nonzero(self.experts.iter().flat_map(|e| e.gamma_d1.iter()))
            + 2 * self.k
    }

    /// Derivative matrices of the expert and gating bases.
    pub fn derivative_matrices(&self) -> Result<(DerivativeMatrices, DerivativeMatrices)> {
        let bases = self
            .bases
            .as_ref()
            .ok_or_else(|| FmeError::InvalidInput("model carries no bases".into()))?;
        Ok((self.spec.matrices(&bases.p)?, self.spec.matrices(&bases.q)?))
    }

    /// `(v, s)` designs, derived from `(x, r)` when missing.
    fn ifme_designs<'a>(&self, designs: &'a DesignSet) -> Result<std::borrow::Cow<'a, DesignSet>> {
        if designs.v.is_some() && designs.s.is_some() {
            return Ok(std::borrow::Cow::Borrowed(designs));
        }
        let (dp, dq) = self.derivative_matrices()?;
        Ok(std::borrow::Cow::Owned(extend_for_ifme(designs, &dp, &dq)?))
    }

    fn means(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = v.nrows();
        let mut mu = DMatrix::zeros(n, self.k);
        for (k, e) in self.experts.iter().enumerate() {
            let m = v * DVector::from_column_slice(&e.gamma_d1);
            for i in 0..n {
                mu[(i, k)] = e.beta0 + m[i];
            }
        }
        mu
    }

    fn log_joint_raw(&self, v: &DMatrix<f64>, s: &DMatrix<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let mut lj = log_gates(&self.gating.matrix(s.ncols()), s);
        let mu = self.means(v);
        for i in 0..y.len() {
            for k in 0..self.k {
                lj[(i, k)] += em::log_normal(y[i], mu[(i, k)], self.experts[k].sigma2);
            }
        }
        lj
    }

    fn check_dims(&self, v: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<()> {
        let q = self.gating.gates.first().map_or(s.ncols(), |g| g.omega_d1.len());
        if v.ncols() != self.p() || s.ncols() != q {
            return Err(FmeError::InvalidInput(format!(
                "model expects p = {}, q = {q} but designs have p = {}, q = {}",
                self.p(),
                v.ncols(),
                s.ncols()
            )));
        }
        Ok(())
    }
}

fn vs(d: &DesignSet) -> Result<(&DMatrix<f64>, &DMatrix<f64>)> {
    match (&d.v, &d.s) {
        (Some(v), Some(s)) => Ok((v, s)),
        _ => Err(FmeError::InvalidInput("designs lack the derivative-space columns".into())),
    }
}

impl MixturePredictor for IfmeModel {
    fn n_components(&self) -> usize {
        self.k
    }

    fn components(&self, designs: &DesignSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let d = self.ifme_designs(designs)?;
        let (v, s) = vs(&d)?;
        self.check_dims(v, s)?;
        Ok((gates(&self.gating.matrix(s.ncols()), s), self.means(v)))
    }

    fn log_joint(&self, designs: &DesignSet, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_y(designs, y)?;
        let d = self.ifme_designs(designs)?;
        let (v, s) = vs(&d)?;
        self.check_dims(v, s)?;
        Ok(self.log_joint_raw(v, s, y))
    }
}

/// Mixture density with gates on `s_i` and expert means on `v_i`.
pub fn ifme_density(model: &IfmeModel, v_i: &[f64], s_i: &[f64], y_i: f64) -> f64 {
    let pi = crate::optim::gate_probs(&model.gating.matrix(s_i.len()), s_i);
    let terms: Vec<f64> = model
        .experts
        .iter()
        .zip(&pi)
        .map(|(e, p)| {
            let mean = e.beta0 + e.gamma_d1.iter().zip(v_i).map(|(a, b)| a * b).sum::<f64>();
            p.ln() + em::log_normal(y_i, mean, e.sigma2)
        })
        .collect();
    crate::optim::log_sum_exp(&terms).exp()
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `lambda sum (|gamma_d1| + rho |gamma_d2|) + chi sum (|omega_d1| + varrho |omega_d2|)`.
pub fn ifme_penalty(model: &IfmeModel, pen: LassoPenalty) -> f64 {
    let s = &model.spec;
    let experts: f64 = model
        .experts
        .iter()
        .map(|e| l1(&e.gamma_d1) + s.rho * l1(&e.gamma_d2))
        .sum();
    let gating: f64 = model
        .gating
        .gates
        .iter()
        .map(|g| l1(&g.omega_d1) + s.varrho * l1(&g.omega_d2))
        .sum();
    pen.lambda * experts + pen.chi * gating
}

pub fn e_step_ifme(model: &IfmeModel, designs: &DesignSet, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    posteriors(&model.log_joint(designs, y)?)
}

/// `[0 | link | -I]`.
fn constraint(link: &DMatrix<f64>) -> DMatrix<f64> {
    let d = link.nrows();
    let mut a = DMatrix::zeros(d, 2 * d + 1);
    a.view_mut((0, 1), (d, d)).copy_from(link);
    for j in 0..d {
        a[(j, d + 1 + j)] = -1.0;
    }
    a
}

/// `[sqrt(w) | sqrt(w) * z | 0]` and `sqrt(w) * c`, with an extra scale.
fn weighted_system(z: &DMatrix<f64>, c: &DVector<f64>, w: &DVector<f64>, scale: f64) -> (DMatrix<f64>, DVector<f64>) {
    let (n, d) = z.shape();
    let mut xw = DMatrix::zeros(n, 2 * d + 1);
    let mut cw = DVector::zeros(n);
    for i in 0..n {
        let sw = w[i].max(0.0).sqrt() * scale;
        xw[(i, 0)] = sw;
        for j in 0..d {
            xw[(i, j + 1)] = sw * z[(i, j)];
        }
        cw[i] = sw * c[i];
    }
    (xw, cw)
}

fn penalty_weights(d: usize, second: f64) -> Vec<f64> {
    let mut o = vec![0.0];
    o.extend(std::iter::repeat_n(1.0, d));
    o.extend(std::iter::repeat_n(second, d));
    o
}

const GATING_MAX_SWEEPS: usize = 20;

/// Gating M-step: Gauss-Seidel sweeps over the gates, each gate solving a
/// constrained Dantzig LP on the quadratic approximation of the gating
/// log-likelihood, until the coefficients settle.
pub fn m_step_gating_dantzig(
    gating: &IfmeGatingParams,
    s: &DMatrix<f64>,
    tau: &DMatrix<f64>,
    chi: f64,
    spec: &DerivativeSpec,
    dm_q: &DerivativeMatrices,
) -> Result<IfmeGatingParams> {
    let g = gating.gates.len();
    if g == 0 {
        return Ok(gating.clone());
    }
    let (n, q) = s.shape();
    if tau.shape() != (n, g + 1) || dm_q.dimension() != q {
        return Err(FmeError::InvalidInput("gating M-step: inconsistent shapes".into()));
    }
    if !(chi >= 0.0) {
        return Err(FmeError::InvalidInput("chi must be non-negative".into()));
    }
    let link = &dm_q.link;
    let a = constraint(link);
    let omega = penalty_weights(q, spec.varrho);
    let mut xi = gating.matrix(q);
    for _ in 0..GATING_MAX_SWEEPS {
        let prev = xi.clone();
        for k in 0..g {
            let pi = gates(&xi, s);
            let mut w = DVector::zeros(n);
            let mut c = DVector::zeros(n);
            for i in 0..n {
                let p = pi[(i, k)];
                let wi = (p * (1.0 - p)).max(tol::WEIGHT_FLOOR);
                let score = xi[(k, 0)] + (0..q).map(|j| xi[(k, j + 1)] * s[(i, j)]).sum::<f64>();
                w[i] = wi;
                c[i] = score + (tau[(i, k)] - p) / wi;
            }
            let (xw, cw) = weighted_system(s, &c, &w, 1.0);
            match dantzig_select(&xw, &cw, &omega, Some(&a), chi) {
                Ok(fit) if fit.coef.iter().all(|v| v.is_finite()) => {
                    for j in 0..=q {
                        xi[(k, j)] = fit.coef[j];
                    }
                }
                Ok(_) => log::warn!("gate {} kept: non-finite LP solution", k + 1),
                Err(FmeError::GatingUpdate(msg)) => {
                    log::warn!("gate {} kept at its previous value: {msg}", k + 1);
                }
                Err(e) => return Err(e),
            }
        }
        let moved = (&xi - &prev).amax();
        if moved <= tol::INNER_CONVERGENCE * (1.0 + xi.amax()) {
            break;
        }
    }
    Ok(IfmeGatingParams::from_matrix(&xi, link))
}

/// Expert M-step: constrained Dantzig LP for `(beta0, gamma_d1)` with the
/// variance held at its previous value, then the weighted residual variance.
pub fn m_step_experts_dantzig(
    expert: &IfmeExpertParams,
    v: &DMatrix<f64>,
    y: &DVector<f64>,
    tau_k: &DVector<f64>,
    lambda: f64,
    spec: &DerivativeSpec,
    dm_p: &DerivativeMatrices,
) -> Result<IfmeExpertParams> {
    let (n, p) = v.shape();
    if y.len() != n || tau_k.len() != n || dm_p.dimension() != p || expert.gamma_d1.len() != p {
        return Err(FmeError::InvalidInput("expert M-step: inconsistent shapes".into()));
    }
    if !(lambda >= 0.0) {
        return Err(FmeError::InvalidInput("lambda must be non-negative".into()));
    }
    let nk = tau_k.sum();
    if nk < tol::EMPTY_COMPONENT {
        return Err(FmeError::EmptyComponent(format!("expert mass {nk:.3e}")));
    }
    let link = &dm_p.link;
    let (xw, cw) = weighted_system(v, y, tau_k, 1.0 / expert.sigma2.sqrt());
    let (mut beta0, mut gamma) = (expert.beta0, expert.gamma_d1.clone());
    match dantzig_select(&xw, &cw, &penalty_weights(p, spec.rho), Some(&constraint(link)), lambda) {
        Ok(fit) if fit.coef.iter().all(|v| v.is_finite()) => {
            beta0 = fit.coef[0];
            gamma = fit.coef.iter().skip(1).take(p).copied().collect();
        }
        Ok(_) => log::warn!("expert coefficients kept: non-finite LP solution"),
        Err(FmeError::GatingUpdate(msg)) => log::warn!("expert coefficients kept: {msg}"),
        Err(e) => return Err(e),
    }
    let fit = v * DVector::from_column_slice(&gamma);
    let rss: f64 = (0..n).map(|i| tau_k[i] * (y[i] - beta0 - fit[i]).powi(2)).sum();
    Ok(IfmeExpertParams {
        beta0,
        gamma_d2: apply(link, &gamma),
        gamma_d1: gamma,
        sigma2: (rss / nk).max(tol::SIGMA2_FLOOR),
    })
}

struct IfmeProblem<'a> {
    v: &'a DMatrix<f64>,
    s: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    k: usize,
    pen: LassoPenalty,
    spec: DerivativeSpec,
    dm_p: DerivativeMatrices,
    dm_q: DerivativeMatrices,
    bases: Option<Bases>,
}

impl EmProblem for IfmeProblem<'_> {
    type Params = IfmeModel;

    fn n(&self) -> usize {
        self.y.len()
    }

    fn k(&self) -> usize {
        self.k
    }

    fn neutral(&self) -> IfmeModel {
        let w = vec![1.0; self.y.len()];
        let (mean, var) = em::weighted_moments(self.y, &w);
        let p = self.v.ncols();
        IfmeModel {
            k: self.k,
            gating: IfmeGatingParams::zeros(self.k, self.s.ncols()),
            experts: (0..self.k)
                .map(|_| IfmeExpertParams {
                    beta0: mean,
                    gamma_d1: vec![0.0; p],
                    gamma_d2: vec![0.0; p],
                    sigma2: var.max(tol::SIGMA2_FLOOR),
                })
                .collect(),
            spec: self.spec,
            bases: self.bases.clone(),
        }
    }

    fn log_joint(&self, p: &IfmeModel) -> DMatrix<f64> {
        p.log_joint_raw(self.v, self.s, self.y)
    }

    fn penalty(&self, p: &IfmeModel) -> f64 {
        ifme_penalty(p, self.pen)
    }

    fn m_step(&self, p: &IfmeModel, tau: &DMatrix<f64>) -> Result<IfmeModel> {
        let mut experts = Vec::with_capacity(self.k);
        for (k, e) in p.experts.iter().enumerate() {
            component_mass(tau, k)?;
            experts.push(m_step_experts_dantzig(
                e,
                self.v,
                self.y,
                &tau.column(k).into_owned(),
                self.pen.lambda,
                &self.spec,
                &self.dm_p,
            )?);
        }
        let gating = m_step_gating_dantzig(&p.gating, self.s, tau, self.pen.chi, &self.spec, &self.dm_q)?;
        Ok(IfmeModel {
            experts,
            gating,
            ..p.clone()
        })
    }

    fn canonicalize(&self, mut p: IfmeModel, tau: &DMatrix<f64>) -> Result<IfmeModel> {
        let keys: Vec<Vec<f64>> = p
            .experts
            .iter()
            .map(|e| {
                let mut v = vec![e.beta0];
                v.extend_from_slice(&e.gamma_d1);
                v.push(e.sigma2);
                v
            })
            .collect();
        let perm = em::expert_order(&keys);
        p.experts = perm.iter().map(|&o| p.experts[o].clone()).collect();
        let q = self.s.ncols();
        let coef = em::permute_gating(&p.gating.matrix(q), &perm);
        p.gating = IfmeGatingParams::from_matrix(&coef, &self.dm_q.link);
        let tau = em::permute_columns(tau, &perm);
        let refit = IfmeModel {
            gating: m_step_gating_dantzig(&p.gating, self.s, &tau, self.pen.chi, &self.spec, &self.dm_q)?,
            ..p.clone()
        };
        // the Dantzig refit is not guaranteed to improve the objective
        let before = em::evaluate(self, &p)?.0;
        match em::evaluate(self, &refit) {
            Ok((after, _, _)) if after >= before => Ok(refit),
            _ => Ok(p),
        }
    }

    fn monotone(&self) -> bool {
        false
    }

    fn df(&self, p: &IfmeModel) -> usize {
        p.df()
    }
}

/// EM fit of the interpretable model. `designs` must come from `bases`; the
/// derivative-space columns are added when missing.
pub fn fit_ifme(
    designs: &DesignSet,
    bases: &Bases,
    y: &DVector<f64>,
    k: usize,
    pen: LassoPenalty,
    spec: DerivativeSpec,
    opts: &FitOptions,
) -> Result<(IfmeModel, FitReport)> {
    check_fit_inputs(designs, y, k)?;
    LassoPenalty::new(pen.lambda, pen.chi)?;
    spec.validate()?;
    let (_, pd, qd) = bases.dims();
    if designs.p() != pd || designs.q() != qd {
        return Err(FmeError::InvalidInput(format!(
            "designs have p = {}, q = {} but the bases have p = {pd}, q = {qd}",
            designs.p(),
            designs.q()
        )));
    }
    let dm_p = spec.matrices(&bases.p)?;
    let dm_q = spec.matrices(&bases.q)?;
    let extended;
    let d = if designs.v.is_some() && designs.s.is_some() {
        designs
    } else {
        extended = extend_for_ifme(designs, &dm_p, &dm_q)?;
        &extended
    };
    let (v, s) = vs(d)?;
    let prob = IfmeProblem {
        v,
        s,
        y,
        k,
        pen,
        spec,
        dm_p,
        dm_q,
        bases: Some(bases.clone()),
    };
    em::run_em(&prob, opts)
}

/// Estimated coefficient functions on `grid`: `(alpha_hat, beta_hat)` with
/// one row per stored gate and per expert.
pub fn reconstruct_networks(model: &IfmeModel, grid: &TimeGrid) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bases = model
        .bases
        .as_ref()
        .ok_or_else(|| FmeError::InvalidInput("model carries no bases".into()))?;
    let (dp, dq) = model.derivative_matrices()?;
    let ep = bases.p.evaluation_matrix(grid)?;
    let eq = bases.q.evaluation_matrix(grid)?;
    let m = grid.len();
    let mut beta = DMatrix::zeros(model.k, m);
    for (k, e) in model.experts.iter().enumerate() {
        let f = &ep * (&dp.a_d1_inv * DVector::from_column_slice(&e.gamma_d1));
        beta.row_mut(k).copy_from(&f.transpose());
    }
    let mut alpha = DMatrix::zeros(model.gating.gates.len(), m);
    for (k, g) in model.gating.gates.iter().enumerate() {
        let f = &eq * (&dq.a_d1_inv * DVector::from_column_slice(&g.omega_d1));
        alpha.row_mut(k).copy_from(&f.transpose());
    }
    Ok((alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BSplineBasis;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dm(p: usize) -> DerivativeMatrices {
        DerivativeSpec::default().matrices(&BSplineBasis::cubic(p).unwrap()).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, k: usize, p: usize, q: usize) -> IfmeModel {
        let (dp, dq) = (dm(p), dm(q));
        let coef = DMatrix::from_fn(k - 1, q + 1, |_, _| rng.random_range(-1.0..1.0));
        IfmeModel {
            k,
            gating: IfmeGatingParams::from_matrix(&coef, &dq.link),
            experts: (0..k)
                .map(|_| {
                    let g: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                    IfmeExpertParams {
                        beta0: rng.random_range(-2.0..2.0),
                        gamma_d2: apply(&dp.link, &g),
                        gamma_d1: g,
                        sigma2: rng.random_range(0.3..2.0),
                    }
                })
                .collect(),
            spec: DerivativeSpec::default(),
            bases: None,
        }
    }

    #[test]
    fn density_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 3, 6, 7);
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = 0.7;
        let mut scores: Vec<f64> = m
            .gating
            .gates
            .iter()
            .map(|g| g.alpha0 + g.omega_d1.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        scores.push(0.0);
        let z: f64 = scores.iter().map(|v| v.exp()).sum();
        let mut oracle = 0.0;
        for (k, e) in m.experts.iter().enumerate() {
            let mu = e.beta0 + e.gamma_d1.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            let phi = (-(y - mu).powi(2) / (2.0 * e.sigma2)).exp() / (2.0 * std::f64::consts::PI * e.sigma2).sqrt();
            oracle += scores[k].exp() / z * phi;
        }
        assert_abs_diff_eq!(ifme_density(&m, &v, &s, y), oracle, epsilon = 1e-12);
    }

    #[test]
    fn penalty_by_hand() {
        let dp = dm(6);
        let mut g = vec![0.0; 6];
        g[0] = 2.0;
        let d2 = apply(&dp.link, &g);
        let model = IfmeModel {
            k: 1,
            gating: IfmeGatingParams::zeros(1, 6),
            experts: vec![IfmeExpertParams {
                beta0: 3.0,
                gamma_d1: g,
                gamma_d2: d2.clone(),
                sigma2: 1.0,
            }],
            spec: DerivativeSpec::default(),
            bases: None,
        };
        // column 0 of the link, scaled by 2
        let hand: f64 = (0..6).map(|j| (2.0 * dp.link[(j, 0)]).abs()).sum();
        assert_abs_diff_eq!(l1(&d2), hand, epsilon = 1e-9);
        let pen = LassoPenalty::new(1.0, 0.0).unwrap();
        assert_abs_diff_eq!(ifme_penalty(&model, pen), 2.0 + 1e-3 * hand, epsilon = 1e-9);
        assert_eq!(ifme_penalty(&model, LassoPenalty::new(0.0, 5.0).unwrap()), 0.0);
    }

    #[test]
    fn zero_gating_is_uniform() {
        let m = IfmeModel {
            gating: IfmeGatingParams::zeros(4, 6),
            ..random_model(&mut ChaCha8Rng::seed_from_u64(2), 4, 6, 6)
        };
        let pi = crate::optim::gate_probs(&m.gating.matrix(6), &[0.3, -1.0, 2.0, 0.0, 1.0, -0.5]);
        assert!(pi.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    fn ifme_data(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let v = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * v[(i, 0)] + rng.random_range(-0.3..0.3));
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
        (v, y, w)
    }

    #[test]
    fn unpenalized_expert_update_is_weighted_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = 6;
        let dp = dm(p);
        let (v, y, w) = ifme_data(&mut rng, 80, p);
        let start = IfmeExpertParams {
            beta0: 0.0,
            gamma_d1: vec![0.0; p],
            gamma_d2: vec![0.0; p],
            sigma2: 0.5,
        };
        let e = m_step_experts_dantzig(&start, &v, &y, &w, 0.0, &DerivativeSpec::default(), &dp).unwrap();
        // normal equations with an intercept column
        let aug = v.clone().insert_column(0, 1.0);
        let wm = DMatrix::from_diagonal(&w);
        let b = (aug.transpose() * &wm * &aug).lu().solve(&(aug.transpose() * &wm * &y)).unwrap();
        assert_abs_diff_eq!(e.beta0, b[0], epsilon = 1e-6);
        for j in 0..p {
            assert_abs_diff_eq!(e.gamma_d1[j], b[j + 1], epsilon = 1e-6);
        }
        let d2 = apply(&dp.link, &e.gamma_d1);
        assert!(d2.iter().zip(&e.gamma_d2).all(|(a, b)| (a - b).abs() <= 1e-8));
        let fit = &v * DVector::from_column_slice(&e.gamma_d1);
        let rss: f64 = (0..80).map(|i| w[i] * (y[i] - e.beta0 - fit[i]).powi(2)).sum();
        assert_abs_diff_eq!(e.sigma2, rss / w.sum(), epsilon = 1e-12);
    }

    #[test]
    fn huge_lambda_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 6;
        let (v, y, w) = ifme_data(&mut rng, 60, p);
        let start = IfmeExpertParams {
            beta0: 0.0,
            gamma_d1: vec![0.0; p],
            gamma_d2: vec![0.0; p],
            sigma2: 1.0,
        };
        let e = m_step_experts_dantzig(&start, &v, &y, &w, 1e9, &DerivativeSpec::default(), &dm(p)).unwrap();
        // the bound applies to the intercept row as well
        assert!(e.gamma_d1.iter().all(|g| g.abs() < 1e-9));
        assert_eq!(e.beta0, 0.0);
        let m2: f64 = (0..60).map(|i| w[i] * y[i] * y[i]).sum::<f64>() / w.sum();
        assert_abs_diff_eq!(e.sigma2, m2, epsilon = 1e-10);
    }

    #[test]
    fn unpenalized_gating_update_matches_newton() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = 6;
        let dq = dm(q);
        let n = 200;
        let s = DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..3 {
            let mut tau = DMatrix::from_fn(n, 3, |_, _| rng.random_range(0.05..1.0));
            for mut row in tau.row_iter_mut() {
                let t = row.sum();
                row /= t;
            }
            let out = m_step_gating_dantzig(&IfmeGatingParams::zeros(3, q), &s, &tau, 0.0, &DerivativeSpec::default(), &dq).unwrap();
            let nr = crate::optim::nr_maximize(&DMatrix::zeros(2, q + 1), &s, &tau, 200).unwrap();
            assert!((out.matrix(q) - nr).amax() < 1e-5);
            for g in &out.gates {
                let d2 = apply(&dq.link, &g.omega_d1);
                assert!(d2.iter().zip(&g.omega_d2).all(|(a, b)| (a - b).abs() <= 1e-8));
            }
        }
    }

    #[test]
    fn huge_chi_gives_intercept_only_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = 6;
        let n = 50;
        let s = DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
        let tau = DMatrix::from_fn(n, 2, |i, j| if (i % 3 == 0) == (j == 0) { 0.9 } else { 0.1 });
        let out = m_step_gating_dantzig(&IfmeGatingParams::zeros(2, q), &s, &tau, 1e9, &DerivativeSpec::default(), &dm(q)).unwrap();
        assert!(out.gates[0].omega_d1.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn reconstruction_round_trip() {
        let bases = Bases::with_dims(8, 8, 6, 3).unwrap();
        let spec = DerivativeSpec::default();
        let dp = spec.matrices(&bases.p).unwrap();
        let dq = spec.matrices(&bases.q).unwrap();
        let eta: Vec<f64> = (0..8).map(|j| (j as f64 * 0.7).sin()).collect();
        let zeta: Vec<f64> = (0..6).map(|j| j as f64 - 2.5).collect();
        let gamma = apply(&dp.a_d1, &eta);
        let omega = apply(&dq.a_d1, &zeta);
        let mut coef = DMatrix::zeros(1, 7);
        for j in 0..6 {
            coef[(0, j + 1)] = omega[j];
        }
        let model = IfmeModel {
            k: 2,
            gating: IfmeGatingParams::from_matrix(&coef, &dq.link),
            experts: vec![
                IfmeExpertParams {
                    beta0: 0.0,
                    gamma_d2: apply(&dp.link, &gamma),
                    gamma_d1: gamma,
                    sigma2: 1.0,
                },
                IfmeExpertParams {
                    beta0: 0.0,
                    gamma_d1: vec![0.0; 8],
                    gamma_d2: vec![0.0; 8],
                    sigma2: 1.0,
                },
            ],
            spec,
            bases: Some(bases.clone()),
        };
        let grid = TimeGrid::even(50).unwrap();
        let (alpha, beta) = reconstruct_networks(&model, &grid).unwrap();
        let want_b = crate::basis::reconstruct_function(&eta, &bases.p, &grid).unwrap();
        let want_a = crate::basis::reconstruct_function(&zeta, &bases.q, &grid).unwrap();
        for j in 0..50 {
            assert_abs_diff_eq!(beta[(0, j)], want_b[j], epsilon = 1e-8);
            assert_abs_diff_eq!(alpha[(0, j)], want_a[j], epsilon = 1e-8);
            assert_eq!(beta[(1, j)], 0.0);
        }
    }

    #[test]
    fn serde_round_trip() {
        let m = random_model(&mut ChaCha8Rng::seed_from_u64(7), 3, 6, 6);
        let s = serde_json::to_string(&m).unwrap();
        let back: IfmeModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
