//! Functional mixture of experts fitted by maximum likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Bases, DesignSet};
use crate::em::{self, EmProblem, FitOptions, FitReport};
use crate::error::{FmeError, Result};
use crate::metrics::{count_nonzero, posteriors, MixturePredictor};
use crate::optim::{self, log_gates, nr_maximize, weighted_ols_intercept};
use crate::tol;

/// Expert `k`: `y ~ N(beta0 + eta^T x, sigma2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub beta0: f64,
    pub eta: Vec<f64>,
    pub sigma2: f64,
}

impl ExpertParams {
    pub fn mean(&self, x: &[f64]) -> f64 {
        self.beta0 + self.eta.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// One stored gate; the K-th gate is the zero reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub alpha0: f64,
    pub coef: Vec<f64>,
}

/// Softmax gating parameters as a `(K - 1) x (q + 1)` matrix, intercepts in
/// the first column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Gate>", into = "Vec<Gate>")]
pub struct GatingParams {
    coef: DMatrix<f64>,
}

impl GatingParams {
    pub fn zeros(k: usize, q: usize) -> Self {
        Self {
            coef: DMatrix::zeros(k.saturating_sub(1), q + 1),
        }
    }

    pub fn from_matrix(coef: DMatrix<f64>) -> Self {
        Self { coef }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.coef
    }

    pub fn n_gates(&self) -> usize {
        self.coef.nrows()
    }

    pub fn q(&self) -> usize {
        self.coef.ncols() - 1
    }

    pub fn alpha0(&self, k: usize) -> f64 {
        self.coef[(k, 0)]
    }

    pub fn slopes(&self, k: usize) -> Vec<f64> {
        self.coef.row(k).iter().skip(1).copied().collect()
    }

    /// Slope coefficients of every stored gate.
    pub fn all_slopes(&self) -> impl Iterator<Item = &f64> {
        self.coef.columns(1, self.coef.ncols() - 1).into_iter()
    }
}

impl TryFrom<Vec<Gate>> for GatingParams {
    type Error = String;

    fn try_from(gates: Vec<Gate>) -> std::result::Result<Self, String> {
        let q = gates.first().map_or(0, |g| g.coef.len());
        if gates.iter().any(|g| g.coef.len() != q) {
            return Err("gates have different numbers of coefficients".into());
        }
        let coef = DMatrix::from_fn(gates.len(), q + 1, |k, j| {
            if j == 0 {
                gates[k].alpha0
            } else {
                gates[k].coef[j - 1]
            }
        });
        Ok(Self { coef })
    }
}

impl From<GatingParams> for Vec<Gate> {
    fn from(g: GatingParams) -> Self {
        (0..g.n_gates())
            .map(|k| Gate {
                alpha0: g.alpha0(k),
                coef: g.slopes(k),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmeModel {
    pub k: usize,
    pub gating: GatingParams,
    pub experts: Vec<ExpertParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bases: Option<Bases>,
}

impl FmeModel {
    pub fn p(&self) -> usize {
        self.experts.first().map_or(0, |e| e.eta.len())
    }

    pub fn q(&self) -> usize {
        self.gating.q()
    }

    /// `nz(zeta) + (K - 1) + nz(eta) + 2K`.
    pub fn df(&self) -> usize {
        count_nonzero(self.gating.all_slopes())
            + (self.k - 1)
            + count_nonzero(self.experts.iter().flat_map(|e| e.eta.iter()))
            + 2 * self.k
    }

    fn check(&self, designs: &DesignSet) -> Result<()> {
        if designs.p() != self.p() || designs.q() != self.q() {
            return Err(FmeError::InvalidInput(format!(
                "model expects p = {}, q = {} but designs have p = {}, q = {}",
                self.p(),
                self.q(),
                designs.p(),
                designs.q()
            )));
        }
        Ok(())
    }

    fn means(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let mut mu = DMatrix::zeros(n, self.k);
        for (k, e) in self.experts.iter().enumerate() {
            let eta = DVector::from_column_slice(&e.eta);
            let m = x * eta;
            for i in 0..n {
                mu[(i, k)] = e.beta0 + m[i];
            }
        }
        mu
    }

    pub(crate) fn log_joint_raw(&self, x: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let mut lj = log_gates(self.gating.matrix(), r);
        let mu = self.means(x);
        for i in 0..y.len() {
            for k in 0..self.k {
                lj[(i, k)] += em::log_normal(y[i], mu[(i, k)], self.experts[k].sigma2);
            }
        }
        lj
    }
}

impl MixturePredictor for FmeModel {
    fn n_components(&self) -> usize {
        self.k
    }

    fn components(&self, designs: &DesignSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(designs)?;
        Ok((optim::gates(self.gating.matrix(), &designs.r), self.means(&designs.x)))
    }

    fn log_joint(&self, designs: &DesignSet, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(designs)?;
        check_y(designs, y)?;
        Ok(self.log_joint_raw(&designs.x, &designs.r, y))
    }
}

pub(crate) fn check_y(designs: &DesignSet, y: &DVector<f64>) -> Result<()> {
    if designs.n() != y.len() {
        return Err(FmeError::InvalidInput(format!(
            "{} design rows but {} responses",
            designs.n(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FmeError::InvalidInput("non-finite response".into()));
    }
    Ok(())
}

/// Gate probabilities for one gating design vector.
pub fn gating_probs(gating: &GatingParams, r_i: &[f64]) -> Vec<f64> {
    optim::gate_probs(gating.matrix(), r_i)
}

/// Mixture density of `y_i` given the designs of observation `i`.
pub fn fme_density(model: &FmeModel, x_i: &[f64], r_i: &[f64], y_i: f64) -> f64 {
    let pi = gating_probs(&model.gating, r_i);
    let terms: Vec<f64> = model
        .experts
        .iter()
        .zip(&pi)
        .map(|(e, p)| p.ln() + em::log_normal(y_i, e.mean(x_i), e.sigma2))
        .collect();
    optim::log_sum_exp(&terms).exp()
}

pub fn log_likelihood(model: &FmeModel, designs: &DesignSet, y: &DVector<f64>) -> Result<f64> {
    Ok(em::loglik_of(&model.log_joint(designs, y)?))
}

pub fn e_step(model: &FmeModel, designs: &DesignSet, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    posteriors(&model.log_joint(designs, y)?)
}

/// Component masses `n_k = sum_i tau_ik`, failing on an empty component.
pub(crate) fn component_mass(tau: &DMatrix<f64>, k: usize) -> Result<f64> {
    let nk = tau.column(k).sum();
    if nk < tol::EMPTY_COMPONENT {
        return Err(FmeError::EmptyComponent(format!(
            "component {} has mass {nk:.3e}",
            k + 1
        )));
    }
    Ok(nk)
}

/// Weighted OLS expert update with the `n_k` variance divisor.
pub(crate) fn ols_expert(x: &DMatrix<f64>, y: &DVector<f64>, tau_k: &DVector<f64>) -> Result<ExpertParams> {
    let nk = tau_k.sum();
    let (beta0, eta) = weighted_ols_intercept(x, y, tau_k)?;
    let fit = x * &eta;
    let rss: f64 = (0..y.len()).map(|i| tau_k[i] * (y[i] - beta0 - fit[i]).powi(2)).sum();
    Ok(ExpertParams {
        beta0,
        eta: eta.iter().copied().collect(),
        sigma2: (rss / nk).max(tol::SIGMA2_FLOOR),
    })
}

const NR_MAX_ITER: usize = 50;

fn m_step_raw(
    model: &FmeModel,
    x: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: &DMatrix<f64>,
) -> Result<FmeModel> {
    let mut experts = Vec::with_capacity(model.k);
    for k in 0..model.k {
        component_mass(tau, k)?;
        experts.push(ols_expert(x, y, &tau.column(k).into_owned())?);
    }
    let coef = nr_maximize(model.gating.matrix(), r, tau, NR_MAX_ITER)?;
    Ok(FmeModel {
        k: model.k,
        gating: GatingParams::from_matrix(coef),
        experts,
        bases: model.bases.clone(),
    })
}

/// One M-step: weighted OLS experts and Newton-Raphson gating.
pub fn m_step(model: &FmeModel, designs: &DesignSet, y: &DVector<f64>, tau: &DMatrix<f64>) -> Result<FmeModel> {
    model.check(designs)?;
    check_y(designs, y)?;
    if tau.shape() != (y.len(), model.k) {
        return Err(FmeError::InvalidInput("tau has the wrong shape".into()));
    }
    m_step_raw(model, &designs.x, &designs.r, y, tau)
}

/// Reorders experts lexicographically by `(beta0, eta, sigma2)` and
/// reparameterizes the gating exactly. Returns the permutation
/// `perm[new] = old`.
pub(crate) fn reorder(model: &mut FmeModel) -> Vec<usize> {
    let keys: Vec<Vec<f64>> = model
        .experts
        .iter()
        .map(|e| {
            let mut v = vec![e.beta0];
            v.extend_from_slice(&e.eta);
            v.push(e.sigma2);
            v
        })
        .collect();
    let perm = em::expert_order(&keys);
    model.experts = perm.iter().map(|&o| model.experts[o].clone()).collect();
    model.gating = GatingParams::from_matrix(em::permute_gating(model.gating.matrix(), &perm));
    perm
}

pub(crate) fn neutral_model(k: usize, p: usize, q: usize, y: &DVector<f64>) -> FmeModel {
    let w = vec![1.0; y.len()];
    let (mean, var) = em::weighted_moments(y, &w);
    FmeModel {
        k,
        gating: GatingParams::zeros(k, q),
        experts: (0..k)
            .map(|_| ExpertParams {
                beta0: mean,
                eta: vec![0.0; p],
                sigma2: var.max(tol::SIGMA2_FLOOR),
            })
            .collect(),
        bases: None,
    }
}

struct FmeProblem<'a> {
    x: &'a DMatrix<f64>,
    r: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    k: usize,
}

impl EmProblem for FmeProblem<'_> {
    type Params = FmeModel;

    fn n(&self) -> usize {
        self.y.len()
    }

    fn k(&self) -> usize {
        self.k
    }

    fn neutral(&self) -> FmeModel {
        neutral_model(self.k, self.x.ncols(), self.r.ncols(), self.y)
    }

    fn log_joint(&self, p: &FmeModel) -> DMatrix<f64> {
        p.log_joint_raw(self.x, self.r, self.y)
    }

    fn penalty(&self, _: &FmeModel) -> f64 {
        0.0
    }

    fn m_step(&self, p: &FmeModel, tau: &DMatrix<f64>) -> Result<FmeModel> {
        m_step_raw(p, self.x, self.r, self.y, tau)
    }

    fn canonicalize(&self, mut p: FmeModel, tau: &DMatrix<f64>) -> Result<FmeModel> {
        let perm = reorder(&mut p);
        let tau = em::permute_columns(tau, &perm);
        let coef = nr_maximize(p.gating.matrix(), self.r, &tau, NR_MAX_ITER)?;
        p.gating = GatingParams::from_matrix(coef);
        Ok(p)
    }

    fn df(&self, p: &FmeModel) -> usize {
        p.df()
    }
}

pub(crate) fn check_fit_inputs(designs: &DesignSet, y: &DVector<f64>, k: usize) -> Result<()> {
    check_y(designs, y)?;
    if k == 0 {
        return Err(FmeError::InvalidInput("K must be at least 1".into()));
    }
    if designs.n() <= k {
        return Err(FmeError::InvalidInput(format!(
            "need more observations ({}) than components ({k})",
            designs.n()
        )));
    }
    Ok(())
}

/// EM fit with `opts.n_starts` random restarts; the best final
/// log-likelihood wins.
pub fn fit_fme(designs: &DesignSet, y: &DVector<f64>, k: usize, opts: &FitOptions) -> Result<(FmeModel, FitReport)> {
    check_fit_inputs(designs, y, k)?;
    let prob = FmeProblem {
        x: &designs.x,
        r: &designs.r,
        y,
        k,
    };
    em::run_em(&prob, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_model(rng: &mut ChaCha8Rng, k: usize, p: usize, q: usize) -> FmeModel {
        FmeModel {
            k,
            gating: GatingParams::from_matrix(DMatrix::from_fn(k - 1, q + 1, |_, _| rng.random_range(-1.0..1.0))),
            experts: (0..k)
                .map(|_| ExpertParams {
                    beta0: rng.random_range(-3.0..3.0),
                    eta: (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    sigma2: rng.random_range(0.2..2.0),
                })
                .collect(),
            bases: None,
        }
    }

    fn random_designs(rng: &mut ChaCha8Rng, n: usize, p: usize, q: usize) -> DesignSet {
        DesignSet::from_matrices(
            DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0)),
            DMatrix::from_fn(n, q, |_, _| rng.random_range(-2.0..2.0)),
        )
        .unwrap()
    }

    fn naive_density(m: &FmeModel, x: &[f64], r: &[f64], y: f64) -> f64 {
        let mut scores: Vec<f64> = (0..m.k - 1)
            .map(|k| m.gating.alpha0(k) + m.gating.slopes(k).iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        scores.push(0.0);
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        m.experts
            .iter()
            .zip(&scores)
            .map(|(e, s)| {
                let mu = e.mean(x);
                s.exp() / z * (-(y - mu).powi(2) / (2.0 * e.sigma2)).exp() / (2.0 * std::f64::consts::PI * e.sigma2).sqrt()
            })
            .sum()
    }

    #[test]
    fn density_cases() {
        let m = FmeModel {
            k: 1,
            gating: GatingParams::zeros(1, 2),
            experts: vec![ExpertParams {
                beta0: 1.0,
                eta: vec![2.0],
                sigma2: 1.0,
            }],
            bases: None,
        };
        assert_abs_diff_eq!(
            fme_density(&m, &[0.5], &[0.0, 0.0], 2.0),
            1.0 / (2.0 * std::f64::consts::PI).sqrt(),
            epsilon = 1e-15
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 3, 4, 2);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(-4.0..4.0);
            assert_abs_diff_eq!(fme_density(&m, &x, &r, y), naive_density(&m, &x, &r, y), epsilon = 1e-12);
        }
        assert_eq!(gating_probs(&GatingParams::zeros(4, 3), &[1.0, 2.0, 3.0]), vec![0.25; 4]);
    }

    #[test]
    fn loglik_and_posteriors_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 3, 3, 2);
        let d = random_designs(&mut rng, 25, 3, 2);
        let y = DVector::from_fn(25, |_, _| rng.random_range(-5.0..5.0));
        let naive: f64 = (0..25)
            .map(|i| {
                let x: Vec<f64> = d.x.row(i).iter().copied().collect();
                let r: Vec<f64> = d.r.row(i).iter().copied().collect();
                naive_density(&m, &x, &r, y[i]).ln()
            })
            .sum();
        assert_abs_diff_eq!(log_likelihood(&m, &d, &y).unwrap(), naive, epsilon = 1e-10);
        let tau = e_step(&m, &d, &y).unwrap();
        for i in 0..25 {
            assert_abs_diff_eq!(tau.row(i).sum(), 1.0, epsilon = 1e-12);
            let x: Vec<f64> = d.x.row(i).iter().copied().collect();
            let r: Vec<f64> = d.r.row(i).iter().copied().collect();
            let pi = gating_probs(&m.gating, &r);
            let f = naive_density(&m, &x, &r, y[i]);
            for k in 0..3 {
                let e = &m.experts[k];
                let phi = (-(y[i] - e.mean(&x)).powi(2) / (2.0 * e.sigma2)).exp()
                    / (2.0 * std::f64::consts::PI * e.sigma2).sqrt();
                assert_abs_diff_eq!(tau[(i, k)], pi[k] * phi / f, epsilon = 1e-12);
            }
        }
        let empty = DesignSet::from_matrices(DMatrix::zeros(0, 3), DMatrix::zeros(0, 2)).unwrap();
        assert_eq!(log_likelihood(&m, &empty, &DVector::zeros(0)).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_experts_give_uniform_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_designs(&mut rng, 10, 2, 2);
        let e = ExpertParams {
            beta0: 0.5,
            eta: vec![1.0, -1.0],
            sigma2: 2.0,
        };
        let m = FmeModel {
            k: 3,
            gating: GatingParams::zeros(3, 2),
            experts: vec![e.clone(), e.clone(), e],
            bases: None,
        };
        let y = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let tau = e_step(&m, &d, &y).unwrap();
        assert_abs_diff_eq!(tau.add_scalar(-1.0 / 3.0).amax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn hard_assignment_recovers_noiseless_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_designs(&mut rng, 60, 3, 2);
        let truth = random_model(&mut rng, 2, 3, 2);
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let y = DVector::from_fn(60, |i, _| {
            let x: Vec<f64> = d.x.row(i).iter().copied().collect();
            truth.experts[labels[i]].mean(&x)
        });
        let tau = DMatrix::from_fn(60, 2, |i, k| if labels[i] == k { 1.0 } else { 0.0 });
        let start = neutral_model(2, 3, 2, &y);
        let m = m_step(&start, &d, &y, &tau).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(m.experts[k].beta0, truth.experts[k].beta0, epsilon = 1e-8);
            for j in 0..3 {
                assert_abs_diff_eq!(m.experts[k].eta[j], truth.experts[k].eta[j], epsilon = 1e-8);
            }
            assert!(m.experts[k].sigma2 <= 1e-8);
        }
    }

    #[test]
    fn single_component_is_weighted_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_designs(&mut rng, 50, 3, 2);
        let noise = Normal::new(0.0, 0.7).unwrap();
        let y = DVector::from_fn(50, |i, _| 1.0 + d.x[(i, 0)] - 2.0 * d.x[(i, 2)] + noise.sample(&mut rng));
        let (m, rep) = fit_fme(&d, &y, 1, &FitOptions::default()).unwrap();
        let (b0, b) = weighted_ols_intercept(&d.x, &y, &DVector::repeat(50, 1.0)).unwrap();
        assert_abs_diff_eq!(m.experts[0].beta0, b0, epsilon = 1e-8);
        for j in 0..3 {
            assert_abs_diff_eq!(m.experts[0].eta[j], b[j], epsilon = 1e-8);
        }
        let rss: f64 = (0..50).map(|i| (y[i] - b0 - (d.x.row(i) * &b)[0]).powi(2)).sum();
        let s2 = rss / 50.0;
        assert_abs_diff_eq!(m.experts[0].sigma2, s2, epsilon = 1e-8);
        let closed = -25.0 * (2.0 * std::f64::consts::PI * s2).ln() - 25.0;
        assert_abs_diff_eq!(rep.loglik, closed, epsilon = 1e-8);
        assert_eq!(rep.df, 3 + 2);
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng, 3, 2, 2);
        let s = serde_json::to_string(&m).unwrap();
        let back: FmeModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn df_counts_dense_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_model(&mut rng, 3, 10, 10);
        assert_eq!(m.df(), 58);
    }
}
