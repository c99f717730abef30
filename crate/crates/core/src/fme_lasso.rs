//! l1-penalized functional mixture of experts (EM-Lasso).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::em::{self, EmProblem, FitOptions, FitReport};
use crate::error::{FmeError, Result};
use crate::fme::{
    check_fit_inputs, component_mass, log_likelihood, neutral_model, reorder, ExpertParams, FmeModel, GatingParams,
};
use crate::optim::{coord_lasso, gates, softmax_gating_q, LassoOptions};
use crate::tol;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LassoPenalty {
    /// Expert penalty.
    pub lambda: f64,
    /// Gating penalty.
    pub chi: f64,
}

impl LassoPenalty {
    pub fn new(lambda: f64, chi: f64) -> Result<Self> {
        if !(lambda >= 0.0 && chi >= 0.0) || !lambda.is_finite() || !chi.is_finite() {
            return Err(FmeError::InvalidInput(format!(
                "penalties must be finite and non-negative, got lambda = {lambda}, chi = {chi}"
            )));
        }
        Ok(Self { lambda, chi })
    }
}

fn l1<'a>(v: impl IntoIterator<Item = &'a f64>) -> f64 {
    v.into_iter().map(|x| x.abs()).sum()
}

/// `lambda sum |eta| + chi sum |zeta|`; intercepts and variances are free.
pub fn penalty_value(model: &FmeModel, pen: LassoPenalty) -> f64 {
    pen.lambda * l1(model.experts.iter().flat_map(|e| e.eta.iter())) + pen.chi * l1(model.gating.all_slopes())
}

pub fn penalized_loglik(model: &FmeModel, designs: &DesignSet, y: &DVector<f64>, pen: LassoPenalty) -> Result<f64> {
    Ok(log_likelihood(model, designs, y)? - penalty_value(model, pen))
}

fn gating_objective(coef: &DMatrix<f64>, r: &DMatrix<f64>, tau: &DMatrix<f64>, chi: f64) -> f64 {
    let slopes = l1(coef.columns(1, coef.ncols() - 1).iter());
    softmax_gating_q(coef, r, tau) - chi * slopes
}

const GATING_MAX_SWEEPS: usize = 50;
const MAX_HALVINGS: usize = 20;

/// Penalized gating M-step: per-gate quadratic approximation solved by
/// coordinate descent, then a backtracking blend of the full sweep.
pub fn m_step_gating_ca(gating: &GatingParams, r: &DMatrix<f64>, tau: &DMatrix<f64>, chi: f64) -> Result<GatingParams> {
    let g = gating.n_gates();
    if g == 0 {
        return Ok(gating.clone());
    }
    if r.nrows() != tau.nrows() || tau.ncols() != g + 1 || r.ncols() != gating.q() {
        return Err(FmeError::InvalidInput("gating M-step: inconsistent shapes".into()));
    }
    let n = r.nrows();
    let q = r.ncols();
    let opts = LassoOptions::default();
    let mut xi = gating.matrix().clone();
    let mut obj = gating_objective(&xi, r, tau, chi);
    for _ in 0..GATING_MAX_SWEEPS {
        let mut bar = xi.clone();
        for k in 0..g {
            let pi = gates(&bar, r);
            let mut w = DVector::zeros(n);
            let mut c = DVector::zeros(n);
            for i in 0..n {
                let p = pi[(i, k)];
                let wi = (p * (1.0 - p)).max(tol::WEIGHT_FLOOR);
                let s = bar[(k, 0)] + (0..q).map(|j| bar[(k, j + 1)] * r[(i, j)]).sum::<f64>();
                w[i] = wi;
                c[i] = s + (tau[(i, k)] - p) / wi;
            }
            let start = DVector::from_fn(q, |j, _| bar[(k, j + 1)]);
            let fit = coord_lasso(r, &c, &w, chi, 1.0, Some((bar[(k, 0)], &start)), true, opts)?;
            bar[(k, 0)] = fit.intercept;
            for j in 0..q {
                bar[(k, j + 1)] = fit.coef[j];
            }
        }
        let mut nu = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &xi * (1.0 - nu) + &bar * nu;
            let v = gating_objective(&cand, r, tau, chi);
            if v.is_finite() && v >= obj {
                accepted = Some((cand, v));
                break;
            }
            nu *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            break;
        };
        let change = v - obj;
        xi = cand;
        obj = v;
        if change < tol::INNER_CONVERGENCE * (1.0 + obj.abs()) {
            break;
        }
    }
    Ok(GatingParams::from_matrix(xi))
}

/// Weighted-Lasso update of one expert with threshold `lambda * sigma2`,
/// followed by the weighted mean squared residual for the variance.
pub fn m_step_experts_ca(
    expert: &ExpertParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau_k: &DVector<f64>,
    lambda: f64,
) -> Result<ExpertParams> {
    let nk = tau_k.sum();
    if nk < tol::EMPTY_COMPONENT {
        return Err(FmeError::EmptyComponent(format!("expert mass {nk:.3e}")));
    }
    let start = DVector::from_column_slice(&expert.eta);
    let fit = coord_lasso(
        x,
        y,
        tau_k,
        lambda,
        expert.sigma2,
        Some((expert.beta0, &start)),
        true,
        LassoOptions::default(),
    )?;
    let pred = x * &fit.coef;
    let rss: f64 = (0..y.len())
        .map(|i| tau_k[i] * (y[i] - fit.intercept - pred[i]).powi(2))
        .sum();
    Ok(ExpertParams {
        beta0: fit.intercept,
        eta: fit.coef.iter().copied().collect(),
        sigma2: (rss / nk).max(tol::SIGMA2_FLOOR),
    })
}

struct LassoProblem<'a> {
    x: &'a DMatrix<f64>,
    r: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    k: usize,
    pen: LassoPenalty,
}

impl EmProblem for LassoProblem<'_> {
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

    fn penalty(&self, p: &FmeModel) -> f64 {
        penalty_value(p, self.pen)
    }

    fn m_step(&self, p: &FmeModel, tau: &DMatrix<f64>) -> Result<FmeModel> {
        let mut experts = Vec::with_capacity(self.k);
        for (k, e) in p.experts.iter().enumerate() {
            component_mass(tau, k)?;
            experts.push(m_step_experts_ca(e, self.x, self.y, &tau.column(k).into_owned(), self.pen.lambda)?);
        }
        let gating = m_step_gating_ca(&p.gating, self.r, tau, self.pen.chi)?;
        Ok(FmeModel {
            k: self.k,
            gating,
            experts,
            bases: p.bases.clone(),
        })
    }

    fn canonicalize(&self, mut p: FmeModel, tau: &DMatrix<f64>) -> Result<FmeModel> {
        let perm = reorder(&mut p);
        let tau = em::permute_columns(tau, &perm);
        p.gating = m_step_gating_ca(&p.gating, self.r, &tau, self.pen.chi)?;
        Ok(p)
    }

    fn df(&self, p: &FmeModel) -> usize {
        p.df()
    }
}

/// EM-Lasso fit; restarts are ranked by the final penalized log-likelihood.
pub fn fit_fme_lasso(
    designs: &DesignSet,
    y: &DVector<f64>,
    k: usize,
    pen: LassoPenalty,
    opts: &FitOptions,
) -> Result<(FmeModel, FitReport)> {
    check_fit_inputs(designs, y, k)?;
    LassoPenalty::new(pen.lambda, pen.chi)?;
    let prob = LassoProblem {
        x: &designs.x,
        r: &designs.r,
        y,
        k,
        pen,
    };
    em::run_em(&prob, opts)
}
