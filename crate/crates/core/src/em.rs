//! Generic EM driver with random restarts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FmeError, Result};
use crate::metrics::{information_criteria, map_cluster, posteriors};
use crate::optim::log_sum_exp;
use crate::tol;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Relative change of the objective that stops EM.
    pub tol: f64,
    pub max_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: tol::EM_CONVERGENCE,
            max_iter: 500,
            n_starts: 10,
            seed: 0,
        }
    }
}

/// Diagnostics of a finished fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Objective (log-likelihood, penalized for penalized models) after
    /// initialization and after every EM iteration. When a non-monotone fitter
    /// returns an earlier iterate, its objective is repeated at the end.
    pub loglik_trace: Vec<f64>,
    #[serde(skip)]
    pub tau: DMatrix<f64>,
    /// MAP labels in `1..=K`.
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub df: usize,
    pub bic: f64,
    pub mbic: f64,
    /// Unpenalized log-likelihood of the returned model.
    pub loglik: f64,
    /// Objective of the returned model.
    pub objective: f64,
    /// Index of the restart that produced the returned model.
    pub best_start: usize,
    pub failed_starts: usize,
    /// Largest drop between consecutive trace entries (0 for a monotone trace).
    pub max_decrease: f64,
}

/// A model family together with the data it is fitted to.
pub(crate) trait EmProblem: Sync {
    type Params: Clone + Send;

    fn n(&self) -> usize;
    fn k(&self) -> usize;

    /// Starting point before the first M-step: zero gating and experts at the
    /// marginal mean and variance of the response.
    fn neutral(&self) -> Self::Params;

    /// `n x K` matrix of `log pi_k + log phi_k`.
    fn log_joint(&self, p: &Self::Params) -> DMatrix<f64>;

    /// Penalty subtracted from the log-likelihood (0 for unpenalized models).
    fn penalty(&self, p: &Self::Params) -> f64;

    fn m_step(&self, p: &Self::Params, tau: &DMatrix<f64>) -> Result<Self::Params>;

    /// Canonical expert order plus any follow-up refit; receives the
    /// posteriors of `p`.
    fn canonicalize(&self, p: Self::Params, tau: &DMatrix<f64>) -> Result<Self::Params>;

    fn df(&self, p: &Self::Params) -> usize;

    /// False when the M-step is not an exact maximizer; EM then returns the
    /// best iterate instead of the last one.
    fn monotone(&self) -> bool {
        true
    }
}

pub(crate) fn loglik_of(log_joint: &DMatrix<f64>) -> f64 {
    let mut buf = Vec::with_capacity(log_joint.ncols());
    log_joint
        .row_iter()
        .map(|row| {
            buf.clear();
            buf.extend(row.iter().copied());
            log_sum_exp(&buf)
        })
        .sum()
}

/// Objective value, unpenalized log-likelihood and posteriors of `p`.
pub(crate) fn evaluate<P: EmProblem>(
    prob: &P,
    p: &P::Params,
) -> Result<(f64, f64, DMatrix<f64>)> {
    let lj = prob.log_joint(p);
    let ll = loglik_of(&lj);
    if !ll.is_finite() {
        return Err(FmeError::Underflow("log-likelihood is not finite".into()));
    }
    let tau = posteriors(&lj)?;
    Ok((ll - prob.penalty(p), ll, tau))
}

/// Random hard assignment of every observation to one of K components.
pub(crate) fn random_assignment(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut tau = DMatrix::zeros(n, k);
    for i in 0..n {
        tau[(i, rng.random_range(0..k))] = 1.0;
    }
    tau
}

struct Run<T> {
    params: T,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn single_run<P: EmProblem>(prob: &P, opts: &FitOptions, rng: &mut ChaCha8Rng) -> Result<Run<P::Params>> {
    let tau0 = random_assignment(prob.n(), prob.k(), rng);
    let mut params = prob.m_step(&prob.neutral(), &tau0)?;
    let (mut obj, _, mut tau) = evaluate(prob, &params)?;
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut best: Option<(f64, P::Params)> = (!prob.monotone()).then(|| (obj, params.clone()));
    while iterations < opts.max_iter {
        let next = prob.m_step(&params, &tau)?;
        let (next_obj, _, next_tau) = evaluate(prob, &next)?;
        iterations += 1;
        trace.push(next_obj);
        let change = (next_obj - obj).abs() / obj.abs().max(1e-300);
        params = next;
        tau = next_tau;
        obj = next_obj;
        if let Some((b, bp)) = &mut best {
            if obj > *b {
                *b = obj;
                *bp = params.clone();
            }
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if let Some((b, bp)) = best {
        if b > obj {
            params = bp;
            trace.push(b);
        }
    }
    Ok(Run {
        params,
        trace,
        iterations,
        converged,
    })
}

/// RNG for restart `start`, attempt `attempt` of a fit seeded with `seed`.
pub(crate) fn start_rng(seed: u64, start: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((start as u64) << 8) | attempt as u64);
    rng
}

const ATTEMPTS_PER_START: usize = 3;

pub(crate) fn run_em<P: EmProblem>(prob: &P, opts: &FitOptions) -> Result<(P::Params, FitReport)> {
    if prob.k() == 0 {
        return Err(FmeError::InvalidInput("K must be at least 1".into()));
    }
    if prob.n() <= prob.k() {
        return Err(FmeError::InvalidInput(format!(
            "need more observations ({}) than components ({})",
            prob.n(),
            prob.k()
        )));
    }
    let starts = opts.n_starts.max(1);
    let runs: Vec<Result<Run<P::Params>>> = (0..starts)
        .into_par_iter()
        .map(|s| {
            let mut last = None;
            for attempt in 0..ATTEMPTS_PER_START {
                let mut rng = start_rng(opts.seed, s, attempt);
                match single_run(prob, opts, &mut rng) {
                    Ok(r) => return Ok(r),
                    Err(e) if e.is_numerical() => {
                        log::debug!("restart {s} attempt {attempt} failed: {e}");
                        last = Some(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect();

    let mut best: Option<(usize, Run<P::Params>)> = None;
    let mut failed = 0;
    let mut last_err = String::new();
    for (s, r) in runs.into_iter().enumerate() {
        match r {
            Ok(run) => {
                let fin = *run.trace.last().unwrap();
                let better = match &best {
                    None => true,
                    Some((_, b)) => fin > *b.trace.last().unwrap(),
                };
                if better {
                    best = Some((s, run));
                }
            }
            Err(e) if e.is_numerical() => {
                failed += 1;
                last_err = e.to_string();
            }
            Err(e) => return Err(e),
        }
    }
    let Some((best_start, run)) = best else {
        return Err(FmeError::FitFailure {
            starts: starts,
            last: last_err,
        });
    };

    let (_, _, tau) = evaluate(prob, &run.params)?;
    let params = prob.canonicalize(run.params, &tau)?;
    let (objective, loglik, tau) = evaluate(prob, &params)?;
    let df = prob.df(&params);
    let (mbic, bic) = information_criteria(objective, loglik, df, prob.n());
    let max_decrease = run
        .trace
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(0.0, f64::max);
    let labels = map_cluster(&tau).labels;
    Ok((
        params,
        FitReport {
            loglik_trace: run.trace,
            tau,
            labels,
            iterations: run.iterations,
            converged: run.converged,
            df,
            bic,
            mbic,
            loglik,
            objective,
            best_start,
            failed_starts: failed,
            max_decrease,
        },
    ))
}

/// Log density of `N(mean, sigma2)` at `y`.
pub(crate) fn log_normal(y: f64, mean: f64, sigma2: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * sigma2).ln() + (y - mean).powi(2) / sigma2)
}

/// Weighted mean and variance of `y`.
pub(crate) fn weighted_moments(y: &DVector<f64>, w: &[f64]) -> (f64, f64) {
    let total: f64 = w.iter().sum();
    let mean = y.iter().zip(w).map(|(v, wi)| v * wi).sum::<f64>() / total;
    let var = y.iter().zip(w).map(|(v, wi)| wi * (v - mean).powi(2)).sum::<f64>() / total;
    (mean, var)
}

/// Sorting permutation of the experts: `perm[new] = old`, ordered
/// lexicographically by `(beta0, coefficients, sigma2)`.
pub(crate) fn expert_order(keys: &[Vec<f64>]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..keys.len()).collect();
    perm.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    perm
}

/// Reparameterizes `(K-1) x d` gating coefficients (last gate implicit zero)
/// so that new gate `j` is old gate `perm[j]`; exact for the gate probabilities.
pub(crate) fn permute_gating(coef: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    let k = perm.len();
    let d = coef.ncols();
    let row = |g: usize| -> DVector<f64> {
        if g + 1 == k {
            DVector::zeros(d)
        } else {
            coef.row(g).transpose()
        }
    };
    let base = row(perm[k - 1]);
    let mut out = DMatrix::zeros(k - 1, d);
    for j in 0..k - 1 {
        out.row_mut(j).copy_from(&(row(perm[j]) - &base).transpose());
    }
    out
}

/// Columns of `tau` reordered by `perm[new] = old`.
pub(crate) fn permute_columns(tau: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(tau.nrows(), tau.ncols(), |i, j| tau[(i, perm[j])])
}
