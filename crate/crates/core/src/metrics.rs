//! Prediction, clustering and evaluation metrics.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::{FmeError, Result};
use crate::optim::log_sum_exp;

/// Hard cluster assignment with labels in `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<usize>,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l > k) {
            return Err(FmeError::InvalidInput(format!(
                "label {bad} outside 1..={k}"
            )));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Anything that yields per-observation gate probabilities and expert means.
pub trait MixturePredictor {
    fn n_components(&self) -> usize;

    /// `(gates, means)`, both `n x K`.
    fn components(&self, designs: &DesignSet) -> Result<(DMatrix<f64>, DMatrix<f64>)>;

    /// `n x K` matrix of `log pi_k + log phi_k(y_i)`.
    fn log_joint(&self, designs: &DesignSet, y: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// Posterior memberships from a matrix of log joint densities.
pub fn posteriors(log_joint: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut tau = log_joint.clone();
    for (i, mut row) in tau.row_iter_mut().enumerate() {
        let v: Vec<f64> = row.iter().copied().collect();
        let lse = log_sum_exp(&v);
        if !lse.is_finite() {
            return Err(FmeError::Underflow(format!(
                "all component densities vanish for observation {i}"
            )));
        }
        for x in row.iter_mut() {
            *x = (*x - lse).exp();
        }
    }
    Ok(tau)
}

/// Row-wise argmax; ties go to the lowest component index.
pub fn map_cluster(tau: &DMatrix<f64>) -> Partition {
    let labels = tau
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best + 1
        })
        .collect();
    Partition { labels }
}

/// `yhat_i = sum_k pi_k(r_i) mu_ik`.
pub fn predict_response<M: MixturePredictor + ?Sized>(
    model: &M,
    designs: &DesignSet,
) -> Result<DVector<f64>> {
    let (g, mu) = model.components(designs)?;
    Ok(DVector::from_fn(g.nrows(), |i, _| {
        (0..g.ncols()).map(|k| g[(i, k)] * mu[(i, k)]).sum()
    }))
}

/// Expert mean of the MAP component computed with the observed response.
pub fn predict_conditional<M: MixturePredictor + ?Sized>(
    model: &M,
    designs: &DesignSet,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let tau = posteriors(&model.log_joint(designs, y)?)?;
    let part = map_cluster(&tau);
    let (_, mu) = model.components(designs)?;
    Ok(DVector::from_fn(mu.nrows(), |i, _| mu[(i, part.labels[i] - 1)]))
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(FmeError::InvalidInput(format!(
            "length mismatch: {a} vs {b}"
        )));
    }
    Ok(())
}

/// `sum (y - yhat)^2 / sum y^2`.
pub fn rpe(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y.len(), yhat.len())?;
    let den: f64 = y.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(FmeError::UndefinedMetric("RPE with sum(y^2) = 0".into()));
    }
    Ok(sse(y, yhat)? / den)
}

pub fn sse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y.len(), yhat.len())?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Pearson correlation.
pub fn corr(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y.len(), yhat.len())?;
    let n = y.len();
    if n < 2 {
        return Err(FmeError::UndefinedMetric("correlation needs two points".into()));
    }
    let my = y.iter().sum::<f64>() / n as f64;
    let mh = yhat.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        sxy += (a - my) * (b - mh);
        sxx += (a - my).powi(2);
        syy += (b - mh).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(FmeError::UndefinedMetric("correlation of a constant vector".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// `(1/m) sum_j (g(t_j) - ghat(t_j))^2`.
pub fn functional_mse(g_true: &[f64], g_hat: &[f64]) -> Result<f64> {
    check_lengths(g_true.len(), g_hat.len())?;
    if g_true.is_empty() {
        return Err(FmeError::UndefinedMetric("MSE of an empty grid".into()));
    }
    Ok(sse(g_true, g_hat)? / g_true.len() as f64)
}

struct Contingency {
    table: Vec<Vec<u64>>,
    rows: Vec<u64>,
    cols: Vec<u64>,
    n: u64,
}

fn contingency(a: &[usize], b: &[usize]) -> Contingency {
    let la: Vec<usize> = a.iter().copied().sorted().dedup().collect();
    let lb: Vec<usize> = b.iter().copied().sorted().dedup().collect();
    let mut table = vec![vec![0u64; lb.len()]; la.len()];
    for (x, y) in a.iter().zip(b) {
        let i = la.binary_search(x).unwrap();
        let j = lb.binary_search(y).unwrap();
        table[i][j] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..lb.len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Contingency {
        table,
        rows,
        cols,
        n: a.len() as u64,
    }
}

fn pairs(c: u64) -> u64 {
    c * c.saturating_sub(1) / 2
}

pub fn rand_index(a: &Partition, b: &Partition) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let c = contingency(&a.labels, &b.labels);
    let total = pairs(c.n);
    if total == 0 {
        return Ok(1.0);
    }
    let same_both: u64 = c.table.iter().flatten().map(|&v| pairs(v)).sum();
    let same_a: u64 = c.rows.iter().map(|&v| pairs(v)).sum();
    let same_b: u64 = c.cols.iter().map(|&v| pairs(v)).sum();
    // pairs split in both partitions
    let diff_both = total + same_both - same_a - same_b;
    Ok((same_both + diff_both) as f64 / total as f64)
}

/// Adjusted Rand index under the permutation model.
pub fn adjusted_rand(a: &Partition, b: &Partition) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let c = contingency(&a.labels, &b.labels);
    let total = pairs(c.n) as f64;
    let index: f64 = c.table.iter().flatten().map(|&v| pairs(v)).sum::<u64>() as f64;
    let sa = c.rows.iter().map(|&v| pairs(v)).sum::<u64>() as f64;
    let sb = c.cols.iter().map(|&v| pairs(v)).sum::<u64>() as f64;
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// `1 - max_sigma (1/n) sum_i 1[a_i = sigma(b_i)]` over relabellings.
pub fn cluster_error(a: &Partition, b: &Partition) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let c = contingency(&a.labels, &b.labels);
    let size = c.table.len().max(c.cols.len());
    let at = |i: usize, j: usize| -> u64 {
        c.table.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0)
    };
    let matched = if size <= 6 {
        (0..size)
            .permutations(size)
            .map(|perm| (0..size).map(|i| at(i, perm[i])).sum::<u64>())
            .max()
            .unwrap_or(0)
    } else {
        let weights = Matrix::from_fn(size, size, |(i, j)| at(i, j) as i64);
        kuhn_munkres(&weights).0 as u64
    };
    Ok(1.0 - matched as f64 / c.n as f64)
}

/// `(mbic, bic)` for a fit with `df` free parameters on `n` observations;
/// `objective` is the (penalized) log-likelihood used for mBIC.
pub fn information_criteria(objective: f64, loglik: f64, df: usize, n: usize) -> (f64, f64) {
    let pen = df as f64 * (n as f64).ln() / 2.0;
    (objective - pen, loglik - pen)
}

/// Number of coefficients counted as non-zero.
pub fn count_nonzero<'a>(coefs: impl IntoIterator<Item = &'a f64>) -> usize {
    coefs
        .into_iter()
        .filter(|v| v.abs() > crate::tol::ZERO_COEF)
        .count()
}

/// Bundle of evaluation metrics for a set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rpe: Option<f64>,
    pub corr: Option<f64>,
    pub sse: Option<f64>,
    pub ri: Option<f64>,
    pub ari: Option<f64>,
    pub clus_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mse_by_function: Vec<(String, f64)>,
}

impl MetricReport {
    /// Regression metrics from responses and, when both are given, clustering
    /// metrics from true and predicted labels.
    pub fn compute(
        y: &[f64],
        yhat: &[f64],
        truth: Option<&Partition>,
        predicted: Option<&Partition>,
    ) -> Result<Self> {
        let (ri, ari, clus_err) = match (truth, predicted) {
            (Some(t), Some(p)) => (
                Some(rand_index(t, p)?),
                Some(adjusted_rand(t, p)?),
                Some(cluster_error(t, p)?),
            ),
            _ => (None, None, None),
        };
        Ok(Self {
            rpe: rpe(y, yhat).ok(),
            corr: corr(y, yhat).ok(),
            sse: Some(sse(y, yhat)?),
            ri,
            ari,
            clus_err,
            mse_by_function: Vec::new(),
        })
    }
}
