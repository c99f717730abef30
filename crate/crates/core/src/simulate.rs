//! Synthetic functional mixture data: random B-spline predictors, softmax
//! cluster labels and Gaussian expert responses.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{BSplineBasis, CurveSample, TimeGrid};
use crate::error::{FmeError, Result};
use crate::optim::log_sum_exp;

/// A coefficient function on `[0, 1]`.
#[derive(Clone)]
pub struct NetworkFn(Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl NetworkFn {
    pub fn new(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0)
    }

    pub fn eval(&self, t: f64) -> f64 {
        (self.0)(t)
    }

    pub fn sample(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.points().iter().map(|&t| self.eval(t)).collect()
    }
}

impl fmt::Debug for NetworkFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("NetworkFn")
    }
}

/// Data-generating expert and gating functions.
#[derive(Clone, Debug)]
pub struct TrueNetworks {
    pub beta_funcs: Vec<NetworkFn>,
    pub beta0: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// K functions; the last is identically zero.
    pub alpha_funcs: Vec<NetworkFn>,
    pub alpha0: Vec<f64>,
}

impl TrueNetworks {
    pub fn k(&self) -> usize {
        self.beta0.len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0
            || self.beta_funcs.len() != k
            || self.sigma2.len() != k
            || self.alpha_funcs.len() != k
            || self.alpha0.len() != k
        {
            return Err(FmeError::InvalidInput("inconsistent number of components in the true networks".into()));
        }
        if self.sigma2.iter().any(|s| !(*s >= 0.0)) {
            return Err(FmeError::InvalidInput("expert variances must be non-negative".into()));
        }
        Ok(())
    }
}

fn s1_beta1(t: f64) -> f64 {
    if t < 0.3 {
        -50.0 * (t - 0.5).powi(2) + 4.0
    } else if t < 0.7 {
        0.0
    } else {
        50.0 * (t - 0.5).powi(2) - 4.0
    }
}

/// The three-component networks of the reference simulation study.
pub fn default_networks() -> TrueNetworks {
    TrueNetworks {
        beta_funcs: vec![
            NetworkFn::new(s1_beta1),
            NetworkFn::new(|t| -s1_beta1(t)),
            NetworkFn::new(|t| 100.0 * (t - 0.5).powi(2) - 10.0),
        ],
        beta0: vec![-5.0, 0.0, 5.0],
        sigma2: vec![5.0, 5.0, 5.0],
        alpha_funcs: vec![
            NetworkFn::new(|t| 80.0 * (t - 0.5).powi(2) - 8.0),
            NetworkFn::new(|t| -(80.0 * (t - 0.5).powi(2) - 8.0)),
            NetworkFn::zero(),
        ],
        alpha0: vec![-10.0, -10.0, 0.0],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

impl Scenario {
    /// `(m, sigma2_delta)`.
    pub fn sampling(self) -> (usize, f64) {
        match self {
            Scenario::S1 => (100, 1.0),
            Scenario::S2 => (50, 1.0),
            Scenario::S3 => (100, 4.0),
            Scenario::S4 => (50, 4.0),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            other => Err(format!("unknown scenario {other:?} (expected S1..S4)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub n: usize,
    pub m: usize,
    pub sigma2_delta: f64,
    pub k: usize,
    pub seed: u64,
    /// Variance of the entries of `v_i`.
    pub v_variance: f64,
    /// Dimension of the cubic B-spline basis the predictors live in.
    pub predictor_dim: usize,
    pub true_params: TrueNetworks,
}

impl ScenarioConfig {
    pub fn preset(s: Scenario, n: usize, seed: u64) -> Self {
        let (m, sigma2_delta) = s.sampling();
        Self {
            n,
            m,
            sigma2_delta,
            k: 3,
            seed,
            v_variance: 10.0,
            predictor_dim: 10,
            true_params: default_networks(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedDataset {
    pub grid: Arc<TimeGrid>,
    /// Noisy curves carrying responses and true labels.
    pub curves: Vec<CurveSample>,
    /// Noise-free predictor values on the grid.
    pub clean: Vec<Vec<f64>>,
}

impl SimulatedDataset {
    pub fn responses(&self) -> DVector<f64> {
        DVector::from_iterator(self.curves.len(), self.curves.iter().map(|c| c.response.unwrap_or(f64::NAN)))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.curves.iter().map(|c| c.label.unwrap_or(0)).collect()
    }
}

const OP_W: u64 = 1;
const OP_V: u64 = 2;
const OP_LABEL: u64 = 3;
const OP_RESPONSE: u64 = 4;
const OP_NOISE: u64 = 5;

/// Independent stream `index` of operation `op` under `seed`.
fn stream(seed: u64, op: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(op.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng.set_stream(index);
    rng
}

/// Curves `X_i(t) = (W v_i)^T b(t)` on the grid, with one `W ~ U(0,1)^{d x d}`
/// per dataset and `v_i ~ N(0, v_variance I)`.
pub fn gen_predictors(
    n: usize,
    basis: &BSplineBasis,
    grid: &TimeGrid,
    v_variance: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = basis.dimension();
    let mut wrng = stream(seed, OP_W, 0);
    let w = DMatrix::from_fn(d, d, |_, _| wrng.random::<f64>());
    let e = basis.evaluation_matrix(grid)?;
    let normal = Normal::new(0.0, v_variance.sqrt())
        .map_err(|e| FmeError::InvalidInput(format!("predictor variance: {e}")))?;
    Ok((0..n)
        .map(|i| {
            let mut rng = stream(seed, OP_V, i as u64);
            let v = DVector::from_fn(d, |_, _| normal.sample(&mut rng));
            let x = &w * v;
            (&e * x).iter().copied().collect()
        })
        .collect())
}

fn riemann(values: &[f64], f: &[f64], w: &[f64]) -> f64 {
    values.iter().zip(f).zip(w).map(|((x, b), dt)| x * b * dt).sum()
}

/// Multinomial labels (1-based) from softmax gates with Riemann-sum predictors.
pub fn gen_labels(clean: &[Vec<f64>], grid: &TimeGrid, networks: &TrueNetworks, seed: u64) -> Result<Vec<usize>> {
    networks.validate()?;
    let w = grid.riemann_weights();
    let alphas: Vec<Vec<f64>> = networks.alpha_funcs.iter().map(|f| f.sample(grid)).collect();
    let k = networks.k();
    Ok(clean
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let scores: Vec<f64> = (0..k).map(|c| networks.alpha0[c] + riemann(x, &alphas[c], &w)).collect();
            let lse = log_sum_exp(&scores);
            let mut rng = stream(seed, OP_LABEL, i as u64);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, s) in scores.iter().enumerate() {
                acc += (s - lse).exp();
                if u < acc {
                    return c + 1;
                }
            }
            k
        })
        .collect())
}

/// `y_i ~ N(beta_{z,0} + int X_i beta_z, sigma2_z)`.
pub fn gen_responses(
    clean: &[Vec<f64>],
    grid: &TimeGrid,
    labels: &[usize],
    networks: &TrueNetworks,
    seed: u64,
) -> Result<Vec<f64>> {
    networks.validate()?;
    let w = grid.riemann_weights();
    let betas: Vec<Vec<f64>> = networks.beta_funcs.iter().map(|f| f.sample(grid)).collect();
    clean
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &z))| {
            if z == 0 || z > networks.k() {
                return Err(FmeError::InvalidInput(format!("label {z} out of range")));
            }
            let c = z - 1;
            let mean = networks.beta0[c] + riemann(x, &betas[c], &w);
            let sd = networks.sigma2[c].sqrt();
            let mut rng = stream(seed, OP_RESPONSE, i as u64);
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            Ok(mean + sd * eps)
        })
        .collect()
}

/// `U_i(t_j) = X_i(t_j) + delta_ij` with i.i.d. `N(0, sigma2_delta)` noise and
/// a fresh stream per curve.
pub fn add_noise(clean: &[Vec<f64>], sigma2_delta: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(sigma2_delta >= 0.0) {
        return Err(FmeError::InvalidInput("noise variance must be non-negative".into()));
    }
    let sd = sigma2_delta.sqrt();
    Ok(clean
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = stream(seed, OP_NOISE, i as u64);
            x.iter()
                .map(|v| {
                    let e: f64 = rng.sample(rand_distr::StandardNormal);
                    v + sd * e
                })
                .collect()
        })
        .collect())
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<SimulatedDataset> {
    cfg.true_params.validate()?;
    if cfg.k != cfg.true_params.k() {
        return Err(FmeError::InvalidInput(format!(
            "config has K = {} but the networks have {} components",
            cfg.k,
            cfg.true_params.k()
        )));
    }
    let grid = Arc::new(TimeGrid::even(cfg.m)?);
    let basis = BSplineBasis::cubic(cfg.predictor_dim)?;
    let clean = gen_predictors(cfg.n, &basis, &grid, cfg.v_variance, cfg.seed)?;
    let labels = gen_labels(&clean, &grid, &cfg.true_params, cfg.seed)?;
    let y = gen_responses(&clean, &grid, &labels, &cfg.true_params, cfg.seed)?;
    let noisy = add_noise(&clean, cfg.sigma2_delta, cfg.seed)?;
    let curves = noisy
        .into_iter()
        .zip(&y)
        .zip(&labels)
        .map(|((u, &yi), &z)| Ok(CurveSample::new(grid.clone(), u)?.with_response(yi).with_label(z)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulatedDataset { grid, curves, clean })
}

/// `count` independent datasets; replicate `r` uses seed `cfg.seed + r`.
pub fn simulate_replicates(cfg: &ScenarioConfig, count: usize) -> Result<Vec<SimulatedDataset>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|r| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(r as u64);
            simulate(&c)
        })
        .collect()
}
