//! Independent reference implementations used by the integration and
//! acceptance tests.
#![allow(dead_code)]

use fme_core::optim::LinearProgram;
use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random bounded LP with at most 8 variables and 10 constraints.
pub fn random_lp<R: Rng>(rng: &mut R) -> LinearProgram {
    let n = rng.random_range(1..=8);
    let m_ub = rng.random_range(0..=4);
    let m_eq = rng.random_range(0..=2.min(n - 1));
    let objective: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    // rows plus a box row sum(z) <= M keeping the region bounded
    let mut a_ub = DMatrix::from_fn(m_ub + 1, n, |_, _| rng.random_range(-1.0..1.0));
    a_ub.row_mut(m_ub).fill(1.0);
    let mut b_ub: Vec<f64> = (0..m_ub).map(|_| rng.random_range(-0.5..2.0)).collect();
    b_ub.push(rng.random_range(1.0..5.0));
    let a_eq = DMatrix::from_fn(m_eq, n, |_, _| rng.random_range(-1.0..1.0));
    let b_eq: Vec<f64> = (0..m_eq).map(|_| rng.random_range(-0.5..1.0)).collect();
    let lower: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.2) { rng.random_range(-1.0..0.0) } else { 0.0 })
        .collect();
    let upper: Vec<Option<f64>> = (0..n)
        .map(|_| if rng.random_bool(0.2) { Some(rng.random_range(0.2..2.0)) } else { None })
        .collect();
    LinearProgram {
        objective,
        a_ub,
        b_ub,
        a_eq,
        b_eq,
        lower,
        upper,
    }
}

/// Minimum of the objective over all basic feasible points, `None` when no
/// vertex is feasible. Exact for bounded feasible regions.
pub fn vertex_enumeration(lp: &LinearProgram) -> Option<f64> {
    let n = lp.n_vars();
    let mut ineq: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..lp.a_ub.nrows() {
        ineq.push((lp.a_ub.row(i).iter().copied().collect(), lp.b_ub[i]));
    }
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = -1.0;
        ineq.push((e, -lp.lower[j]));
        if let Some(u) = lp.upper[j] {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            ineq.push((e, u));
        }
    }
    let eq: Vec<(Vec<f64>, f64)> = (0..lp.a_eq.nrows())
        .map(|i| (lp.a_eq.row(i).iter().copied().collect(), lp.b_eq[i]))
        .collect();
    let need = n - eq.len();
    let mut best: Option<f64> = None;
    for subset in (0..ineq.len()).combinations(need) {
        let rows: Vec<&(Vec<f64>, f64)> = eq.iter().chain(subset.iter().map(|&k| &ineq[k])).collect();
        let a = DMatrix::from_fn(n, n, |i, j| rows[i].0[j]);
        let b = DVector::from_fn(n, |i, _| rows[i].1);
        let svd = a.clone().svd(false, false);
        if svd.singular_values.min() < 1e-9 * svd.singular_values.max().max(1.0) {
            continue;
        }
        let Some(z) = a.lu().solve(&b) else { continue };
        if lp.max_violation(z.as_slice()) > 1e-9 {
            continue;
        }
        let v = lp.value(z.as_slice());
        best = Some(best.map_or(v, |b: f64| b.min(v)));
    }
    best
}

/// Rand index by looping over all pairs.
pub fn rand_index_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0u64;
    let mut total = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

/// Adjusted Rand index from pair counts gathered over all pairs.
pub fn adjusted_rand_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut total) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            total += 1.0;
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / total;
    let max = 0.5 * (only_a + only_b);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// `1 - max accuracy` over every injective relabelling of `b` onto `a`.
pub fn cluster_error_permutations(a: &[usize], b: &[usize]) -> f64 {
    let la: Vec<usize> = a.iter().copied().unique().sorted().collect();
    let lb: Vec<usize> = b.iter().copied().unique().sorted().collect();
    let k = la.len().max(lb.len());
    let n = a.len() as f64;
    let mut best = 0usize;
    // map each b label to a distinct slot among max(k) a-slots
    for perm in (0..k).permutations(lb.len()) {
        let mut hits = 0;
        for (x, y) in a.iter().zip(b) {
            let bi = lb.iter().position(|v| v == y).unwrap();
            let slot = perm[bi];
            if slot < la.len() && la[slot] == *x {
                hits += 1;
            }
        }
        best = best.max(hits);
    }
    1.0 - best as f64 / n
}

/// Largest violation of the weighted Lasso optimality conditions
/// `g_j = sum_i w_i x_ij r_i`, `|g_j| <= t` at zero and `g_j = t sign(b_j)`
/// elsewhere, together with the intercept condition `sum_i w_i r_i = 0`.
pub fn lasso_kkt_violation(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    t: f64,
    b0: f64,
    b: &DVector<f64>,
) -> f64 {
    let r: DVector<f64> = DVector::from_fn(y.len(), |i, _| w[i] * (y[i] - b0 - (x.row(i) * b)[0]));
    let mut worst = r.sum().abs();
    for j in 0..b.len() {
        let g: f64 = x.column(j).dot(&r);
        let v = if b[j] == 0.0 { (g.abs() - t).max(0.0) } else { (g - t * b[j].signum()).abs() };
        worst = worst.max(v);
    }
    worst
}

/// Weighted least squares with an intercept by the normal equations;
/// intercept first.
pub fn wls_normal_equations(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let aug = x.clone().insert_column(0, 1.0);
    let wm = DMatrix::from_diagonal(w);
    (aug.transpose() * &wm * &aug)
        .full_piv_lu()
        .solve(&(aug.transpose() * &wm * y))
        .expect("normal equations are regular")
}

/// Outcome of one randomized fit of the monotonicity suite.
#[derive(Debug)]
pub struct TraceCheck {
    pub case: usize,
    pub kind: fme_core::FitKind,
    pub k: usize,
    /// Largest drop between consecutive objective values.
    pub max_decrease: f64,
    pub first: f64,
    pub last: f64,
}

/// Fits `count` randomized problems, cycling through the three fitters with
/// random K in 1..=4, random sizes, penalties and data seeds.
pub fn monotonicity_suite(count: usize, seed: u64) -> Vec<TraceCheck> {
    use fme_core::simulate::{simulate, Scenario, ScenarioConfig};
    use fme_core::{fit_model, FitKind, FitOptions, ModelConfig};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for case in 0..count {
        let kind = [FitKind::Fme, FitKind::FmeLasso, FitKind::Ifme][case % 3];
        let k = rng.random_range(1..=4);
        let n = rng.random_range(60..=140);
        let p = rng.random_range(6..=8);
        let scenario = [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4][rng.random_range(0..4)];
        let data_seed: u64 = rng.random();
        let cfg = ModelConfig {
            kind,
            k,
            lambda: rng.random_range(0.05..2.0),
            chi: rng.random_range(0.5..3.0),
            dims: [8, p, p],
            fit: FitOptions {
                n_starts: 1,
                max_iter: 200,
                seed: rng.random(),
                ..FitOptions::default()
            },
            ..ModelConfig::default()
        };
        let curves = simulate(&ScenarioConfig::preset(scenario, n, data_seed)).unwrap().curves;
        let (_, rep) = fit_model(&cfg, &curves).unwrap_or_else(|e| panic!("case {case}: {e}"));
        out.push(TraceCheck {
            case,
            kind,
            k,
            max_decrease: rep.max_decrease,
            first: rep.loglik_trace[0],
            last: *rep.loglik_trace.last().unwrap(),
        });
    }
    out
}
