mod support;

use fme_core::basis::CurveSample;
use fme_core::design::{build_designs, Bases, ProjectionMode};
use fme_core::fme::{fit_fme, ExpertParams, FmeModel, GatingParams};
use fme_core::fme_lasso::{fit_fme_lasso, LassoPenalty};
use fme_core::metrics::{adjusted_rand, cluster_error, rand_index, Partition};
use fme_core::optim::{coord_lasso, LassoOptions};
use fme_core::select::responses;
use fme_core::simulate::{simulate, Scenario, ScenarioConfig};
use fme_core::FitOptions;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn partition_metrics_match_pair_and_permutation_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let ka = rng.random_range(1..=7);
        let kb = rng.random_range(1..=7);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(1..=ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(1..=kb)).collect();
        let pa = Partition::new(a.clone(), ka).unwrap();
        let pb = Partition::new(b.clone(), kb).unwrap();
        assert_eq!(rand_index(&pa, &pb).unwrap(), support::rand_index_pairs(&a, &b), "case {case}");
        assert_eq!(adjusted_rand(&pa, &pb).unwrap(), support::adjusted_rand_pairs(&a, &b), "case {case}");
        assert_eq!(cluster_error(&pa, &pb).unwrap(), support::cluster_error_permutations(&a, &b), "case {case}");
    }
}

#[test]
fn dense_df_hand_count() {
    let model = FmeModel {
        k: 3,
        gating: GatingParams::from_matrix(DMatrix::from_element(2, 11, 0.5)),
        experts: (0..3)
            .map(|_| ExpertParams {
                beta0: 1.0,
                eta: vec![0.3; 10],
                sigma2: 1.0,
            })
            .collect(),
        bases: None,
    };
    // 20 gating slopes + 2 gating intercepts + 30 expert slopes + 3 intercepts + 3 variances
    assert_eq!(model.df(), 58);
}

#[test]
fn lasso_kkt_certificates() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let n = rng.random_range(5..60);
        let d = rng.random_range(1..12);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.05..2.0));
        let pen = rng.random_range(0.0..2.0);
        let scale = rng.random_range(0.2..3.0);
        let fit = coord_lasso(&x, &y, &w, pen, scale, None, true, LassoOptions::default()).unwrap();
        let t = pen * scale;
        let v = support::lasso_kkt_violation(&x, &y, &w, t, fit.intercept, &fit.coef);
        let gref: f64 = (0..n).map(|i| w[i] * y[i].abs()).sum::<f64>();
        assert!(v <= 1e-6 * (1.0 + t + gref), "case {case}: violation {v}");
    }
}

fn data(n: usize, seed: u64) -> Vec<CurveSample> {
    simulate(&ScenarioConfig::preset(Scenario::S1, n, seed)).unwrap().curves
}

#[test]
fn single_expert_is_weighted_ols() {
    for seed in 0..5 {
        let curves = data(80, seed);
        let bases = Bases::with_dims(10, 8, 8, 3).unwrap();
        let d = build_designs(&curves, &bases, ProjectionMode::GramCorrected).unwrap();
        let y = responses(&curves).unwrap();
        let (m, rep) = fit_fme(&d, &y, 1, &FitOptions::default()).unwrap();
        let b = support::wls_normal_equations(&d.x, &y, &DVector::from_element(80, 1.0));
        let e = &m.experts[0];
        assert!((e.beta0 - b[0]).abs() <= 1e-8 * (1.0 + b[0].abs()));
        for j in 0..8 {
            assert!((e.eta[j] - b[j + 1]).abs() <= 1e-8 * (1.0 + b[j + 1].abs()), "seed {seed} coef {j}");
        }
        let fit = &d.x * DVector::from_column_slice(&e.eta);
        let rss: f64 = (0..80).map(|i| (y[i] - e.beta0 - fit[i]).powi(2)).sum();
        assert!((e.sigma2 - rss / 80.0).abs() <= 1e-8 * e.sigma2);
        assert_eq!(rep.df, 8 + 2);
    }
}

#[test]
fn unpenalized_lasso_fit_matches_fme() {
    // small bases keep the unpenalized gating away from separation
    let bases = Bases::with_dims(6, 4, 4, 3).unwrap();
    let opts = FitOptions {
        n_starts: 4,
        tol: 1e-10,
        max_iter: 2000,
        ..FitOptions::default()
    };
    for seed in 0..20 {
        let curves = data(150, 100 + seed);
        let d = build_designs(&curves, &bases, ProjectionMode::GramCorrected).unwrap();
        let y = responses(&curves).unwrap();
        let (_, a) = fit_fme(&d, &y, 2, &opts).unwrap();
        let (_, b) = fit_fme_lasso(&d, &y, 2, LassoPenalty { lambda: 0.0, chi: 0.0 }, &opts).unwrap();
        assert!((a.loglik - b.loglik).abs() <= 1e-4, "seed {seed}: {} vs {}", a.loglik, b.loglik);
    }
}
