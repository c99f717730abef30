//! Shared fixtures for the benchmarks.

use fme_core::select::responses;
use fme_core::simulate::{simulate, Scenario, ScenarioConfig};
use fme_core::{build_designs, Bases, DesignSet, ProjectionMode};
use nalgebra::DVector;

/// Designs, responses and bases of a simulated S1 dataset with `p = q = dim`.
pub fn s1_fixture(n: usize, dim: usize, seed: u64) -> (DesignSet, DVector<f64>, Bases) {
    let curves = simulate(&ScenarioConfig::preset(Scenario::S1, n, seed))
        .expect("simulation")
        .curves;
    let bases = Bases::with_dims(10, dim, dim, 3).expect("bases");
    let designs = build_designs(&curves, &bases, ProjectionMode::GramCorrected).expect("designs");
    (designs, responses(&curves).expect("responses"), bases)
}
