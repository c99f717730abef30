//! Functional mixtures of experts for scalar-on-function regression and
//! clustering: B-spline designs, EM fitters (unpenalized, Lasso-penalized and
//! derivative-sparse), metrics, simulation and model selection.

pub mod basis;
pub mod design;
pub mod em;
pub mod error;
pub mod fme;
pub mod fme_lasso;
pub mod ifme;
pub mod metrics;
pub mod optim;
pub mod select;
pub mod simulate;
pub mod tol;

pub use basis::{
    derivative_matrices, derivative_matrices_with, reconstruct_function, BSplineBasis, BoundaryRule,
    CurveSample, DerivativeMatrices, TimeGrid,
};
pub use design::{build_designs, extend_for_ifme, Bases, DesignSet, ProjectionMode};
pub use em::{FitOptions, FitReport};
pub use error::{FmeError, Result};
pub use fme::{fit_fme, ExpertParams, FmeModel, GatingParams};
pub use fme_lasso::{fit_fme_lasso, LassoPenalty};
pub use ifme::{fit_ifme, reconstruct_networks, DerivativeSpec, IfmeModel};
pub use metrics::{
    adjusted_rand, cluster_error, map_cluster, posteriors, predict_conditional, predict_response, rand_index,
    rpe, MetricReport, MixturePredictor, Partition,
};
pub use select::{
    fit_designs, fit_model, grid_search, kfold_cv, CvMetric, CvResult, FitKind, FittedModel, ModelConfig,
    Selection, SelectionGrid,
};
pub use simulate::{simulate, Scenario, ScenarioConfig, SimulatedDataset, TrueNetworks};
