//! Numerical kernels shared by the fitters.

pub mod dantzig;
pub mod lasso;
pub mod lp;
pub mod softmax;
pub mod wls;

pub use dantzig::{dantzig_lp_build, dantzig_select, DantzigFit};
pub use lasso::{coord_lasso, lasso_objective, LassoFit, LassoOptions};
pub use lp::{solve_lp, solve_lp_with, LinearProgram, LpOptions, LpSolution, LpStatus};
pub use softmax::{
    gate_probs, gates, gating_gradient, gating_hessian, log_gates, log_sum_exp, nr_gating_step,
    nr_maximize, softmax_gating_q,
};
pub use wls::{soft_threshold, solve_spd, weighted_ols, weighted_ols_intercept};
