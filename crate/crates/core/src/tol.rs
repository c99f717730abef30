//! Numerical tolerances shared by every fitter.

/// Relative change of the (penalized) log-likelihood that stops EM.
pub const EM_CONVERGENCE: f64 = 1e-6;

/// Primal feasibility tolerance for linear programs.
pub const LP_FEASIBILITY: f64 = 1e-8;

/// Coefficients with magnitude at or below this count as zero for df.
pub const ZERO_COEF: f64 = 1e-8;

/// Lower bound on expert variances.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Lower bound on IRLS weights pi * (1 - pi) in the gating updates.
pub const WEIGHT_FLOOR: f64 = 1e-10;

/// Absolute change of an inner M-step objective that stops the inner loop.
pub const INNER_CONVERGENCE: f64 = 1e-8;

/// Component mass below which a component is declared empty.
pub const EMPTY_COMPONENT: f64 = 1e-8;

/// Condition number beyond which the derivative matrix gets ridge jitter.
pub const MAX_CONDITION: f64 = 1e12;
