//! Shared numeric tolerances.
//!
//! Every module draws its feasibility/optimality thresholds from here so that
//! a constraint considered satisfied by the solvers is also considered
//! satisfied by the set computations built on top of them.

/// Primal feasibility tolerance for QP/LP solutions and containment checks.
pub const FEAS: f64 = 1e-8;

/// Dual feasibility / optimality tolerance (KKT stationarity residual).
pub const OPT: f64 = 1e-8;

/// Multipliers are accepted down to this slightly negative floor.
pub const DUAL: f64 = 1e-10;

/// Tolerance used when deciding redundancy of a polytope facet via LP.
pub const REDUNDANCY: f64 = 1e-9;

/// Tolerance on support-value comparisons when testing set equality/inclusion.
pub const SET_INCLUSION: f64 = 1e-9;

/// Convergence threshold for the Riccati fixed-point iteration (max-norm).
pub const RICCATI: f64 = 1e-12;

/// Iteration cap for the maximal-RPI pre-set iteration.
pub const RPI_ITER_CAP: usize = 500;

/// Condition-number limit on the reduced Hessian before a QP is rejected.
pub const COND_LIMIT: f64 = 1e12;

/// Margin below which a cost weight is treated as not positive definite.
pub const PD_MARGIN: f64 = 1e-8;

/// Step scale below which a backtracking update is abandoned for the epoch.
pub const ALPHA_FLOOR: f64 = 1e-12;
