//! Parameterised model predictive controllers.
//!
//! Two controller families live here:
//!
//! - [`scalar`]: a one-dimensional controller with a closed-form saturated
//!   affine policy, a one-sided state constraint, and a region of attraction
//!   computed against the worst admissible disturbance;
//! - [`tube`]: a two-state tube controller that plans a nominal trajectory
//!   under constraints tightened for the accumulated disturbance, with a
//!   terminal invariant set, all derived from a single parameter vector.
//!
//! Both expose the pieces the learning and safety layers need: the applied
//! action, the optimal value, feasibility at a state, and (for the tube
//! controller) gradients of the value functions with respect to the
//! parameters.

mod scalar;
mod tube;

pub use scalar::{
    NoiseChannel, ScalarMpcParameters, ScalarProblem, scalar_is_feasible, scalar_policy,
    scalar_region_of_attraction, scalar_worst_case_step,
};
pub use tube::{
    DerivedIngredients, EnvelopeDifferentiator, FrozenStructure, TubeController,
    TubeMpcParameters, TubeProblem, THETA_DIM,
};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::solvers::{QpSolution, SolverError};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("optimisation problem is infeasible at the queried state")]
    Infeasible,
    #[error("stage cost weights must be positive definite")]
    IndefiniteCost,
    #[error("derived feedback does not stabilise the model (spectral radius {0})")]
    UnstableGain(f64),
    #[error("disturbance set is unbounded or lacks interior")]
    BadDisturbanceSet,
    #[error("terminal set is empty for these parameters")]
    TerminalSetEmpty,
    #[error("reference pair violates the tightened constraints")]
    ReferenceInfeasible,
    #[error("tail-disturbance containment check failed at the horizon")]
    HorizonContainment,
    #[error("unexpected solver outcome: {0}")]
    Internal(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Result of one controller solve: the applied action, the optimal value
/// (including all parameter-dependent constant terms), and the underlying
/// primal/dual solution.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub value: f64,
    pub action: f64,
    pub solution: QpSolution,
}
