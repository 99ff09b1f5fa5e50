//! Robust tube-based model predictive control with safely gated online
//! parameter learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`solvers`]: dense active-set QP/LP and a discrete Riccati solver;
//! - [`geometry`]: halfspace polytopes and invariant-set computations;
//! - [`model`]: linear process models, disturbance sets, logged transitions;
//! - [`mpc`]: the parameterised controllers (scalar closed form and tube QP)
//!   together with their value functions and parameter gradients;
//! - [`learning`]: temporal-difference objectives and the constrained
//!   parameter update step;
//! - [`safety`]: the gate that only promotes a candidate parameter vector
//!   once it is verified safe at the current state;
//! - [`stability`]: practical-stability certificates fitted from closed-loop
//!   data;
//! - [`harness`]: simulation truth models, experiment drivers, and trace
//!   output.
//!
//! Everything is plain `f64` dense linear algebra sized for desk-scale
//! problems (state dimensions of one or two, horizons up to a few hundred).

pub mod geometry;
pub mod harness;
pub mod learning;
pub mod model;
pub mod mpc;
pub mod safety;
pub mod solvers;
pub mod stability;
pub mod tol;

pub use geometry::Polytope;
pub use learning::{GradientEstimate, LearningError, ThetaConstraintSet, UpdateStepConfig};
pub use safety::{GateMode, GateState, SafetyError, UpdateDecision};
pub use stability::{LyapunovRecord, RateEstimates, StabilityError};
pub use model::{DataSet, LinearModel, NoiseModel, TransitionRecord};
pub use mpc::{DerivedIngredients, MpcSolution, ScalarMpcParameters, TubeMpcParameters};
pub use solvers::{QpProblem, QpSolution, QpStatus};
