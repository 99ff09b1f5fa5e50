//! Experiment orchestration: simulated ground-truth plants, run traces,
//! the two closed-loop learning experiments, figure emission, and post-run
//! stability reporting.

mod config;
mod figures;
mod report;
mod scalar;
mod trace;
mod truth;
mod tube;

pub use config::{parse_config, ExperimentConfig, ExperimentKind};
pub use figures::emit_figures;
pub use report::{
    build_lyapunov_records, per_step_thetas, run_seed_sweep, stability_report, LyapunovSection,
    StabilityReport, SweepSummary,
};
pub use scalar::{
    run_scalar_experiment, scalar_problem, scalar_roa_row, scalar_tracking_cost,
    SCALAR_INIT_INTERVAL, SCALAR_STATE0, SCALAR_THETA0,
};
pub use trace::{theta_hash, EpochRecord, RunTrace, StepRecord, TraceHeader};
pub use truth::{octagon_area, octagon_polytope, octagon_vertices, SimTruth};
pub use tube::{
    run_tube_experiment, tube_initial_parameters, tube_model, tube_problem, tube_true_cost,
    TUBE_STATE0,
};

use thiserror::Error;

use crate::learning::LearningError;
use crate::mpc::MpcError;
use crate::safety::SafetyError;
use crate::stability::StabilityError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("trace format error: {0}")]
    Trace(String),
    #[error("safety violation at step {step}: {source}")]
    Safety {
        step: usize,
        #[source]
        source: SafetyError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}
