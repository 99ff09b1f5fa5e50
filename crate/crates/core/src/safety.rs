//! The update gate: parameter changes are applied only in states where the
//! updated controller is verifiably feasible.
//!
//! The learning layer proposes a candidate parameter vector once per epoch.
//! At every step the gate solves the feasibility problems of both the
//! incumbent and the candidate at the current state. The candidate's action
//! is applied — and the candidate promoted to incumbent — only if the
//! candidate is feasible there; otherwise the incumbent keeps control and
//! the update is deferred. Because control always comes from a controller
//! that is feasible at the current state, recursive feasibility (and with it
//! the state constraints, for disturbances inside the modeled set) survives
//! every parameter change.
//!
//! Two gating modes share this mechanism. `Backtracking` shrinks the step
//! scale geometrically after repeated deferrals and recomputes the
//! candidate, so the proposal contracts toward the incumbent until it is
//! accepted. `FeasibilityConstrained` assembles the candidate with extra
//! constraint rows that make it feasible by construction at the states the
//! system can reach next, so it is expected to pass the gate every step; the
//! gate still verifies rather than trusts.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::{self, LearningError, ThetaConstraintSet, UpdateStepConfig};
use crate::mpc::{
    scalar_is_feasible, scalar_policy, MpcError, ScalarMpcParameters, ScalarProblem,
    TubeController, TubeProblem, TubeMpcParameters,
};
use crate::tol;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("incumbent parameters are infeasible at the current state")]
    IncumbentInfeasible,
    #[error("step scale underflow (alpha = {0:.3e}); update abandoned for this epoch")]
    AlphaUnderflow(f64),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

/// How the gate treats deferrals and candidate assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Check the candidate at the current state; shrink the step scale and
    /// recompute after `n_fail` consecutive deferrals.
    Backtracking,
    /// Candidates carry feasibility constraints for the reachable states, so
    /// updates are expected to apply every step.
    FeasibilityConstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOutcome {
    Applied,
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionReason {
    /// The candidate is feasible at the decision state.
    NewFeasibleHere,
    /// The candidate defines a valid controller but is infeasible here.
    NewInfeasibleHere,
    /// The candidate parameters define no valid controller at all.
    PostCheckFailed,
}

/// One gate decision, emitted whenever a candidate was pending.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UpdateDecision {
    pub outcome: UpdateOutcome,
    pub reason: DecisionReason,
    pub alpha_used: f64,
    pub fail_count: usize,
}

/// Mutable gate bookkeeping carried across steps.
#[derive(Debug, Clone)]
pub struct GateState {
    pub theta_current: DVector<f64>,
    /// Pending proposal; `None` when no update is in flight (consumed,
    /// abandoned, or not yet computed this epoch).
    pub theta_candidate: Option<DVector<f64>>,
    pub alpha: f64,
    pub fail_count: usize,
    pub mode: GateMode,
}

impl GateState {
    pub fn new(theta_current: DVector<f64>, mode: GateMode) -> Self {
        GateState {
            theta_current,
            theta_candidate: None,
            alpha: 1.0,
            fail_count: 0,
            mode,
        }
    }

    /// Start a learning epoch: full step scale, fresh fail counter, new
    /// proposal (or none, if the learner produced none).
    pub fn begin_epoch(&mut self, candidate: Option<DVector<f64>>) {
        self.alpha = 1.0;
        self.fail_count = 0;
        self.theta_candidate = candidate;
    }
}

/// What the gate learned about a parameter vector at a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assessment {
    FeasibleHere,
    InfeasibleHere,
    /// The parameters define no controller (indefinite weights, unstable
    /// gain, empty terminal set, ...).
    InvalidController,
}

/// Controller family the gate can interrogate: instantiate from a parameter
/// vector, test feasibility at a state, produce the applied input.
/// Implementations may cache instantiated controllers; the gate asks about
/// at most two parameter vectors per step.
pub trait ControllerOracle {
    fn assess(&mut self, theta: &DVector<f64>, state: &DVector<f64>)
        -> Result<Assessment, MpcError>;
    fn action(&mut self, theta: &DVector<f64>, state: &DVector<f64>) -> Result<f64, MpcError>;
}

/// One gate step. Verifies the incumbent's feasibility (the safety
/// invariant), assesses any pending candidate, applies the appropriate
/// action, and promotes the candidate on success. Returns the applied
/// action and, when a candidate was pending, the decision taken.
pub fn gate<O: ControllerOracle>(
    oracle: &mut O,
    state: &DVector<f64>,
    gs: &mut GateState,
) -> Result<(f64, Option<UpdateDecision>), SafetyError> {
    match oracle.assess(&gs.theta_current, state)? {
        Assessment::FeasibleHere => {}
        Assessment::InfeasibleHere | Assessment::InvalidController => {
            return Err(SafetyError::IncumbentInfeasible)
        }
    }

    let Some(candidate) = gs.theta_candidate.clone() else {
        let action = oracle.action(&gs.theta_current, state)?;
        return Ok((action, None));
    };

    match oracle.assess(&candidate, state)? {
        Assessment::FeasibleHere => {
            let action = oracle.action(&candidate, state)?;
            let decision = UpdateDecision {
                outcome: UpdateOutcome::Applied,
                reason: DecisionReason::NewFeasibleHere,
                alpha_used: gs.alpha,
                fail_count: gs.fail_count,
            };
            gs.theta_current = candidate;
            gs.theta_candidate = None;
            gs.fail_count = 0;
            Ok((action, Some(decision)))
        }
        other => {
            let action = oracle.action(&gs.theta_current, state)?;
            gs.fail_count += 1;
            let reason = match other {
                Assessment::InfeasibleHere => DecisionReason::NewInfeasibleHere,
                _ => DecisionReason::PostCheckFailed,
            };
            let decision = UpdateDecision {
                outcome: UpdateOutcome::Deferred,
                reason,
                alpha_used: gs.alpha,
                fail_count: gs.fail_count,
            };
            Ok((action, Some(decision)))
        }
    }
}

/// Shrink the backtracking multiplier by `cfg.rho`, recompute the candidate
/// from the incumbent at the smaller scale, and reset the fail counter.
/// `gate_state.alpha` is a multiplier on the configured base step
/// `cfg.alpha`, so the effective scale is their product. Callers invoke
/// this once `fail_count ≥ cfg.n_fail`. Below the multiplier floor the
/// pending update is abandoned for the epoch and the underflow reported.
pub fn backtrack_shrink(
    gs: &mut GateState,
    grad: &DVector<f64>,
    cfg: &UpdateStepConfig,
    constraints: &ThetaConstraintSet,
) -> Result<(), SafetyError> {
    let alpha = gs.alpha * cfg.rho;
    gs.fail_count = 0;
    if alpha < tol::ALPHA_FLOOR {
        gs.alpha = alpha;
        gs.theta_candidate = None;
        return Err(SafetyError::AlphaUnderflow(alpha));
    }
    gs.alpha = alpha;
    let candidate = learning::constrained_step(
        &gs.theta_current,
        grad,
        cfg.alpha * alpha,
        &cfg.metric,
        constraints,
    )?;
    gs.theta_candidate = Some(candidate);
    Ok(())
}

// ---------------------------------------------------------------------------
// Oracles for the two controller families
// ---------------------------------------------------------------------------

/// Gate oracle over the one-dimensional controller family. Feasibility is
/// membership of the state in the controller's region of attraction, tested
/// by iterating the worst-case closed loop.
pub struct ScalarOracle {
    pub problem: ScalarProblem,
}

impl ControllerOracle for ScalarOracle {
    fn assess(
        &mut self,
        theta: &DVector<f64>,
        state: &DVector<f64>,
    ) -> Result<Assessment, MpcError> {
        let params = ScalarMpcParameters::from_theta([theta[0], theta[1]]);
        Ok(if scalar_is_feasible(&self.problem, &params, state[0]) {
            Assessment::FeasibleHere
        } else {
            Assessment::InfeasibleHere
        })
    }

    fn action(&mut self, theta: &DVector<f64>, state: &DVector<f64>) -> Result<f64, MpcError> {
        let params = ScalarMpcParameters::from_theta([theta[0], theta[1]]);
        scalar_policy(&self.problem, &params, state[0]).ok_or(MpcError::Infeasible)
    }
}

/// Gate oracle over the tube controller family, caching the two most
/// recently instantiated controllers (incumbent and candidate).
pub struct TubeOracle {
    pub problem: TubeProblem,
    cache: Vec<(DVector<f64>, TubeController)>,
}

impl TubeOracle {
    pub fn new(problem: TubeProblem) -> Self {
        TubeOracle {
            problem,
            cache: Vec::new(),
        }
    }

    /// Cached or freshly derived controller for `theta`; `Ok(None)` when the
    /// parameters define no valid controller.
    pub fn controller(&mut self, theta: &DVector<f64>) -> Result<Option<&TubeController>, MpcError> {
        if let Some(pos) = self.cache.iter().position(|(t, _)| t == theta) {
            // Borrow-checker friendly: re-index after the search.
            return Ok(Some(&self.cache[pos].1));
        }
        let params = TubeMpcParameters::from_theta(theta);
        match TubeController::new(self.problem.clone(), params) {
            Ok(ctl) => {
                if self.cache.len() >= 2 {
                    self.cache.remove(0);
                }
                self.cache.push((theta.clone(), ctl));
                Ok(Some(&self.cache.last().unwrap().1))
            }
            Err(
                MpcError::IndefiniteCost
                | MpcError::UnstableGain(_)
                | MpcError::BadDisturbanceSet
                | MpcError::TerminalSetEmpty
                | MpcError::ReferenceInfeasible
                | MpcError::HorizonContainment,
            ) => Ok(None),
            Err(hard) => Err(hard),
        }
    }
}

impl ControllerOracle for TubeOracle {
    fn assess(
        &mut self,
        theta: &DVector<f64>,
        state: &DVector<f64>,
    ) -> Result<Assessment, MpcError> {
        match self.controller(theta)? {
            None => Ok(Assessment::InvalidController),
            Some(ctl) => Ok(if ctl.is_feasible(state)? {
                Assessment::FeasibleHere
            } else {
                Assessment::InfeasibleHere
            }),
        }
    }

    fn action(&mut self, theta: &DVector<f64>, state: &DVector<f64>) -> Result<f64, MpcError> {
        match self.controller(theta)? {
            None => Err(MpcError::Infeasible),
            Some(ctl) => ctl.action(state),
        }
    }
}

// ---------------------------------------------------------------------------
// Post-run diagnostics
// ---------------------------------------------------------------------------

/// Summary of how long proposed updates waited at the gate.
#[derive(Debug, Clone, Serialize)]
pub struct NonblockingReport {
    pub total_decisions: usize,
    pub applied: usize,
    /// Number of deferrals that preceded each application, in order.
    pub deferral_durations: Vec<usize>,
    /// Deferrals at the end of the stream not yet resolved by an application.
    pub unresolved_deferrals: usize,
    pub max_deferral: usize,
}

/// Scan a decision stream and report deferral-run lengths. A finite maximum
/// with no unresolved tail certifies that every proposed update was
/// eventually applied.
pub fn empirical_nonblocking_check(decisions: &[UpdateDecision]) -> NonblockingReport {
    let mut durations = Vec::new();
    let mut run = 0usize;
    let mut applied = 0usize;
    for d in decisions {
        match d.outcome {
            UpdateOutcome::Deferred => run += 1,
            UpdateOutcome::Applied => {
                applied += 1;
                durations.push(run);
                run = 0;
            }
        }
    }
    NonblockingReport {
        total_decisions: decisions.len(),
        applied,
        max_deferral: durations.iter().copied().max().unwrap_or(0).max(run),
        deferral_durations: durations,
        unresolved_deferrals: run,
    }
}

/// Occupancy-bound check: with a disturbance of density at most `phi_bar`
/// entering the state additively, the one-step-ahead probability of landing
/// in a set of measure `mu` is at most `mu·phi_bar`. Compares an empirical
/// hit frequency against that bound plus a three-sigma binomial margin.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OccupancyReport {
    pub hits: usize,
    pub total: usize,
    pub frequency: f64,
    pub bound: f64,
    pub margin: f64,
    pub within_bound: bool,
}

pub fn occupancy_bound_check(hits: usize, total: usize, mu: f64, phi_bar: f64) -> OccupancyReport {
    assert!(total > 0);
    let frequency = hits as f64 / total as f64;
    let bound = mu * phi_bar;
    let margin = 3.0 * (bound * (1.0 - bound).max(0.0) / total as f64).sqrt();
    OccupancyReport {
        hits,
        total,
        frequency,
        bound,
        margin,
        within_bound: frequency <= bound + margin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::NoiseChannel;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn benchmark_problem() -> ScalarProblem {
        ScalarProblem {
            a: 1.1,
            b: 0.1,
            noise_bound: 0.1,
            state_max: 0.1,
            input_max: 10.0,
            gain_tightening: 0.5,
            noise_channel: NoiseChannel::Input,
        }
    }

    fn theta(gain: f64, bias: f64) -> DVector<f64> {
        DVector::from_vec(vec![gain, bias])
    }

    #[test]
    fn identical_candidate_is_always_applied() {
        let mut oracle = ScalarOracle {
            problem: benchmark_problem(),
        };
        let mut gs = GateState::new(theta(2.0, 0.0), GateMode::Backtracking);
        gs.begin_epoch(Some(theta(2.0, 0.0)));
        let s = DVector::from_vec(vec![-8.0]);
        let (action, decision) = gate(&mut oracle, &s, &mut gs).unwrap();
        let d = decision.unwrap();
        assert_eq!(d.outcome, UpdateOutcome::Applied);
        assert_eq!(d.reason, DecisionReason::NewFeasibleHere);
        assert!(gs.theta_candidate.is_none());
        assert_eq!(gs.theta_current, theta(2.0, 0.0));
        // u = bias - gain*s = 16, clamped to the tightened cap 10 - 0.5*2 = 9.
        assert_abs_diff_eq!(action, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn narrower_candidate_defers_until_the_state_recovers() {
        let mut oracle = ScalarOracle {
            problem: benchmark_problem(),
        };
        let mut gs = GateState::new(theta(2.0, 0.0), GateMode::Backtracking);
        gs.begin_epoch(Some(theta(11.0, 0.9)));

        // The candidate's recoverable interval starts at 0.5*11 - 9.9 = -4.4,
        // which excludes -8: deferred.
        let s = DVector::from_vec(vec![-8.0]);
        let (_, decision) = gate(&mut oracle, &s, &mut gs).unwrap();
        let d = decision.unwrap();
        assert_eq!(d.outcome, UpdateOutcome::Deferred);
        assert_eq!(d.reason, DecisionReason::NewInfeasibleHere);
        assert_eq!(gs.fail_count, 1);
        assert_eq!(gs.theta_current, theta(2.0, 0.0));
        assert!(gs.theta_candidate.is_some());

        // At -2 the candidate is feasible: applied and promoted.
        let s = DVector::from_vec(vec![-2.0]);
        let (_, decision) = gate(&mut oracle, &s, &mut gs).unwrap();
        assert_eq!(decision.unwrap().outcome, UpdateOutcome::Applied);
        assert_eq!(gs.theta_current, theta(11.0, 0.9));
        assert_eq!(gs.fail_count, 0);
    }

    #[test]
    fn incumbent_infeasible_is_fatal() {
        let mut oracle = ScalarOracle {
            problem: benchmark_problem(),
        };
        let mut gs = GateState::new(theta(11.0, 0.9), GateMode::Backtracking);
        let s = DVector::from_vec(vec![-8.0]);
        match gate(&mut oracle, &s, &mut gs) {
            Err(SafetyError::IncumbentInfeasible) => {}
            other => panic!("expected IncumbentInfeasible, got {other:?}"),
        }
    }

    #[test]
    fn no_pending_candidate_yields_no_decision() {
        let mut oracle = ScalarOracle {
            problem: benchmark_problem(),
        };
        let mut gs = GateState::new(theta(2.0, 0.0), GateMode::Backtracking);
        let s = DVector::from_vec(vec![-8.0]);
        let (action, decision) = gate(&mut oracle, &s, &mut gs).unwrap();
        assert!(decision.is_none());
        assert_abs_diff_eq!(action, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn shrink_follows_the_geometric_schedule() {
        let mut gs = GateState::new(theta(2.0, 0.0), GateMode::Backtracking);
        gs.begin_epoch(Some(theta(3.0, 0.0)));
        gs.fail_count = 1;
        let grad = DVector::from_vec(vec![-1.0, 0.0]);
        let cfg = UpdateStepConfig::identity_metric(2, 1.0, 0.9, 1);
        let cons = ThetaConstraintSet::unconstrained(2);
        for k in 1..=5 {
            backtrack_shrink(&mut gs, &grad, &cfg, &cons).unwrap();
            assert_abs_diff_eq!(gs.alpha, 0.9f64.powi(k), epsilon = 1e-15);
            assert_eq!(gs.fail_count, 0);
            // Unconstrained identity-metric step: candidate = θ_p − α·g.
            let cand = gs.theta_candidate.as_ref().unwrap();
            assert_abs_diff_eq!(cand[0], 2.0 + 0.9f64.powi(k), epsilon = 1e-9);
            gs.fail_count = 1;
        }
    }

    #[test]
    fn underflow_abandons_the_epoch() {
        let mut gs = GateState::new(theta(2.0, 0.0), GateMode::Backtracking);
        gs.begin_epoch(Some(theta(3.0, 0.0)));
        gs.alpha = 1e-12;
        let grad = DVector::from_vec(vec![-1.0, 0.0]);
        let cfg = UpdateStepConfig::identity_metric(2, 1.0, 0.9, 1);
        let cons = ThetaConstraintSet::unconstrained(2);
        match backtrack_shrink(&mut gs, &grad, &cfg, &cons) {
            Err(SafetyError::AlphaUnderflow(a)) => assert!(a < tol::ALPHA_FLOOR),
            other => panic!("expected AlphaUnderflow, got {other:?}"),
        }
        assert!(gs.theta_candidate.is_none());
    }

    #[test]
    fn tube_oracle_gates_and_rejects_invalid_parameters() {
        let model = crate::model::LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.05, 0.1]),
            DVector::zeros(2),
        )
        .unwrap();
        let problem = TubeProblem::with_boxes(model, 1.0, 10.0, 50, 1e-4);
        let good = TubeMpcParameters {
            lam: DMatrix::zeros(2, 2),
            lin: DVector::zeros(2),
            l0: 0.0,
            hx: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.01]),
            hu: 0.01,
            x_ref: DVector::zeros(2),
            u_ref: 0.0,
            m_set: DMatrix::from_row_slice(4, 2, &[20.0, 0.0, -20.0, 0.0, 0.0, 20.0, 0.0, -20.0]),
        };
        let mut oracle = TubeOracle::new(problem);
        let inside = DVector::from_vec(vec![0.4, 0.0]);
        let outside = DVector::from_vec(vec![5.0, 5.0]);
        let t = good.to_theta();
        assert_eq!(
            oracle.assess(&t, &inside).unwrap(),
            Assessment::FeasibleHere
        );
        assert_eq!(
            oracle.assess(&t, &outside).unwrap(),
            Assessment::InfeasibleHere
        );

        let mut bad = good.clone();
        bad.hx = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.01]);
        assert_eq!(
            oracle.assess(&bad.to_theta(), &inside).unwrap(),
            Assessment::InvalidController
        );

        // A full gate step against the tube family.
        let mut gs = GateState::new(t.clone(), GateMode::FeasibilityConstrained);
        gs.begin_epoch(Some(bad.to_theta()));
        let (_, decision) = gate(&mut oracle, &inside, &mut gs).unwrap();
        let d = decision.unwrap();
        assert_eq!(d.outcome, UpdateOutcome::Deferred);
        assert_eq!(d.reason, DecisionReason::PostCheckFailed);
        assert_eq!(gs.theta_current, t);
    }

    #[test]
    fn deferral_runs_are_reported_in_order() {
        let mk = |outcome| UpdateDecision {
            outcome,
            reason: DecisionReason::NewFeasibleHere,
            alpha_used: 1.0,
            fail_count: 0,
        };
        let stream = vec![
            mk(UpdateOutcome::Deferred),
            mk(UpdateOutcome::Deferred),
            mk(UpdateOutcome::Applied),
            mk(UpdateOutcome::Deferred),
            mk(UpdateOutcome::Applied),
            mk(UpdateOutcome::Applied),
        ];
        let report = empirical_nonblocking_check(&stream);
        assert_eq!(report.applied, 3);
        assert_eq!(report.deferral_durations, vec![2, 1, 0]);
        assert_eq!(report.unresolved_deferrals, 0);
        assert_eq!(report.max_deferral, 2);

        let trailing = empirical_nonblocking_check(&stream[..4]);
        assert_eq!(trailing.unresolved_deferrals, 1);
    }

    #[test]
    fn occupancy_check_accepts_the_bound_and_flags_excess() {
        // Bound 0.02 * 5 = 0.1; margin 3*sqrt(0.09/10000) = 0.009.
        let ok = occupancy_bound_check(1000, 10_000, 0.02, 5.0);
        assert_abs_diff_eq!(ok.bound, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(ok.margin, 0.009, epsilon = 1e-12);
        assert!(ok.within_bound);

        let bad = occupancy_bound_check(1200, 10_000, 0.02, 5.0);
        assert!(!bad.within_bound);
    }
}
