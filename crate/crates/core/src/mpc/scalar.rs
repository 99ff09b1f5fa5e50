//! Closed-form scalar controller with a robust region of attraction.
//!
//! The plant is `s+ = a s + b u (+ noise)` with a one-sided state constraint
//! `s <= state_max` and input bounds `|u| <= input_max`. The policy is the
//! affine law `bias - gain * s` saturated to the admissible input interval;
//! the interval's upper end enforces, robustly against the disturbance, both
//! the state constraint at the next step and an input-bound tightening
//! proportional to the feedback gain.
//!
//! Feasibility of a state is decided against the *worst* admissible
//! disturbance: from feasible states the saturated loop stays bounded and
//! inside the constraint forever; below a threshold the saturated input can
//! no longer hold the unstable plant and the state runs away. The region of
//! attraction is that threshold interval, found by bisection.

use serde::{Deserialize, Serialize};

/// Where the bounded disturbance enters the scalar plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseChannel {
    /// `s+ = a s + b (u + w)`: the disturbance acts through the actuator.
    Input,
    /// `s+ = a s + b u + w`: the disturbance adds to the state directly.
    State,
}

/// Fixed data of the scalar control problem.
#[derive(Debug, Clone)]
pub struct ScalarProblem {
    pub a: f64,
    pub b: f64,
    /// Disturbance magnitude bound.
    pub noise_bound: f64,
    /// One-sided state constraint `s <= state_max`.
    pub state_max: f64,
    /// Input bounds `|u| <= input_max`.
    pub input_max: f64,
    /// Input-bound tightening per unit of feedback gain.
    pub gain_tightening: f64,
    pub noise_channel: NoiseChannel,
}

impl ScalarProblem {
    /// Admissible input interval at state `s`, or `None` when empty. The
    /// upper end is the lesser of the gain-tightened input bound and the
    /// largest input that keeps the next state robustly at or below the
    /// state constraint.
    pub fn input_interval(&self, params: &ScalarMpcParameters, s: f64) -> Option<(f64, f64)> {
        let lo = -self.input_max;
        let state_cap = (self.state_max - self.noise_bound - self.a * s) / self.b;
        let input_cap = self.input_max - self.gain_tightening * params.gain;
        let hi = state_cap.min(input_cap);
        if hi < lo {
            return None;
        }
        Some((lo, hi))
    }
}

/// Learnable parameters of the scalar controller: the feedback gain and the
/// steady-input bias of the affine law `u = bias - gain * s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMpcParameters {
    pub gain: f64,
    pub bias: f64,
}

impl ScalarMpcParameters {
    pub fn to_theta(self) -> [f64; 2] {
        [self.gain, self.bias]
    }

    pub fn from_theta(theta: [f64; 2]) -> Self {
        ScalarMpcParameters {
            gain: theta[0],
            bias: theta[1],
        }
    }
}

/// Saturated affine policy, or `None` when the input interval is empty.
pub fn scalar_policy(problem: &ScalarProblem, params: &ScalarMpcParameters, s: f64) -> Option<f64> {
    let (lo, hi) = problem.input_interval(params, s)?;
    Some((params.bias - params.gain * s).clamp(lo, hi))
}

/// One closed-loop step under the worst admissible disturbance (the one
/// pushing the state downwards, away from recovery). `None` when the policy
/// has no admissible input.
pub fn scalar_worst_case_step(
    problem: &ScalarProblem,
    params: &ScalarMpcParameters,
    s: f64,
) -> Option<f64> {
    let u = scalar_policy(problem, params, s)?;
    Some(match problem.noise_channel {
        NoiseChannel::Input => problem.a * s + problem.b * (u - problem.noise_bound),
        NoiseChannel::State => problem.a * s + problem.b * u - problem.noise_bound,
    })
}

/// Whether the worst-case closed loop from `s` stays admissible and bounded.
pub fn scalar_is_feasible(problem: &ScalarProblem, params: &ScalarMpcParameters, s: f64) -> bool {
    let tol = 1e-12 * (1.0 + problem.state_max.abs());
    if s > problem.state_max + tol {
        return false;
    }
    let escape = 1e3 * (1.0 + problem.state_max.abs() + params.bias.abs());
    let mut x = s;
    for _ in 0..3000 {
        match scalar_worst_case_step(problem, params, x) {
            None => return false,
            Some(next) => {
                if next > problem.state_max + tol {
                    return false;
                }
                if next.abs() > escape {
                    return false;
                }
                if (next - x).abs() <= 1e-14 * (1.0 + x.abs()) {
                    return true;
                }
                x = next;
            }
        }
    }
    true
}

/// Region of attraction `[lo, state_max]` of the saturated loop under the
/// worst admissible disturbance, by bisection on the lower endpoint. `None`
/// when even the constraint boundary is infeasible.
pub fn scalar_region_of_attraction(
    problem: &ScalarProblem,
    params: &ScalarMpcParameters,
) -> Option<(f64, f64)> {
    let hi = problem.state_max;
    if !scalar_is_feasible(problem, params, hi) {
        return None;
    }
    // Bracket the boundary: walk down until infeasible.
    let mut good = hi;
    let mut bad = None;
    let mut step = 1.0;
    for _ in 0..64 {
        let probe = good - step;
        if scalar_is_feasible(problem, params, probe) {
            good = probe;
        } else {
            bad = Some(probe);
            break;
        }
        step *= 2.0;
    }
    let mut bad = match bad {
        Some(b) => b,
        // No infeasible state found down to an enormous magnitude: treat the
        // region as unbounded below and report the probe range.
        None => return Some((good, hi)),
    };
    for _ in 0..80 {
        let mid = 0.5 * (good + bad);
        if scalar_is_feasible(problem, params, mid) {
            good = mid;
        } else {
            bad = mid;
        }
        if (good - bad).abs() <= 1e-9 * (1.0 + good.abs()) {
            break;
        }
    }
    Some((good, hi))
}
