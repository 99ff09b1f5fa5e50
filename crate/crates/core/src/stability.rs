//! Lyapunov and input-to-state-stability telemetry for completed runs.
//!
//! The candidate joint Lyapunov function is `W(s, θ_p) = V̂_{θ_p}(s) +
//! ζ·‖θ_p − θ*‖`: the controller's optimal value plus a parameter-distance
//! term. When the update sequence contracts toward θ* at rate r and the
//! value function is α_V-Lipschitz in the parameters, any ζ ≥
//! α_V·(r+1)/(1−r) makes W decrease along the closed loop outside a level
//! set — even at steps where V̂ alone jumps because the parameters moved.
//! This module estimates those rates from a trace, computes W series, and
//! verifies the decrease and the ISS-style inequality post hoc.
//!
//! θ* is not known online: following the experimental protocol it is taken
//! as the mean of the parameters over the final epochs, and all checks here
//! are post-processing passes over immutable records.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::mpc::{MpcError, TubeController};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("state infeasible while evaluating the value function")]
    InfeasibleState,
    #[error("parameter-distance sequence entirely below the resolution floor")]
    DegenerateSequence,
    #[error("no monotone gain function fits the records: a zero-displacement step failed the plain decrease condition (record {0})")]
    NoMonotoneFit(usize),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

/// Per-step Lyapunov telemetry, one record per simulated step.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovRecord {
    pub step: usize,
    pub epoch: usize,
    /// Optimal value of the controller in force at this step.
    pub v_hat: f64,
    /// Parameter distance to θ*: ‖θ_p − θ*‖.
    pub delta_p: f64,
    /// Practical decrease offset δ̂ of the controller in force.
    pub delta_hat: f64,
    /// V̂ + ζ·Δ_p.
    pub w_value: f64,
    /// Whether V̂ ≤ δ̂/(1 − γ) for the Lyapunov contraction rate γ.
    pub in_level_set: bool,
    /// The transition arriving at this step left the modeled disturbance
    /// set; guarantees are void across it and checks skip it.
    pub model_violation: bool,
}

/// Contraction and regularity estimates of an update sequence.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateEstimates {
    /// Largest observed ‖θ_{p+1} − θ*‖ / ‖θ_p − θ*‖ above the floor.
    pub r_hat: f64,
    /// Smallest offset making Δ_{p+1} ≤ r̂·Δ_p + q̂ hold on every update.
    pub q_hat: f64,
    /// Largest observed value-function sensitivity to parameter changes.
    pub alpha_v_hat: f64,
    /// ζ threshold α_V·(r̂+1)/(1−r̂); infinite when r̂ ≥ 1.
    pub zeta_min: f64,
    /// Resolution floor below which ratios were not trusted.
    pub floor: f64,
}

/// W(s, θ) = V̂ + ζ·Δ. Linear in ζ by construction.
pub fn w_value(v_hat: f64, delta_p: f64, zeta: f64) -> f64 {
    v_hat + zeta * delta_p
}

pub fn parameter_distance(theta_p: &DVector<f64>, theta_star: &DVector<f64>) -> f64 {
    (theta_p - theta_star).norm()
}

/// Post-hoc reference parameters: the mean over the final `tail` entries.
pub fn theta_star_from_tail(thetas: &[DVector<f64>], tail: usize) -> DVector<f64> {
    assert!(!thetas.is_empty());
    let k = tail.clamp(1, thetas.len());
    let dim = thetas[0].len();
    let mut mean = DVector::zeros(dim);
    for t in &thetas[thetas.len() - k..] {
        mean += t;
    }
    mean / k as f64
}

/// ζ lower bound making W a Lyapunov function: α_V·(r+1)/(1−r).
pub fn zeta_min(alpha_v: f64, r: f64) -> f64 {
    if r >= 1.0 {
        f64::INFINITY
    } else {
        alpha_v * (r + 1.0) / (1.0 - r)
    }
}

/// Level-set membership in value space: V̂ ≤ δ̂/(1−γ), with a relative
/// tolerance so boundary states do not flicker.
pub fn in_level_set(v_hat: f64, delta_hat: f64, gamma: f64) -> bool {
    assert!((0.0..1.0).contains(&gamma));
    let threshold = delta_hat / (1.0 - gamma);
    v_hat <= threshold + 1e-9 * (1.0 + threshold.abs())
}

/// Whether the controller's value at `s` lies inside the `δ/(1−γ)` level
/// set; infeasible states are outside every level set.
pub fn level_set_membership(
    ctl: &TubeController,
    s: &DVector<f64>,
    delta: f64,
    gamma: f64,
) -> Result<bool, StabilityError> {
    match ctl.solve_value(s) {
        Ok(sol) => Ok(in_level_set(sol.value, delta, gamma)),
        Err(MpcError::Infeasible) => Ok(false),
        Err(e) => Err(StabilityError::Mpc(e)),
    }
}

/// Practical decrease offset of a controller: the largest observed
/// `V̂(s⁺) − γ·V̂(s)` over the supplied feasible states and all vertices of
/// the modeled disturbance set, floored at zero. Sample states must be
/// feasible; their worst-case successors then are too, by recursive
/// feasibility.
pub fn estimate_delta(
    ctl: &TubeController,
    samples: &[DVector<f64>],
    gamma: f64,
) -> Result<f64, StabilityError> {
    assert!((0.0..1.0).contains(&gamma));
    let vertices = ctl
        .derived
        .w_set
        .vertices_2d()
        .map_err(MpcError::Geometry)?;
    let mut delta: f64 = 0.0;
    for s in samples {
        let sol = match ctl.solve_value(s) {
            Ok(sol) => sol,
            Err(MpcError::Infeasible) => return Err(StabilityError::InfeasibleState),
            Err(e) => return Err(StabilityError::Mpc(e)),
        };
        let action = DVector::from_vec(vec![sol.action]);
        let nominal = ctl.problem.model.step(s, &action);
        for w in &vertices {
            let successor = DVector::from_vec(vec![nominal[0] + w[0], nominal[1] + w[1]]);
            let next_value = match ctl.solve_value(&successor) {
                Ok(next) => next.value,
                Err(MpcError::Infeasible) => return Err(StabilityError::InfeasibleState),
                Err(e) => return Err(StabilityError::Mpc(e)),
            };
            delta = delta.max(next_value - gamma * sol.value);
        }
    }
    Ok(delta.max(0.0))
}

/// Largest observed `|V̂_a(s) − V̂_b(s)| / ‖θ_a − θ_b‖` over states feasible
/// for both controllers. States infeasible for either are skipped (the
/// supremum is over the feasible-set intersection).
pub fn estimate_alpha_v(
    a: &TubeController,
    b: &TubeController,
    samples: &[DVector<f64>],
) -> Result<f64, StabilityError> {
    let dt = (a.params.to_theta() - b.params.to_theta()).norm();
    if dt == 0.0 {
        return Err(StabilityError::DegenerateSequence);
    }
    let mut best: Option<f64> = None;
    for s in samples {
        let va = match a.solve_value(s) {
            Ok(sol) => sol.value,
            Err(MpcError::Infeasible) => continue,
            Err(e) => return Err(StabilityError::Mpc(e)),
        };
        let vb = match b.solve_value(s) {
            Ok(sol) => sol.value,
            Err(MpcError::Infeasible) => continue,
            Err(e) => return Err(StabilityError::Mpc(e)),
        };
        let ratio = (va - vb).abs() / dt;
        best = Some(best.map_or(ratio, |v: f64| v.max(ratio)));
    }
    best.ok_or(StabilityError::InfeasibleState)
}

/// Contraction-rate estimation over a per-epoch parameter sequence.
/// Ratios are trusted only where the denominator exceeds a floor set by
/// the converged tail (twice the mean distance over the final quarter), so
/// noise around the limit does not masquerade as divergence.
pub fn estimate_rates(
    thetas: &[DVector<f64>],
    theta_star: &DVector<f64>,
    alpha_v_hat: f64,
) -> Result<RateEstimates, StabilityError> {
    if thetas.len() < 3 {
        return Err(StabilityError::DegenerateSequence);
    }
    let dist: Vec<f64> = thetas
        .iter()
        .map(|t| parameter_distance(t, theta_star))
        .collect();
    let tail = (dist.len() / 4).max(1);
    let tail_mean = dist[dist.len() - tail..].iter().sum::<f64>() / tail as f64;
    let floor = 2.0 * tail_mean;

    let mut r_hat: Option<f64> = None;
    for p in 0..dist.len() - 1 {
        if dist[p] > floor && dist[p] > 0.0 {
            let ratio = dist[p + 1] / dist[p];
            r_hat = Some(r_hat.map_or(ratio, |r: f64| r.max(ratio)));
        }
    }
    let r_hat = r_hat.ok_or(StabilityError::DegenerateSequence)?;

    let mut q_hat: f64 = 0.0;
    for p in 0..dist.len() - 1 {
        q_hat = q_hat.max(dist[p + 1] - r_hat * dist[p]);
    }

    Ok(RateEstimates {
        r_hat,
        q_hat,
        alpha_v_hat,
        zeta_min: zeta_min(alpha_v_hat, r_hat),
        floor,
    })
}

/// Outcome of a decrease scan over consecutive records.
#[derive(Debug, Clone, Serialize)]
pub struct DecreaseReport {
    /// Transitions examined (after skipping off-model steps).
    pub checked: usize,
    /// Indices i where the monitored quantity failed to decrease from
    /// record i to i+1 although record i was outside the level set.
    pub decrease_violations: Vec<usize>,
    /// Indices i where record i was inside the level set but record i+1
    /// escaped it.
    pub containment_violations: Vec<usize>,
    /// Transitions skipped because the arriving step left the modeled set.
    pub skipped: usize,
}

fn scan_decrease(
    records: &[LyapunovRecord],
    value: impl Fn(&LyapunovRecord) -> f64,
    same_scope: impl Fn(&LyapunovRecord, &LyapunovRecord) -> bool,
) -> DecreaseReport {
    let mut report = DecreaseReport {
        checked: 0,
        decrease_violations: Vec::new(),
        containment_violations: Vec::new(),
        skipped: 0,
    };
    for i in 0..records.len().saturating_sub(1) {
        let (cur, next) = (&records[i], &records[i + 1]);
        if !same_scope(cur, next) {
            continue;
        }
        if next.model_violation {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        if cur.in_level_set {
            if !next.in_level_set {
                report.containment_violations.push(i);
            }
        } else {
            let (v0, v1) = (value(cur), value(next));
            if v1 > v0 + 1e-9 * (1.0 + v0.abs()) {
                report.decrease_violations.push(i);
            }
        }
    }
    report
}

/// Joint-Lyapunov decrease scan: outside the level set W must fall from one
/// step to the next (across parameter updates included); inside it, the
/// next step must remain inside. Off-model transitions are skipped.
pub fn check_w_decrease(records: &[LyapunovRecord]) -> DecreaseReport {
    scan_decrease(records, |r| r.w_value, |_, _| true)
}

/// Value-function decrease scan restricted to transitions within one epoch
/// (fixed parameters): outside the level set V̂ must fall.
pub fn check_v_decrease_in_batches(records: &[LyapunovRecord]) -> DecreaseReport {
    scan_decrease(records, |r| r.v_hat, |a, b| a.epoch == b.epoch)
}

/// Monotone gain-function fit over a trace.
#[derive(Debug, Clone, Serialize)]
pub struct IssReport {
    /// Envelope knots (Δ, β(Δ)): the minimal nondecreasing β with β(0)=0
    /// covering every record's required slack.
    pub knots: Vec<(f64, f64)>,
    /// Minimum of β(Δ_i) − need_i over all records (≥ 0 by construction
    /// whenever the fit exists).
    pub margin: f64,
    /// Worst decrease surplus among zero-displacement records (positive
    /// means strict decrease with room to spare).
    pub zero_displacement_margin: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Fit the minimal monotone β with β(0) = 0 such that
/// `V̂_{i+1} − V̂_i ≤ −(1−γ)·V̂_i + δ̂_i + β(Δ_i)` on every admissible
/// transition. Records at zero parameter displacement admit no slack from
/// β; if one of them violates the plain decrease condition the fit fails.
pub fn check_iss(records: &[LyapunovRecord], gamma: f64) -> Result<IssReport, StabilityError> {
    assert!((0.0..1.0).contains(&gamma));
    let mut needs: Vec<(f64, f64)> = Vec::new(); // (Δ_i, required β)
    let mut skipped = 0usize;
    let mut zero_margin = f64::INFINITY;
    for i in 0..records.len().saturating_sub(1) {
        let (cur, next) = (&records[i], &records[i + 1]);
        if next.model_violation {
            skipped += 1;
            continue;
        }
        let need = next.v_hat - gamma * cur.v_hat - cur.delta_hat;
        let displacement = cur.delta_p;
        if displacement <= 0.0 {
            let tol = 1e-7 * (1.0 + cur.v_hat.abs());
            if need > tol {
                return Err(StabilityError::NoMonotoneFit(i));
            }
            zero_margin = zero_margin.min(-need);
        }
        needs.push((displacement, need));
    }
    if needs.is_empty() {
        return Ok(IssReport {
            knots: vec![(0.0, 0.0)],
            margin: 0.0,
            zero_displacement_margin: 0.0,
            checked: 0,
            skipped,
        });
    }

    // Minimal monotone majorant: sort by displacement, running maximum of
    // the positive part of the requirement.
    let mut sorted = needs.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut knots: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut running: f64 = 0.0;
    for &(d, need) in &sorted {
        running = running.max(need.max(0.0));
        match knots.last_mut() {
            Some(last) if last.0 == d => last.1 = running,
            _ => knots.push((d, running)),
        }
    }

    let beta_at = |d: f64| -> f64 {
        knots
            .iter()
            .take_while(|(kd, _)| *kd <= d)
            .last()
            .map(|&(_, v)| v)
            .unwrap_or(0.0)
    };
    let margin = needs
        .iter()
        .map(|&(d, need)| beta_at(d) - need)
        .fold(f64::INFINITY, f64::min);

    Ok(IssReport {
        knots,
        margin,
        zero_displacement_margin: if zero_margin.is_finite() {
            zero_margin
        } else {
            0.0
        },
        checked: needs.len(),
        skipped,
    })
}
