//! Post-run analysis: joint-function records, decrease/ISS scans, gate
//! statistics, and multi-seed constraint-violation sweeps.
//!
//! Everything here works from a stored trace; nothing re-runs the closed
//! loop except the explicit seed sweep.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, ExperimentKind};
use super::scalar::{run_scalar_experiment, SCALAR_THETA0};
use super::trace::{theta_hash, RunTrace, StepRecord};
use super::tube::{run_tube_experiment, tube_initial_parameters, tube_model, tube_problem};
use super::HarnessError;
use crate::model::LinearModel;
use crate::mpc::{TubeController, TubeMpcParameters};
use crate::safety::{empirical_nonblocking_check, NonblockingReport, UpdateDecision};
use crate::stability::{
    check_iss, check_v_decrease_in_batches, check_w_decrease, estimate_alpha_v, estimate_rates,
    theta_star_from_tail, w_value, DecreaseReport, IssReport, LyapunovRecord, RateEstimates,
};

fn initial_theta(cfg: &ExperimentConfig) -> DVector<f64> {
    match cfg.experiment {
        ExperimentKind::Scalar => DVector::from_row_slice(&SCALAR_THETA0),
        ExperimentKind::Tube => tube_initial_parameters().to_theta(),
    }
}

/// Parameters in force at each step, reconstructed from the epoch records
/// and the per-epoch promotion decisions, and verified against the stored
/// parameter hashes.
pub fn per_step_thetas(trace: &RunTrace) -> Result<Vec<DVector<f64>>, HarnessError> {
    let epoch_thetas: Vec<DVector<f64>> = trace
        .epochs
        .iter()
        .map(|e| DVector::from_vec(e.theta.clone()))
        .collect();
    let mut current = initial_theta(&trace.header.config);
    let mut out = Vec::with_capacity(trace.steps.len());
    for s in &trace.steps {
        if s.epoch >= epoch_thetas.len() {
            return Err(HarnessError::Trace(format!(
                "step {} references epoch {} beyond the {} recorded",
                s.step,
                s.epoch,
                epoch_thetas.len()
            )));
        }
        // Parameters change only when a candidate is applied, and each epoch
        // carries at most one candidate, so the promoted vector is exactly
        // the one recorded at that epoch's end.
        if s.decision.as_ref().is_some_and(|d| {
            matches!(d.outcome, crate::safety::UpdateOutcome::Applied)
        }) {
            current = epoch_thetas[s.epoch].clone();
        }
        if theta_hash(&current) != s.theta_hash {
            return Err(HarnessError::Trace(format!(
                "step {}: parameter hash mismatch against reconstruction",
                s.step
            )));
        }
        out.push(current.clone());
    }
    Ok(out)
}

/// Joint-function records for a value-telemetry trace. The per-step
/// parameter distance uses the tail-mean reference; level-set flags are the
/// ones recorded live, and each record carries its epoch's decrease offset.
pub fn build_lyapunov_records(trace: &RunTrace) -> Result<Vec<LyapunovRecord>, HarnessError> {
    let cfg = &trace.header.config;
    let epoch_thetas: Vec<DVector<f64>> = trace
        .epochs
        .iter()
        .map(|e| DVector::from_vec(e.theta.clone()))
        .collect();
    if epoch_thetas.is_empty() {
        return Err(HarnessError::Trace("trace has no epochs".into()));
    }
    let theta_star = theta_star_from_tail(&epoch_thetas, cfg.theta_star_tail);
    let thetas = per_step_thetas(trace)?;
    let mut records = Vec::with_capacity(trace.steps.len());
    for (s, theta) in trace.steps.iter().zip(&thetas) {
        let v_hat = s
            .v_hat
            .ok_or_else(|| HarnessError::Trace(format!("step {}: no value telemetry", s.step)))?;
        let in_level_set = s.in_level_set.ok_or_else(|| {
            HarnessError::Trace(format!("step {}: no level-set telemetry", s.step))
        })?;
        let delta_hat = trace.epochs[s.epoch].delta_hat.ok_or_else(|| {
            HarnessError::Trace(format!("epoch {}: no decrease-offset estimate", s.epoch))
        })?;
        let delta_p = (theta - &theta_star).norm();
        records.push(LyapunovRecord {
            step: s.step,
            epoch: s.epoch,
            v_hat,
            delta_p,
            delta_hat,
            w_value: w_value(v_hat, delta_p, cfg.zeta),
            in_level_set,
            model_violation: s.model_violation,
        });
    }
    Ok(records)
}

/// Reconstruct the state after the final recorded step (it is not itself a
/// step record) by replaying the last transition.
fn final_state(model: &LinearModel, last: &StepRecord) -> DVector<f64> {
    let s = DVector::from_vec(last.state.clone());
    let w = DVector::from_vec(last.noise.clone());
    model.step(&s, &DVector::from_element(1, last.action)) + w
}

/// Count states outside the hard constraints, skipping states whose
/// arriving transition was off-model (the guarantee is conditional on the
/// disturbance respecting the modeled set).
fn count_state_violations(trace: &RunTrace) -> usize {
    let cfg = &trace.header.config;
    let violated: Box<dyn Fn(&[f64]) -> bool> = match cfg.experiment {
        ExperimentKind::Scalar => {
            let bound = 0.1;
            let guard = 1e-9 * (1.0 + bound);
            Box::new(move |x: &[f64]| x[0] > bound + guard)
        }
        ExperimentKind::Tube => {
            let bound = cfg.state_halfwidth;
            let guard = 1e-9 * (1.0 + bound);
            Box::new(move |x: &[f64]| x.iter().any(|v| v.abs() > bound + guard))
        }
    };
    let mut count = 0usize;
    for (k, s) in trace.steps.iter().enumerate() {
        let arriving_off_model = k > 0 && trace.steps[k - 1].model_violation;
        if !arriving_off_model && violated(&s.state) {
            count += 1;
        }
    }
    if let Some(last) = trace.steps.last() {
        if !last.model_violation {
            let model = match cfg.experiment {
                ExperimentKind::Scalar => super::truth::SimTruth::scalar(0, cfg.noise_bound).model,
                ExperimentKind::Tube => tube_model(),
            };
            let terminal = final_state(&model, last);
            let terminal_vec: Vec<f64> = terminal.iter().copied().collect();
            if violated(&terminal_vec) {
                count += 1;
            }
        }
    }
    count
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovSection {
    pub rates: Option<RateEstimates>,
    pub rates_note: Option<String>,
    pub w_decrease: DecreaseReport,
    pub v_decrease: DecreaseReport,
    pub iss: Option<IssReport>,
    pub iss_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub epochs: usize,
    pub steps: usize,
    pub theta_star: Vec<f64>,
    pub nonblocking: NonblockingReport,
    pub model_violations: usize,
    pub containment_violations: usize,
    pub state_violations: usize,
    pub lyapunov: Option<LyapunovSection>,
}

/// Lipschitz-in-parameters estimate of the value function over consecutive
/// distinct parameter pairs, sampled at fixed seeds for determinism.
fn tube_alpha_v(trace: &RunTrace) -> Result<Option<f64>, HarnessError> {
    let cfg = &trace.header.config;
    let problem = tube_problem(cfg);
    let mut thetas: Vec<DVector<f64>> = vec![initial_theta(cfg)];
    for e in &trace.epochs {
        thetas.push(DVector::from_vec(e.theta.clone()));
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 1..thetas.len() {
        if thetas[i] != thetas[i - 1] {
            pairs.push((i - 1, i));
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    // Up to three pairs spread across the run.
    let chosen: Vec<(usize, usize)> = if pairs.len() <= 3 {
        pairs
    } else {
        vec![
            pairs[0],
            pairs[pairs.len() / 2],
            pairs[pairs.len() - 1],
        ]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let hw = cfg.state_halfwidth;
    let samples: Vec<DVector<f64>> = (0..16)
        .map(|_| DVector::from_vec(vec![rng.gen_range(-hw..=hw), rng.gen_range(-hw..=hw)]))
        .collect();
    let mut best: Option<f64> = None;
    for (i, j) in chosen {
        let a = TubeController::new(problem.clone(), TubeMpcParameters::from_theta(&thetas[i]));
        let b = TubeController::new(problem.clone(), TubeMpcParameters::from_theta(&thetas[j]));
        let (Ok(a), Ok(b)) = (a, b) else { continue };
        match estimate_alpha_v(&a, &b, &samples) {
            Ok(alpha) => best = Some(best.map_or(alpha, |x: f64| x.max(alpha))),
            Err(_) => continue,
        }
    }
    Ok(best)
}

pub fn stability_report(trace: &RunTrace) -> Result<StabilityReport, HarnessError> {
    let cfg = &trace.header.config;
    let decisions: Vec<UpdateDecision> = trace
        .steps
        .iter()
        .filter_map(|s| s.decision)
        .collect();
    let has_telemetry =
        !trace.steps.is_empty() && trace.steps.iter().all(|s| s.v_hat.is_some());

    let lyapunov = if has_telemetry && cfg.experiment == ExperimentKind::Tube {
        let records = build_lyapunov_records(trace)?;
        let epoch_thetas: Vec<DVector<f64>> = trace
            .epochs
            .iter()
            .map(|e| DVector::from_vec(e.theta.clone()))
            .collect();
        let theta_star = theta_star_from_tail(&epoch_thetas, cfg.theta_star_tail);
        let (rates, rates_note) = match tube_alpha_v(trace)? {
            None => (None, Some("no distinct parameter pairs to calibrate".into())),
            Some(alpha_v) => match estimate_rates(&epoch_thetas, &theta_star, alpha_v) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            },
        };
        let (iss, iss_error) = match check_iss(&records, cfg.gamma_lyap) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Some(LyapunovSection {
            rates,
            rates_note,
            w_decrease: check_w_decrease(&records),
            v_decrease: check_v_decrease_in_batches(&records),
            iss,
            iss_error,
        })
    } else {
        None
    };

    let epoch_thetas: Vec<DVector<f64>> = trace
        .epochs
        .iter()
        .map(|e| DVector::from_vec(e.theta.clone()))
        .collect();
    let theta_star = if epoch_thetas.is_empty() {
        Vec::new()
    } else {
        theta_star_from_tail(&epoch_thetas, cfg.theta_star_tail)
            .iter()
            .copied()
            .collect()
    };

    Ok(StabilityReport {
        epochs: trace.epochs.len(),
        steps: trace.steps.len(),
        theta_star,
        nonblocking: empirical_nonblocking_check(&decisions),
        model_violations: trace.steps.iter().filter(|s| s.model_violation).count(),
        containment_violations: trace
            .steps
            .iter()
            .filter(|s| s.containment_ok == Some(false))
            .count(),
        state_violations: count_state_violations(trace),
        lyapunov,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub seed: u64,
    pub steps: usize,
    pub state_violations: usize,
    pub model_violations: usize,
    pub containment_violations: usize,
}

/// Run the configured experiment across seeds in parallel and tally
/// constraint violations per seed.
pub fn run_seed_sweep(
    base: &ExperimentConfig,
    seeds: &[u64],
) -> Result<Vec<SweepSummary>, HarnessError> {
    let mut out: Vec<SweepSummary> = seeds
        .par_iter()
        .map(|&seed| -> Result<SweepSummary, HarnessError> {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let trace = match cfg.experiment {
                ExperimentKind::Scalar => run_scalar_experiment(&cfg)?,
                ExperimentKind::Tube => run_tube_experiment(&cfg)?,
            };
            Ok(SweepSummary {
                seed,
                steps: trace.steps.len(),
                state_violations: count_state_violations(&trace),
                model_violations: trace.steps.iter().filter(|s| s.model_violation).count(),
                containment_violations: trace
                    .steps
                    .iter()
                    .filter(|s| s.containment_ok == Some(false))
                    .count(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by_key(|s| s.seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_report_counts_decisions_and_skips_lyapunov() {
        let mut cfg = ExperimentConfig::scalar_default();
        cfg.epochs = 3;
        cfg.seed = 1;
        let trace = run_scalar_experiment(&cfg).unwrap();
        let report = stability_report(&trace).unwrap();
        assert_eq!(report.epochs, 3);
        assert_eq!(report.steps, 60);
        assert!(report.lyapunov.is_none());
        assert_eq!(report.state_violations, 0);
        assert!(report.nonblocking.total_decisions > 0);
        // Must serialize cleanly for the CLI.
        serde_json::to_string(&report).unwrap();
    }

    #[test]
    fn tube_records_reconstruct_parameters_exactly() {
        let mut cfg = ExperimentConfig::tube_default();
        cfg.epochs = 3;
        cfg.steps_per_epoch = 6;
        cfg.horizon = 12;
        cfg.delta_samples = 4;
        cfg.seed = 5;
        let trace = run_tube_experiment(&cfg).unwrap();
        let records = build_lyapunov_records(&trace).unwrap();
        assert_eq!(records.len(), trace.steps.len());
        assert!(records.iter().all(|r| r.v_hat.is_finite()));
        assert!(records.iter().all(|r| r.w_value >= r.v_hat));
        let report = stability_report(&trace).unwrap();
        let section = report.lyapunov.expect("telemetry present");
        assert_eq!(
            section.w_decrease.checked + section.w_decrease.skipped,
            trace.steps.len() - 1
        );
    }

    #[test]
    fn seed_sweep_is_parallel_and_sorted() {
        let mut cfg = ExperimentConfig::scalar_default();
        cfg.epochs = 2;
        let seeds: Vec<u64> = (0..8).collect();
        let summaries = run_seed_sweep(&cfg, &seeds).unwrap();
        assert_eq!(summaries.len(), 8);
        for (i, s) in summaries.iter().enumerate() {
            assert_eq!(s.seed, i as u64);
            assert_eq!(s.steps, 40);
            assert_eq!(s.state_violations, 0);
        }
    }
}
