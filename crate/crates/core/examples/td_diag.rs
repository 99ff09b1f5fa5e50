//! Throwaway diagnostic: per-epoch learning telemetry of the tube run.

use safempc::harness::{run_tube_experiment, ExperimentConfig};

fn main() {
    let mut cfg = ExperimentConfig::tube_default();
    cfg.seed = 42;
    cfg.epochs = 60;
    cfg.lyapunov_telemetry = false;
    let trace = run_tube_experiment(&cfg).expect("tube run");
    println!("epoch promoted alpha td grad_norm l0 xr1 xr2 ur j_batch");
    for e in &trace.epochs {
        println!(
            "{:3} {} {:.3} {:8.4} {:9.3} {:8.3} {:7.3} {:7.3} {:7.3} {:8.2}",
            e.epoch,
            if e.promoted { 'P' } else { '.' },
            e.alpha_multiplier,
            e.td_mean_abs.unwrap_or(f64::NAN),
            e.grad_norm.unwrap_or(f64::NAN),
            e.theta[5],
            e.theta[10],
            e.theta[11],
            e.theta[12],
            e.j_batch,
        );
    }
    let mut infeasible_here = 0usize;
    let mut invalid = 0usize;
    for s in &trace.steps {
        if let Some(d) = &s.decision {
            if matches!(d.outcome, safempc::safety::UpdateOutcome::Deferred) {
                match d.reason {
                    safempc::safety::DecisionReason::NewInfeasibleHere => infeasible_here += 1,
                    safempc::safety::DecisionReason::PostCheckFailed => invalid += 1,
                    safempc::safety::DecisionReason::NewFeasibleHere => {}
                }
            }
        }
    }
    println!("deferred: infeasible-here {infeasible_here}, invalid-controller {invalid}");
}
