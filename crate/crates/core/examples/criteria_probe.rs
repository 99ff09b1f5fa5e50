//! Throwaway probe: runs the full tube experiment and prints the margins
//! behind the tube-property and ISS acceptance checks, plus timing data for
//! the reduced sweep configurations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use safempc::geometry::min_rpi;
use safempc::harness::{
    build_lyapunov_records, per_step_thetas, run_scalar_experiment, run_tube_experiment,
    tube_problem, ExperimentConfig,
};
use safempc::mpc::{TubeController, TubeMpcParameters};
use safempc::solvers::solve_qp;
use safempc::stability::{check_iss, check_v_decrease_in_batches, check_w_decrease};
use safempc::{QpProblem, QpStatus};

fn steady_nominal(controller: &TubeController) -> Option<DVector<f64>> {
    let problem = &controller.problem;
    let params = &controller.params;
    let a = &problem.model.a;
    let b = &problem.model.b;
    let mut hessian = DMatrix::zeros(3, 3);
    hessian
        .view_mut((0, 0), (2, 2))
        .copy_from(&(2.0 * &params.hx));
    hessian[(2, 2)] = 2.0 * params.hu;
    let mut gradient = DVector::zeros(3);
    gradient
        .rows_mut(0, 2)
        .copy_from(&(-2.0 * &params.hx * &params.x_ref));
    gradient[2] = -2.0 * params.hu * params.u_ref;
    let mut eq = DMatrix::zeros(2, 3);
    eq.view_mut((0, 0), (2, 2))
        .copy_from(&(DMatrix::identity(2, 2) - a));
    eq.view_mut((0, 2), (2, 1)).copy_from(&(-b));
    let rows = problem.cons_rhs.len();
    let mut in_matrix = DMatrix::zeros(rows, 3);
    in_matrix
        .view_mut((0, 0), (rows, 2))
        .copy_from(&problem.cons_x);
    in_matrix
        .view_mut((0, 2), (rows, 1))
        .copy_from(&problem.cons_u);
    let in_rhs = &problem.cons_rhs - &controller.derived.gamma_inf;
    let sol = solve_qp(&QpProblem {
        hessian,
        gradient,
        eq_matrix: eq,
        eq_rhs: problem.model.affine.clone(),
        in_matrix,
        in_rhs,
    })
    .ok()?;
    if sol.status != QpStatus::Optimal {
        return None;
    }
    Some(sol.primal.rows(0, 2).into_owned())
}

fn main() {
    let cfg = {
        let mut c = ExperimentConfig::tube_default();
        if let Ok(e) = std::env::var("PROBE_EPOCHS") {
            c.epochs = e.parse().unwrap();
        }
        c.seed = 42;
        c
    };
    let t0 = Instant::now();
    let trace = run_tube_experiment(&cfg).expect("tube run");
    println!("full tube run: {:.1}s", t0.elapsed().as_secs_f64());

    // 5a: containment
    let bad_containment = trace
        .steps
        .iter()
        .filter(|s| s.containment_ok != Some(true))
        .count();
    println!("5a containment violations: {bad_containment}");

    // 5b / 5c / 10
    let records = build_lyapunov_records(&trace).expect("records");
    let v = check_v_decrease_in_batches(&records);
    println!(
        "5b v-decrease: checked {} violations {:?} containment {:?} skipped {}",
        v.checked,
        v.decrease_violations.len(),
        v.containment_violations.len(),
        v.skipped
    );
    let w = check_w_decrease(&records);
    println!(
        "5c w-decrease: checked {} violations {} containment {} skipped {}",
        w.checked,
        w.decrease_violations.len(),
        w.containment_violations.len(),
        w.skipped
    );
    match check_iss(&records, cfg.gamma_lyap) {
        Ok(r) => println!(
            "10 iss: checked {} skipped {} margin {:.3e} zero-margin {:.3e} knots {}",
            r.checked,
            r.skipped,
            r.margin,
            r.zero_displacement_margin,
            r.knots.len()
        ),
        Err(e) => println!("10 iss FAILED: {e}"),
    }

    // 5d: TD contraction
    let td: Vec<f64> = trace
        .epochs
        .iter()
        .filter_map(|e| e.td_mean_abs)
        .collect();
    let q = td.len() / 4;
    let first: f64 = td[..q].iter().sum::<f64>() / q as f64;
    let last: f64 = td[td.len() - q..].iter().sum::<f64>() / q as f64;
    println!(
        "5d td first-quarter {:.4} last-quarter {:.4} ratio {:.4}",
        first,
        last,
        last / first
    );

    // 5e: last-quarter trajectory inside the current mRPI around the steady
    // nominal point.
    let thetas = per_step_thetas(&trace).expect("thetas");
    let start = trace.steps.len() - trace.steps.len() / 4;
    let mut cache: Option<(u64, TubeController, DVector<f64>, safempc::geometry::MinRpi)> = None;
    let mut max_excess = f64::NEG_INFINITY;
    let mut violations = 0usize;
    for (k, step) in trace.steps.iter().enumerate().skip(start) {
        let need_rebuild = cache.as_ref().map_or(true, |(h, ..)| *h != step.theta_hash);
        if need_rebuild {
            let params = TubeMpcParameters::from_theta(&thetas[k]);
            let ctl = TubeController::new(tube_problem(&cfg), params).expect("controller");
            let z = steady_nominal(&ctl).expect("steady state");
            let rpi = min_rpi(&ctl.derived.a_cl, &ctl.derived.w_set, cfg.mrpi_eps).expect("mrpi");
            cache = Some((step.theta_hash, ctl, z, rpi));
        }
        let (_, _, z, rpi) = cache.as_ref().unwrap();
        let e = DVector::from_vec(step.state.clone()) - z;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..rpi.set.num_rows() {
            let lhs = rpi.set.normals.row(i).transpose().dot(&e) - rpi.set.offsets[i];
            worst = worst.max(lhs);
        }
        max_excess = max_excess.max(worst);
        if worst > 1e-6 {
            violations += 1;
        }
    }
    println!(
        "5e mrpi containment: steps {} violations {} max-excess {:.3e}",
        trace.steps.len() - start,
        violations,
        max_excess
    );

    // Last-epoch parameters for reference.
    if let Some(e) = trace.epochs.last() {
        println!(
            "final epoch: grad_norm {:?} td_mean_abs {:?} j_batch {:.4} delta_hat {:?}",
            e.grad_norm, e.td_mean_abs, e.j_batch, e.delta_hat
        );
    }

    // Criterion-3 reduced tube sweep timing (3 seeds).
    let mut reduced = ExperimentConfig::tube_default();
    reduced.horizon = 15;
    reduced.epochs = 12;
    reduced.lyapunov_telemetry = false;
    let t1 = Instant::now();
    for seed in 0..3 {
        reduced.seed = seed;
        let tr = run_tube_experiment(&reduced).expect("reduced tube");
        assert!(!tr.steps.is_empty());
    }
    println!(
        "reduced tube seed: {:.2}s each",
        t1.elapsed().as_secs_f64() / 3.0
    );

    // Criterion-4 scalar run shape (1 seed).
    let mut scfg = ExperimentConfig::scalar_default();
    scfg.seed = 5;
    let t2 = Instant::now();
    let st = run_scalar_experiment(&scfg).expect("scalar run");
    let deferred = st
        .steps
        .iter()
        .filter(|s| {
            s.decision
                .as_ref()
                .is_some_and(|d| matches!(d.outcome, safempc::safety::UpdateOutcome::Deferred))
        })
        .count();
    println!(
        "scalar run: {:.2}s, {} deferrals total, epoch0 alpha multiplier {:.6}",
        t2.elapsed().as_secs_f64(),
        deferred,
        st.epochs[0].alpha_multiplier
    );
}
