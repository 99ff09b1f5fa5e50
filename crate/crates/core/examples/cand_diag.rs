//! Throwaway diagnostic: assemble the first epoch's candidate by hand and
//! report which validity check rejects it, at several step scales.

use nalgebra::DVector;
use safempc::harness::{
    tube_initial_parameters, tube_problem, tube_true_cost, ExperimentConfig, SimTruth, TUBE_STATE0,
};
use safempc::learning::{
    constrained_step, q_batch_update_direction, reference_feasibility_rows,
    tube_theta_constraints, UpdateStepConfig,
};
use safempc::model::{DataSet, TransitionRecord};
use safempc::mpc::{EnvelopeDifferentiator, TubeController, TubeMpcParameters, THETA_DIM};

fn main() {
    let cfg = {
        let mut c = ExperimentConfig::tube_default();
        c.seed = 42;
        c
    };
    let problem = tube_problem(&cfg);
    let params = tube_initial_parameters();
    let theta0 = params.to_theta();
    let ctl = TubeController::new(problem.clone(), params.clone()).expect("initial controller");

    let mut truth = SimTruth::tube(cfg.seed, cfg.octagon_radius);
    let mut state = DVector::from_row_slice(&TUBE_STATE0);
    let mut data = DataSet::new();
    let mut batch = Vec::new();
    for _ in 0..cfg.steps_per_epoch {
        let action = ctl.action(&state).expect("feasible");
        let (next, _w) = truth.step(&state, action);
        let rec = TransitionRecord::new(state.clone(), DVector::from_element(1, action), next.clone());
        batch.push(rec.clone());
        data.push(rec);
        state = next;
    }
    let last_next = batch.last().unwrap().next_state.clone();
    if !ctl.is_feasible(&last_next).unwrap() {
        batch.pop();
    }

    let diff = EnvelopeDifferentiator::new(&problem, &params, &ctl.structure()).expect("diff");
    let (est, td) = q_batch_update_direction(&ctl, &diff, &batch, &|s, a| tube_true_cost(s, a), cfg.gamma)
        .expect("direction");
    println!("td mean abs {:.4}, grad norm {:.3}", td.mean_abs, est.grad.norm());
    println!("grad: {:?}", est.grad.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    let rows = tube_theta_constraints(&problem.model, &data).stacked(&reference_feasibility_rows(
        &problem,
        &ctl.derived.gamma_inf,
        &theta0,
    ));
    let update_cfg = UpdateStepConfig::identity_metric(THETA_DIM, cfg.alpha, cfg.rho, cfg.n_fail);

    for mult in [1.0, 0.9, 0.729, 0.5, 0.35, 0.2, 0.1] {
        let cand = constrained_step(
            &theta0,
            &est.grad,
            cfg.alpha * mult,
            &update_cfg.metric,
            &rows,
        )
        .expect("step qp");
        let delta = (&cand - &theta0).amax();
        let result = TubeController::new(problem.clone(), TubeMpcParameters::from_theta(&cand));
        match result {
            Ok(_) => println!("mult {mult:5.3}: valid    (max |dtheta| {delta:.3})"),
            Err(e) => {
                println!("mult {mult:5.3}: {e} (max |dtheta| {delta:.3})");
                if mult == 1.0 {
                    println!("  candidate m_set rows: {:?}", &cand.as_slice()[13..21]);
                    println!("  candidate hx: [{:.4}, {:.4}, {:.4}] hu {:.4}", cand[6], cand[7], cand[8], cand[9]);
                    println!("  candidate xr ({:.4}, {:.4}) ur {:.4}", cand[10], cand[11], cand[12]);
                }
            }
        }
    }
}
