//! CSV + gnuplot emission from a run trace.
//!
//! Every figure is a plain CSV with a header row, plus one `plots.gp`
//! script that renders them. Polygon files repeat the first vertex so the
//! outlines close. Values use Rust's shortest round-trip float formatting,
//! so identical traces produce identical files.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector2};

use super::config::ExperimentKind;
use super::report::build_lyapunov_records;
use super::trace::RunTrace;
use super::truth::octagon_vertices;
use super::tube::tube_problem;
use super::HarnessError;
use crate::geometry::{hull_2d, min_rpi, Polytope};
use crate::mpc::{TubeController, TubeMpcParameters};

fn write_csv(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<PathBuf, HarnessError> {
    let path = dir.join(name);
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 2);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(&path, text)?;
    Ok(path)
}

/// Closed polygon rows (`x,y`, first vertex repeated at the end).
fn polygon_rows(vertices: &[Vector2<f64>]) -> Vec<String> {
    let ordered = hull_2d(vertices);
    let mut rows: Vec<String> = ordered.iter().map(|v| format!("{},{}", v.x, v.y)).collect();
    if let Some(first) = rows.first().cloned() {
        rows.push(first);
    }
    rows
}

fn polytope_rows(set: &Polytope) -> Result<Vec<String>, HarnessError> {
    let vertices = set
        .vertices_2d()
        .map_err(|e| HarnessError::Trace(format!("vertex enumeration: {e}")))?;
    Ok(polygon_rows(&vertices))
}

/// Emit the figure set for a trace; returns the files written.
pub fn emit_figures(trace: &RunTrace, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    match trace.header.config.experiment {
        ExperimentKind::Scalar => scalar_figures(trace, dir),
        ExperimentKind::Tube => tube_figures(trace, dir),
    }
}

fn scalar_figures(trace: &RunTrace, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut files = Vec::new();
    files.push(write_csv(
        dir,
        "state.csv",
        "step,state,bound",
        &trace
            .steps
            .iter()
            .map(|s| format!("{},{},0.1", s.step, s.state[0]))
            .collect::<Vec<_>>(),
    )?);
    files.push(write_csv(
        dir,
        "control.csv",
        "step,action",
        &trace
            .steps
            .iter()
            .map(|s| format!("{},{}", s.step, s.action))
            .collect::<Vec<_>>(),
    )?);
    files.push(write_csv(
        dir,
        "theta.csv",
        "epoch,gain,bias,input_cap,promoted,alpha_multiplier,grad_norm",
        &trace
            .epochs
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{},{},{},{}",
                    e.epoch,
                    e.theta[0],
                    e.theta[1],
                    10.0 - 0.5 * e.theta[0],
                    u8::from(e.promoted),
                    e.alpha_multiplier,
                    e.grad_norm.unwrap_or(f64::NAN)
                )
            })
            .collect::<Vec<_>>(),
    )?);
    files.push(j_csv(trace, dir)?);
    files.push(gnuplot_stub(
        dir,
        &[
            ("state", "state.csv", "step", "state"),
            ("control", "control.csv", "step", "action"),
            ("objective", "j.csv", "epoch", "j_batch"),
        ],
    )?);
    Ok(files)
}

fn j_csv(trace: &RunTrace, dir: &Path) -> Result<PathBuf, HarnessError> {
    write_csv(
        dir,
        "j.csv",
        "epoch,j_batch",
        &trace
            .epochs
            .iter()
            .map(|e| format!("{},{}", e.epoch, e.j_batch))
            .collect::<Vec<_>>(),
    )
}

fn tube_figures(trace: &RunTrace, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let cfg = &trace.header.config;
    let mut files = Vec::new();

    files.push(write_csv(
        dir,
        "state_trajectory.csv",
        "step,x1,x2",
        &trace
            .steps
            .iter()
            .map(|s| format!("{},{},{}", s.step, s.state[0], s.state[1]))
            .collect::<Vec<_>>(),
    )?);

    let theta_header = {
        let mut h = String::from("epoch");
        for i in 0..trace.epochs.first().map_or(0, |e| e.theta.len()) {
            h.push_str(&format!(",theta{i}"));
        }
        h
    };
    files.push(write_csv(
        dir,
        "theta.csv",
        &theta_header,
        &trace
            .epochs
            .iter()
            .map(|e| {
                let mut row = e.epoch.to_string();
                for v in &e.theta {
                    row.push_str(&format!(",{v}"));
                }
                row
            })
            .collect::<Vec<_>>(),
    )?);

    files.push(write_csv(
        dir,
        "td.csv",
        "epoch,td_mean_abs,td_mean_sq,td_count",
        &trace
            .epochs
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{}",
                    e.epoch,
                    e.td_mean_abs.unwrap_or(f64::NAN),
                    e.td_mean_sq.unwrap_or(f64::NAN),
                    e.td_count.unwrap_or(0)
                )
            })
            .collect::<Vec<_>>(),
    )?);
    files.push(j_csv(trace, dir)?);

    // Noise evidence: the hull of all recorded disturbances.
    let noise_points: Vec<Vector2<f64>> = trace
        .steps
        .iter()
        .map(|s| Vector2::new(s.noise[0], s.noise[1]))
        .collect();
    if !noise_points.is_empty() {
        files.push(write_csv(dir, "noise_hull.csv", "x,y", &polygon_rows(&noise_points))?);
    }
    files.push(write_csv(
        dir,
        "octagon.csv",
        "x,y",
        &polygon_rows(&octagon_vertices(cfg.octagon_radius)),
    )?);

    // Learned geometry at the final parameters.
    if let Some(last) = trace.epochs.last() {
        let theta = DVector::from_vec(last.theta.clone());
        let params = TubeMpcParameters::from_theta(&theta);
        if let Ok(ctl) = TubeController::new(tube_problem(cfg), params) {
            files.push(write_csv(
                dir,
                "w_learned.csv",
                "x,y",
                &polytope_rows(&ctl.derived.w_set)?,
            )?);
            files.push(write_csv(
                dir,
                "terminal.csv",
                "x,y",
                &polytope_rows(&ctl.derived.terminal)?,
            )?);
            let mrpi = min_rpi(&ctl.derived.a_cl, &ctl.derived.w_set, cfg.mrpi_eps)
                .map_err(|e| HarnessError::Trace(format!("invariant set: {e}")))?;
            files.push(write_csv(dir, "mrpi.csv", "x,y", &polytope_rows(&mrpi.set)?)?);
        }
    }

    // Joint-function telemetry, when the trace recorded values.
    if trace.steps.iter().all(|s| s.v_hat.is_some()) && !trace.steps.is_empty() {
        let records = build_lyapunov_records(trace)?;
        files.push(write_csv(
            dir,
            "vw.csv",
            "step,v_hat,delta_p,w_value,in_level_set",
            &records
                .iter()
                .map(|r| {
                    format!(
                        "{},{},{},{},{}",
                        r.step,
                        r.v_hat,
                        r.delta_p,
                        r.w_value,
                        u8::from(r.in_level_set)
                    )
                })
                .collect::<Vec<_>>(),
        )?);
    }

    files.push(gnuplot_stub(
        dir,
        &[
            ("trajectory", "state_trajectory.csv", "x1", "x2"),
            ("objective", "j.csv", "epoch", "j_batch"),
            ("td", "td.csv", "epoch", "td_mean_abs"),
        ],
    )?);
    Ok(files)
}

fn gnuplot_stub(dir: &Path, plots: &[(&str, &str, &str, &str)]) -> Result<PathBuf, HarnessError> {
    let mut script = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset grid\n",
    );
    for (name, file, x, y) in plots {
        script.push_str(&format!(
            "set terminal pngcairo size 900,600\nset output '{name}.png'\nset xlabel '{x}'\nset ylabel '{y}'\nplot '{file}' using 1:2 with lines\n",
        ));
    }
    let path = dir.join("plots.gp");
    fs::write(&path, script)?;
    Ok(path)
}
