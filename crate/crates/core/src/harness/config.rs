//! Experiment configuration and the key-value config file format.
//!
//! The file format is deliberately plain: one `key = value` pair per line,
//! `#` comments, blank lines ignored. Every numerical default is echoed
//! into the trace header so a run is fully described by its own artifact.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::safety::GateMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// One-dimensional constrained system with an exact grid gradient.
    Scalar,
    /// Two-state tube controller with batch temporal-difference learning.
    Tube,
}

/// Full description of one experiment run. Fields irrelevant to the chosen
/// experiment are carried but unused (and harmless).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub gate_mode: GateMode,
    pub seed: u64,
    /// Learning epochs; each epoch is one batch of `steps_per_epoch` steps.
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Planning horizon of the tube controller.
    pub horizon: usize,
    /// Base learning step scale.
    pub alpha: f64,
    /// Backtracking shrink factor.
    pub rho: f64,
    /// Deferrals tolerated before a shrink.
    pub n_fail: usize,
    /// Discount factor of the learning objective.
    pub gamma: f64,
    /// Contraction rate of the Lyapunov decrease condition (distinct from
    /// the discount factor; both default to 0.9).
    pub gamma_lyap: f64,
    /// Weight of the parameter-distance term in the joint Lyapunov function.
    pub zeta: f64,
    /// Circumradius of the true noise octagon (tube experiment). Not a
    /// published value; chosen so the tube problem stays feasible at the
    /// default horizon.
    pub octagon_radius: f64,
    /// Tube state box `|x_i| <= state_halfwidth`.
    pub state_halfwidth: f64,
    /// Tube input box `|u| <= input_halfwidth`.
    pub input_halfwidth: f64,
    /// Truncation tolerance of the disturbance-propagation series.
    pub mrpi_eps: f64,
    /// Scalar plant noise bound.
    pub noise_bound: f64,
    /// Include the literal (unprojected) boundary rows in the scalar
    /// update QP instead of relying on the action projection.
    pub literal_boundary_rows: bool,
    /// Record per-step value/level-set telemetry (tube experiment; costs
    /// extra solves per step).
    pub lyapunov_telemetry: bool,
    /// Feasible states sampled per epoch for the decrease-offset estimate.
    pub delta_samples: usize,
    /// Epochs averaged for the post-hoc reference parameters.
    pub theta_star_tail: usize,
    /// Per-update step cap on each stage-weight entry (tube experiment).
    /// The stage weights set the feedback gain and hence the tube
    /// tightening nonlinearly, so their updates are rate-limited to keep
    /// every proposed candidate inside the linearization's region of
    /// validity. Design default, not a published value.
    pub trust_weight: f64,
    /// Per-update step cap on each reference component (tube experiment).
    pub trust_reference: f64,
    /// Per-update step cap on each disturbance-set row entry (tube
    /// experiment).
    pub trust_noise: f64,
    /// Value-iteration grid for the scalar gradient.
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
    /// Noise quadrature nodes for the scalar gradient.
    pub quad_nodes: usize,
}

impl ExperimentConfig {
    pub fn scalar_default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Scalar,
            gate_mode: GateMode::Backtracking,
            seed: 0,
            epochs: 20,
            steps_per_epoch: 20,
            horizon: 1,
            alpha: 1.0,
            rho: 0.9,
            n_fail: 1,
            gamma: 0.9,
            gamma_lyap: 0.9,
            zeta: 0.1,
            octagon_radius: 0.03,
            state_halfwidth: 1.0,
            input_halfwidth: 10.0,
            mrpi_eps: 1e-4,
            noise_bound: 0.1,
            literal_boundary_rows: false,
            lyapunov_telemetry: false,
            delta_samples: 8,
            theta_star_tail: 100,
            trust_weight: 0.02,
            trust_reference: 0.02,
            trust_noise: 0.05,
            grid_lo: -12.0,
            grid_hi: 1.0,
            grid_step: 0.02,
            quad_nodes: 21,
        }
    }

    pub fn tube_default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Tube,
            gate_mode: GateMode::Backtracking,
            seed: 0,
            epochs: 240,
            steps_per_epoch: 20,
            horizon: 50,
            alpha: 0.1,
            rho: 0.9,
            n_fail: 1,
            gamma: 0.9,
            gamma_lyap: 0.9,
            zeta: 0.1,
            octagon_radius: 0.03,
            state_halfwidth: 1.0,
            input_halfwidth: 10.0,
            mrpi_eps: 1e-4,
            noise_bound: 0.1,
            literal_boundary_rows: false,
            lyapunov_telemetry: true,
            delta_samples: 8,
            theta_star_tail: 100,
            trust_weight: 0.02,
            trust_reference: 0.02,
            trust_noise: 0.05,
            grid_lo: -12.0,
            grid_hi: 1.0,
            grid_step: 0.02,
            quad_nodes: 21,
        }
    }

    pub fn default_for(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::Scalar => Self::scalar_default(),
            ExperimentKind::Tube => Self::tube_default(),
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        fn bad(key: &str, value: &str) -> HarnessError {
            HarnessError::Config(format!("invalid value '{value}' for key '{key}'"))
        }
        macro_rules! num {
            ($field:ident) => {
                self.$field = value.parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "experiment" => {
                self.experiment = match value {
                    "scalar" => ExperimentKind::Scalar,
                    "tube" => ExperimentKind::Tube,
                    _ => return Err(bad(key, value)),
                }
            }
            "gate" => {
                self.gate_mode = match value {
                    "backtracking" => GateMode::Backtracking,
                    "feasibility" | "feasibility-constrained" => {
                        GateMode::FeasibilityConstrained
                    }
                    _ => return Err(bad(key, value)),
                }
            }
            "seed" => num!(seed),
            "epochs" => num!(epochs),
            "steps_per_epoch" => num!(steps_per_epoch),
            "horizon" => num!(horizon),
            "alpha" => num!(alpha),
            "rho" => num!(rho),
            "n_fail" => num!(n_fail),
            "gamma" => num!(gamma),
            "gamma_lyap" => num!(gamma_lyap),
            "zeta" => num!(zeta),
            "octagon_radius" => num!(octagon_radius),
            "state_halfwidth" => num!(state_halfwidth),
            "input_halfwidth" => num!(input_halfwidth),
            "mrpi_eps" => num!(mrpi_eps),
            "noise_bound" => num!(noise_bound),
            "literal_boundary_rows" => num!(literal_boundary_rows),
            "lyapunov_telemetry" => num!(lyapunov_telemetry),
            "delta_samples" => num!(delta_samples),
            "theta_star_tail" => num!(theta_star_tail),
            "trust_weight" => num!(trust_weight),
            "trust_reference" => num!(trust_reference),
            "trust_noise" => num!(trust_noise),
            "grid_lo" => num!(grid_lo),
            "grid_hi" => num!(grid_hi),
            "grid_step" => num!(grid_step),
            "quad_nodes" => num!(quad_nodes),
            other => {
                return Err(HarnessError::Config(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }
}

/// Parse the key-value format. The `experiment` key (default `scalar`)
/// selects the default set; every other key overrides one field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let pairs: Vec<(String, String)> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("expected 'key = value', got '{line}'"))
            })?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect::<Result<_, HarnessError>>()?;

    let kind = match pairs.iter().find(|(k, _)| k == "experiment") {
        Some((_, v)) if v == "tube" => ExperimentKind::Tube,
        Some((_, v)) if v == "scalar" => ExperimentKind::Scalar,
        Some((_, v)) => {
            return Err(HarnessError::Config(format!(
                "invalid value '{v}' for key 'experiment'"
            )))
        }
        None => ExperimentKind::Scalar,
    };
    let mut cfg = ExperimentConfig::default_for(kind);
    for (k, v) in &pairs {
        cfg.apply(k, v)?;
    }
    Ok(cfg)
}
