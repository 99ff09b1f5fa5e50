//! Command-line runner for the tube-MPC learning experiments.
//!
//! `safempc run` simulates one experiment and writes a JSON-lines trace;
//! `safempc report` post-processes a trace into a stability report;
//! `safempc figures` emits CSV figure data and a gnuplot script.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use safempc::harness::{
    emit_figures, parse_config, run_scalar_experiment, run_tube_experiment, stability_report,
    ExperimentConfig, ExperimentKind, RunTrace,
};
use safempc::GateMode;

#[derive(Parser)]
#[command(name = "safempc", version, about = "Robust MPC with safely gated online learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one experiment and write its trace to `--out`.
    Run {
        /// Which experiment to simulate (overrides the config file default).
        #[arg(long, value_enum)]
        experiment: Option<ExperimentArg>,
        /// Update-gate mode.
        #[arg(long, value_enum)]
        gate: Option<GateArg>,
        /// RNG seed for the simulated plant (and telemetry sampling).
        #[arg(long)]
        seed: Option<u64>,
        /// Key-value config file; omitted keys take experiment defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for `trace.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Post-process a trace directory into `report.json`.
    Report {
        /// Directory containing `trace.jsonl` (or a path to the file itself).
        #[arg(long)]
        trace: PathBuf,
    },
    /// Emit CSV figure data and a gnuplot script next to the trace.
    Figures {
        /// Directory containing `trace.jsonl` (or a path to the file itself).
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExperimentArg {
    Scalar,
    Tube,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    /// Unconstrained candidate steps; rejected candidates shrink the step.
    Backtracking,
    /// Feasibility rows stacked into the parameter-update program.
    Feasibility,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            experiment,
            gate,
            seed,
            config,
            out,
        } => run(experiment, gate, seed, config.as_deref(), &out),
        Command::Report { trace } => report(&trace),
        Command::Figures { trace } => figures(&trace),
    }
}

fn run(
    experiment: Option<ExperimentArg>,
    gate: Option<GateArg>,
    seed: Option<u64>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let cfg = parse_config(&text)?;
            if let Some(exp) = experiment {
                if kind_of(exp) != cfg.experiment {
                    bail!(
                        "--experiment contradicts the config file; drop one of the two settings"
                    );
                }
            }
            cfg
        }
        None => match experiment.unwrap_or(ExperimentArg::Scalar) {
            ExperimentArg::Scalar => ExperimentConfig::scalar_default(),
            ExperimentArg::Tube => ExperimentConfig::tube_default(),
        },
    };
    if let Some(gate) = gate {
        cfg.gate_mode = match gate {
            GateArg::Backtracking => GateMode::Backtracking,
            GateArg::Feasibility => GateMode::FeasibilityConstrained,
        };
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }

    let trace = match cfg.experiment {
        ExperimentKind::Scalar => run_scalar_experiment(&cfg)?,
        ExperimentKind::Tube => run_tube_experiment(&cfg)?,
    };
    let path = out.join("trace.jsonl");
    trace.write_jsonl(&path)?;
    println!(
        "wrote {} ({} steps, {} epochs)",
        path.display(),
        trace.steps.len(),
        trace.epochs.len()
    );
    Ok(())
}

fn trace_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("trace.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn report(trace: &Path) -> Result<()> {
    let file = trace_file(trace);
    let run = RunTrace::read_jsonl(&file)?;
    let report = stability_report(&run)?;
    let json = serde_json::to_string_pretty(&report)?;
    let out = file.with_file_name("report.json");
    fs::write(&out, format!("{json}\n"))?;
    println!("{json}");
    println!("wrote {}", out.display());
    Ok(())
}

fn figures(trace: &Path) -> Result<()> {
    let file = trace_file(trace);
    let run = RunTrace::read_jsonl(&file)?;
    let dir = file
        .parent()
        .map(|p| p.join("figures"))
        .unwrap_or_else(|| PathBuf::from("figures"));
    let written = emit_figures(&run, &dir)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn kind_of(arg: ExperimentArg) -> ExperimentKind {
    match arg {
        ExperimentArg::Scalar => ExperimentKind::Scalar,
        ExperimentArg::Tube => ExperimentKind::Tube,
    }
}
