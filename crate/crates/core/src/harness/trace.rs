//! Run artifacts: JSON-lines traces that fully describe an experiment.
//!
//! A trace file holds one header line (the resolved config), one line per
//! closed-loop step, and one line per learning epoch. Reading a trace back
//! reproduces every quantity the reporting layer needs, so reports and
//! figures never re-run the experiment.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::HarnessError;
use crate::safety::UpdateDecision;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config: ExperimentConfig,
    /// Library version that produced the trace.
    pub version: String,
}

/// One closed-loop step. Optional fields are populated only when the
/// experiment records that telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub state: Vec<f64>,
    pub action: f64,
    /// Disturbance realized by the plant on this transition.
    pub noise: Vec<f64>,
    /// Hash of the parameters in force when the action was computed.
    pub theta_hash: u64,
    pub feasible: bool,
    pub v_hat: Option<f64>,
    pub in_level_set: Option<bool>,
    /// The arriving transition left the modeled disturbance set.
    pub model_violation: bool,
    /// All residuals observed so far lie in the current disturbance set.
    pub containment_ok: Option<bool>,
    pub decision: Option<UpdateDecision>,
}

/// One learning epoch: the parameters in force at its end plus batch stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub theta: Vec<f64>,
    pub grad_norm: Option<f64>,
    pub td_mean_abs: Option<f64>,
    pub td_mean_sq: Option<f64>,
    pub td_count: Option<usize>,
    /// Discounted closed-loop cost accumulated over the epoch.
    pub j_batch: f64,
    pub delta_hat: Option<f64>,
    /// Backtracking multiplier at the end of the epoch.
    pub alpha_multiplier: f64,
    /// A candidate was promoted during this epoch.
    pub promoted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunTrace {
    pub fn new(config: ExperimentConfig) -> Self {
        RunTrace {
            header: TraceHeader {
                config,
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            steps: Vec::new(),
            epochs: Vec::new(),
        }
    }

    /// Write header, then steps, then epochs — a fixed order, so identical
    /// runs produce byte-identical files.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        let mut emit = |line: &TraceLine| -> Result<(), HarnessError> {
            serde_json::to_writer(&mut out, line)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        emit(&TraceLine::Header(self.header.clone()))?;
        for s in &self.steps {
            emit(&TraceLine::Step(s.clone()))?;
        }
        for e in &self.epochs {
            emit(&TraceLine::Epoch(e.clone()))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, HarnessError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut header = None;
        let mut steps = Vec::new();
        let mut epochs = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<TraceLine>(&line)? {
                TraceLine::Header(h) => header = Some(h),
                TraceLine::Step(s) => steps.push(s),
                TraceLine::Epoch(e) => epochs.push(e),
            }
        }
        let header = header
            .ok_or_else(|| HarnessError::Trace("trace file has no header line".into()))?;
        Ok(RunTrace {
            header,
            steps,
            epochs,
        })
    }
}

/// FNV-1a over the parameter bytes: a cheap, stable fingerprint that lets a
/// trace show exactly when the parameters in force changed.
pub fn theta_hash(theta: &DVector<f64>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for value in theta.iter() {
        for byte in value.to_bits().to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}
