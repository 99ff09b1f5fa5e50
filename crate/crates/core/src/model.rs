//! Process models and logged closed-loop data.
//!
//! The controllers in this crate assume an affine model `x+ = a x + b u + f`
//! with an additive disturbance confined to a bounded polytope. The model is
//! what the controller *believes*; the simulation truth in [`crate::harness`]
//! may differ, and the difference shows up as residuals on logged
//! transitions.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::Polytope;
use crate::tol;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Affine process model `x+ = a x + b u + affine`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub affine: DVector<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, affine: DVector<f64>) -> Result<Self, ModelError> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || affine.len() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "a {}x{}, b {}x{}, affine {}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                affine.len()
            )));
        }
        Ok(LinearModel { a, b, affine })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Nominal successor `a x + b u + affine`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.affine
    }

    /// Disturbance this model assigns to a logged transition:
    /// `next - (a state + b action + affine)`.
    pub fn residual(&self, record: &TransitionRecord) -> DVector<f64> {
        &record.next_state - self.step(&record.state, &record.action)
    }
}

/// Bounded additive disturbance: the controller's belief `w ∈ set`.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub set: Polytope,
}

impl NoiseModel {
    pub fn new(set: Polytope) -> Self {
        NoiseModel { set }
    }

    /// Whether a residual falls outside the believed set (beyond tolerance).
    pub fn violates(&self, w: &DVector<f64>) -> bool {
        !self.set.contains(w, tol::SET_INCLUSION)
    }
}

/// One logged closed-loop transition.
#[derive(Debug, Clone)]
pub struct TransitionRecord {
    pub state: DVector<f64>,
    pub action: DVector<f64>,
    pub next_state: DVector<f64>,
}

impl TransitionRecord {
    pub fn new(state: DVector<f64>, action: DVector<f64>, next_state: DVector<f64>) -> Self {
        TransitionRecord {
            state,
            action,
            next_state,
        }
    }
}

/// A batch of transitions collected between parameter updates.
#[derive(Debug, Clone, Default)]
pub struct DataSet {
    pub records: Vec<TransitionRecord>,
}

impl DataSet {
    pub fn new() -> Self {
        DataSet {
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: TransitionRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TransitionRecord> {
        self.records.iter()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn residual_recovers_injected_disturbance() {
        let model = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.05, 0.1]),
            DVector::zeros(2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let u = DVector::from_vec(vec![0.7]);
        let w = DVector::from_vec(vec![0.01, -0.02]);
        let next = model.step(&x, &u) + &w;
        let rec = TransitionRecord::new(x, u, next);
        let r = model.residual(&rec);
        assert_abs_diff_eq!(r[0], 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], -0.02, epsilon = 1e-12);
    }

    #[test]
    fn noise_model_flags_outliers() {
        let w_set = Polytope::box_nd(
            &DVector::zeros(2),
            &DVector::from_vec(vec![0.05, 0.05]),
        );
        let noise = NoiseModel::new(w_set);
        assert!(!noise.violates(&DVector::from_vec(vec![0.04, -0.05])));
        assert!(noise.violates(&DVector::from_vec(vec![0.06, 0.0])));
    }
}
