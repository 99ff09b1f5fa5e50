//! Closed-loop plant simulators.
//!
//! The plant truth is linear with state-additive noise drawn uniformly from
//! a bounded set. The scalar plant draws from an interval; the two-state
//! plant draws from a regular octagon, which is strictly inside the box the
//! learner starts from, so the learned disturbance set has something real
//! to shrink toward.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Polytope;
use crate::model::LinearModel;

/// Regular octagon with circumradius `radius`: facet normals at
/// 22.5 + 45 k degrees, facet offset `radius * cos(pi/8)`.
pub fn octagon_polytope(radius: f64) -> Polytope {
    let inradius = radius * (std::f64::consts::PI / 8.0).cos();
    let mut normals = DMatrix::zeros(8, 2);
    let mut offsets = DVector::zeros(8);
    for k in 0..8 {
        let angle = std::f64::consts::PI / 8.0 + (k as f64) * std::f64::consts::FRAC_PI_4;
        normals[(k, 0)] = angle.cos();
        normals[(k, 1)] = angle.sin();
        offsets[k] = inradius;
    }
    Polytope::new(normals, offsets).expect("octagon rows are consistent")
}

/// Vertices of the same octagon, at 45 k degrees.
pub fn octagon_vertices(radius: f64) -> Vec<Vector2<f64>> {
    (0..8)
        .map(|k| {
            let angle = (k as f64) * std::f64::consts::FRAC_PI_4;
            Vector2::new(radius * angle.cos(), radius * angle.sin())
        })
        .collect()
}

/// Area of the regular octagon with circumradius `radius`.
pub fn octagon_area(radius: f64) -> f64 {
    2.0 * std::f64::consts::SQRT_2 * radius * radius
}

enum TruthNoise {
    Interval { bound: f64 },
    Octagon { radius: f64, set: Polytope },
}

/// Simulated plant: linear dynamics plus uniform state-additive noise.
pub struct SimTruth {
    pub model: LinearModel,
    noise: TruthNoise,
    /// Upper bound on the noise probability density (uniform: 1 / volume).
    pub density_bound: f64,
    rng: ChaCha8Rng,
}

impl SimTruth {
    /// One-dimensional plant `s+ = 1.1 s + 0.1 a + w`, `w ~ U[-bound, bound]`.
    pub fn scalar(seed: u64, bound: f64) -> Self {
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, 1.1),
            DMatrix::from_element(1, 1, 0.1),
            DVector::zeros(1),
        )
        .expect("1x1 model is consistent");
        SimTruth {
            model,
            noise: TruthNoise::Interval { bound },
            density_bound: 1.0 / (2.0 * bound),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Two-state plant with the double-integrator-like dynamics used by the
    /// tube experiment; noise uniform on a regular octagon.
    pub fn tube(seed: u64, radius: f64) -> Self {
        let model = super::tube::tube_model();
        SimTruth {
            model,
            noise: TruthNoise::Octagon {
                radius,
                set: octagon_polytope(radius),
            },
            density_bound: 1.0 / octagon_area(radius),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.noise {
            TruthNoise::Interval { .. } => 1,
            TruthNoise::Octagon { .. } => 2,
        }
    }

    /// Draw one noise sample (rejection from the bounding box for the
    /// octagon — acceptance rate is the octagon/box area ratio, ~0.71).
    pub fn sample(&mut self) -> DVector<f64> {
        match &self.noise {
            TruthNoise::Interval { bound } => {
                DVector::from_element(1, self.rng.gen_range(-bound..=*bound))
            }
            TruthNoise::Octagon { radius, set } => loop {
                let candidate = DVector::from_vec(vec![
                    self.rng.gen_range(-radius..=*radius),
                    self.rng.gen_range(-radius..=*radius),
                ]);
                if set.contains(&candidate, 0.0) {
                    return candidate;
                }
            },
        }
    }

    /// Advance the plant one step; returns the next state and the noise
    /// realization that produced it.
    pub fn step(&mut self, state: &DVector<f64>, action: f64) -> (DVector<f64>, DVector<f64>) {
        let w = self.sample();
        let next = self.model.step(state, &DVector::from_element(1, action)) + &w;
        (next, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn octagon_vertices_saturate_the_facets() {
        let radius = 0.03;
        let set = octagon_polytope(radius);
        for v in octagon_vertices(radius) {
            let x = DVector::from_vec(vec![v.x, v.y]);
            assert!(set.contains(&x, 1e-12));
            // Each vertex lies exactly on two adjacent facets.
            let active = (0..8)
                .filter(|&i| {
                    (set.normals.row(i).transpose().dot(&x) - set.offsets[i]).abs() < 1e-12
                })
                .count();
            assert_eq!(active, 2);
        }
        // Shoelace area over the vertices matches the closed form.
        let vs = octagon_vertices(radius);
        let mut area = 0.0;
        for i in 0..vs.len() {
            let j = (i + 1) % vs.len();
            area += vs[i].x * vs[j].y - vs[j].x * vs[i].y;
        }
        assert!((area / 2.0 - octagon_area(radius)).abs() < 1e-15);
    }

    #[test]
    fn samples_stay_in_their_sets_and_are_seed_reproducible() {
        let mut truth = SimTruth::tube(11, 0.03);
        let set = octagon_polytope(0.03);
        for _ in 0..200 {
            let w = truth.sample();
            assert!(set.contains(&w, 1e-12));
        }
        let mut a = SimTruth::tube(42, 0.03);
        let mut b = SimTruth::tube(42, 0.03);
        for _ in 0..50 {
            assert_eq!(a.sample(), b.sample());
        }

        let mut s = SimTruth::scalar(3, 0.1);
        for _ in 0..200 {
            let w = s.sample();
            assert!(w[0].abs() <= 0.1);
        }
        assert!((s.density_bound - 5.0).abs() < 1e-15);
    }

    #[test]
    fn step_applies_the_dynamics_plus_the_returned_noise() {
        let mut truth = SimTruth::scalar(5, 0.1);
        let s = DVector::from_element(1, -8.0);
        let (next, w) = truth.step(&s, 2.0);
        assert!((next[0] - (1.1 * -8.0 + 0.1 * 2.0 + w[0])).abs() < 1e-14);
    }
}
