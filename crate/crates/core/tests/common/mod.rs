//! Shared oracles and generators for the acceptance suite.
//!
//! Everything here is independent of the code under test: optimality is
//! certified by exhaustive active-subset enumeration, invariance by vertex
//! propagation, and feasibility boundaries by direct long-horizon
//! iteration. Problem instances come from seeded generators that keep
//! feasibility and boundedness by construction, so an oracle returning
//! "no certificate" is itself a failure rather than a skip.

#![allow(dead_code)] // not every integration test uses every helper

use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use safempc::geometry::Polytope;
use safempc::solvers::{self, Dare};
use safempc::{QpProblem, QpSolution};

// ---------------------------------------------------------------------------
// Exhaustive convex-program optimality oracle
// ---------------------------------------------------------------------------

/// Global minimum of a convex QP (or LP, with a zero Hessian) by exhaustive
/// enumeration of candidate active subsets. For each subset the KKT system
/// is solved as a plain linear system; a candidate is accepted only when it
/// reproduces the system, satisfies every constraint, and has nonnegative
/// multipliers — i.e. when it is an exact KKT point, hence a global minimum
/// by convexity. Returns the best accepted `(value, minimiser)`.
///
/// Complete for instances where some optimum has a linearly independent
/// active set with strictly positive multipliers; the generators below
/// produce such instances with probability one.
pub fn oracle_convex_min(p: &QpProblem) -> Option<(f64, DVector<f64>)> {
    let n = p.gradient.len();
    let m = p.in_rhs.len();
    let p_eq = p.eq_rhs.len();
    assert!(m <= 20, "subset enumeration needs a small row count");

    let scale = 1.0
        + p.hessian.amax()
        + p.gradient.amax()
        + if m > 0 { p.in_matrix.amax() } else { 0.0 }
        + if p_eq > 0 { p.eq_matrix.amax() } else { 0.0 };

    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        let k = mask.count_ones() as usize;
        if k > n {
            continue;
        }
        let subset: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let dim = n + p_eq + k;
        let mut sys = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        sys.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        rhs.rows_mut(0, n).copy_from(&(-&p.gradient));
        if p_eq > 0 {
            sys.view_mut((0, n), (n, p_eq))
                .copy_from(&p.eq_matrix.transpose());
            sys.view_mut((n, 0), (p_eq, n)).copy_from(&p.eq_matrix);
            rhs.rows_mut(n, p_eq).copy_from(&p.eq_rhs);
        }
        for (j, &row) in subset.iter().enumerate() {
            let g_row = p.in_matrix.row(row);
            sys.view_mut((0, n + p_eq + j), (n, 1))
                .copy_from(&g_row.transpose());
            sys.view_mut((n + p_eq + j, 0), (1, n)).copy_from(&g_row);
            rhs[n + p_eq + j] = p.in_rhs[row];
        }

        let svd = sys.clone().svd(true, true);
        let Ok(sol) = svd.solve(&rhs, 1e-12 * scale) else {
            continue;
        };
        if (&sys * &sol - &rhs).amax() > 1e-8 * scale {
            continue; // inconsistent subset
        }
        let x = sol.rows(0, n).into_owned();
        let lambda = sol.rows(n + p_eq, k);
        if lambda.iter().any(|&l| l < -1e-8 * scale) {
            continue;
        }
        let mut feasible = true;
        for i in 0..m {
            let slack = p.in_rhs[i] - p.in_matrix.row(i).transpose().dot(&x);
            if slack < -1e-7 * (1.0 + p.in_rhs[i].abs()) {
                feasible = false;
                break;
            }
        }
        if feasible && p_eq > 0 {
            let eq_res = &p.eq_matrix * &x - &p.eq_rhs;
            if eq_res.amax() > 1e-7 * (1.0 + p.eq_rhs.amax()) {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let value = 0.5 * (&p.hessian * &x).dot(&x) + p.gradient.dot(&x);
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, x));
        }
    }
    best
}

/// Worst scaled KKT residual of a reported solution: stationarity, primal
/// feasibility (both constraint kinds), multiplier sign, and complementary
/// slackness, each normalised by the instance's data magnitude.
pub fn kkt_residual(p: &QpProblem, s: &QpSolution) -> f64 {
    let scale = 1.0
        + p.hessian.amax()
        + p.gradient.amax()
        + p.in_rhs.amax()
        + if p.in_rhs.is_empty() {
            0.0
        } else {
            p.in_matrix.amax()
        };
    let mut stationarity = &p.hessian * &s.primal + &p.gradient;
    if !p.eq_rhs.is_empty() {
        stationarity += p.eq_matrix.transpose() * &s.dual_eq;
    }
    if !p.in_rhs.is_empty() {
        stationarity += p.in_matrix.transpose() * &s.dual_in;
    }
    let mut worst: f64 = stationarity.amax();
    if !p.eq_rhs.is_empty() {
        worst = worst.max((&p.eq_matrix * &s.primal - &p.eq_rhs).amax());
    }
    for i in 0..p.in_rhs.len() {
        let slack = p.in_rhs[i] - p.in_matrix.row(i).transpose().dot(&s.primal);
        worst = worst.max(-slack); // primal violation
        worst = worst.max(-s.dual_in[i]); // multiplier sign
        worst = worst.max((s.dual_in[i] * slack).abs()); // complementarity
    }
    worst / scale
}

/// Residual of a Riccati fixed point: `‖P − (A'PA − A'PB (R+B'PB)⁻²·… + Q)‖`
/// evaluated directly from the data, scaled by `1 + ‖P‖`, together with a
/// gain-consistency check folded into the same number.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    d: &Dare,
) -> f64 {
    let pb = &d.p * b;
    let inner = r + b.transpose() * &pb;
    let rhs = b.transpose() * &d.p * a;
    let gain = inner
        .clone()
        .lu()
        .solve(&rhs)
        .expect("R + B'PB is positive definite");
    let fixed_point =
        a.transpose() * &d.p * a - a.transpose() * &pb * &gain + q;
    let res = (&d.p - fixed_point).amax();
    let gain_res = (&d.k - gain).amax();
    (res.max(gain_res)) / (1.0 + d.p.amax())
}

// ---------------------------------------------------------------------------
// Seeded instance generators
// ---------------------------------------------------------------------------

/// Strictly convex QP over a bounded nonempty region: box rows keep the
/// feasible set bounded, and every right-hand side leaves positive slack at
/// a generated interior point. One third of instances carry an equality
/// hyperplane through that point.
pub fn random_bounded_qp(rng: &mut ChaCha8Rng, n: usize) -> QpProblem {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let hessian = m.transpose() * &m + DMatrix::identity(n, n) * 0.3;
    let gradient = DVector::from_fn(n, |_| rng.gen_range(-2.0..2.0));
    let (in_matrix, in_rhs, x0) = random_bounded_rows(rng, n);
    let (eq_matrix, eq_rhs) = maybe_equality_row(rng, n, &x0);
    QpProblem {
        hessian,
        gradient,
        eq_matrix,
        eq_rhs,
        in_matrix,
        in_rhs,
    }
}

/// LP over the same bounded-region generator (zero Hessian).
pub fn random_bounded_lp(rng: &mut ChaCha8Rng, n: usize) -> QpProblem {
    let gradient = DVector::from_fn(n, |_| rng.gen_range(-2.0..2.0));
    let (in_matrix, in_rhs, x0) = random_bounded_rows(rng, n);
    let (eq_matrix, eq_rhs) = maybe_equality_row(rng, n, &x0);
    QpProblem {
        hessian: DMatrix::zeros(n, n),
        gradient,
        eq_matrix,
        eq_rhs,
        in_matrix,
        in_rhs,
    }
}

fn random_bounded_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let x0 = DVector::from_fn(n, |_| rng.gen_range(-0.5..0.5));
    let extra = rng.gen_range(0..=n);
    let rows = 2 * n + extra;
    let mut g = DMatrix::zeros(rows, n);
    let mut h = DVector::zeros(rows);
    for i in 0..n {
        g[(2 * i, i)] = 1.0;
        h[2 * i] = x0[i] + rng.gen_range(0.5..2.0);
        g[(2 * i + 1, i)] = -1.0;
        h[2 * i + 1] = -x0[i] + rng.gen_range(0.5..2.0);
    }
    for k in 0..extra {
        let dir = random_unit(rng, n);
        g.row_mut(2 * n + k).copy_from(&dir.transpose());
        h[2 * n + k] = dir.dot(&x0) + rng.gen_range(0.1..1.5);
    }
    (g, h, x0)
}

fn maybe_equality_row(
    rng: &mut ChaCha8Rng,
    n: usize,
    x0: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    if n >= 2 && rng.gen_bool(1.0 / 3.0) {
        let dir = random_unit(rng, n);
        let rhs = DVector::from_element(1, dir.dot(x0));
        let mut row = DMatrix::zeros(1, n);
        row.row_mut(0).copy_from(&dir.transpose());
        (row, rhs)
    } else {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_| rng.gen_range(-1.0..1.0));
        let norm = v.norm();
        if norm > 0.1 {
            return v / norm;
        }
    }
}

/// Contradictory half-spaces on the first coordinate: `x₁ ≤ −1 ∧ x₁ ≥ 1`.
pub fn infeasible_qp(n: usize) -> QpProblem {
    let mut g = DMatrix::zeros(2, n);
    g[(0, 0)] = 1.0;
    g[(1, 0)] = -1.0;
    QpProblem {
        hessian: DMatrix::identity(n, n),
        gradient: DVector::zeros(n),
        eq_matrix: DMatrix::zeros(0, n),
        eq_rhs: DVector::zeros(0),
        in_matrix: g,
        in_rhs: DVector::from_element(2, -1.0),
    }
}

/// `min −x₁` over the half-space `x₁ ≥ 0`: unbounded below.
pub fn unbounded_lp(n: usize) -> QpProblem {
    let mut g = DMatrix::zeros(1, n);
    g[(0, 0)] = -1.0;
    let mut gradient = DVector::zeros(n);
    gradient[0] = -1.0;
    QpProblem {
        hessian: DMatrix::zeros(n, n),
        gradient,
        eq_matrix: DMatrix::zeros(0, n),
        eq_rhs: DVector::zeros(0),
        in_matrix: g,
        in_rhs: DVector::zeros(1),
    }
}

/// Random 2×2 matrix rescaled to an exact target spectral radius.
pub fn random_stable_matrix(rng: &mut ChaCha8Rng, target_radius: f64) -> DMatrix<f64> {
    loop {
        let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let r = solvers::spectral_radius(&a);
        if r > 1e-3 {
            return a * (target_radius / r);
        }
    }
}

/// Random bounded polygon with the origin in its interior: `k ≥ 4` facet
/// normals spread around the circle (jitter below half the spacing keeps
/// every angular gap under π, so the normals positively span the plane and
/// the polygon is bounded), positive offsets keep the origin inside.
pub fn random_polygon(rng: &mut ChaCha8Rng, k: usize) -> Polytope {
    assert!(k >= 4);
    let spacing = std::f64::consts::TAU / k as f64;
    let mut normals = DMatrix::zeros(k, 2);
    let mut offsets = DVector::zeros(k);
    for i in 0..k {
        let angle = spacing * i as f64 + rng.gen_range(-0.25..0.25) * spacing;
        normals[(i, 0)] = angle.cos();
        normals[(i, 1)] = angle.sin();
        offsets[i] = rng.gen_range(0.4..1.5);
    }
    Polytope::new(normals, offsets).expect("rows and offsets agree")
}

/// Shrink a polygon radially by `factor` (scales every offset).
pub fn scaled_polygon(p: &Polytope, factor: f64) -> Polytope {
    Polytope::new(p.normals.clone(), &p.offsets * factor).expect("same shape")
}

// ---------------------------------------------------------------------------
// Vertex-propagation invariance certificates
// ---------------------------------------------------------------------------

/// Check `A v + w ∈ set` for every vertex `v` of `set` and every vertex `w`
/// of the disturbance polygon — an exact invariance certificate for convex
/// sets under affine maps, since extreme points of the image are images of
/// extreme points. Returns the worst membership excess (≤ 0 iff invariant).
pub fn invariance_excess(
    set: &Polytope,
    a: &DMatrix<f64>,
    disturbance_vertices: &[Vector2<f64>],
) -> f64 {
    let vertices = set.vertices_2d().expect("2-D set with vertices");
    assert!(!vertices.is_empty(), "invariance check needs a nonempty set");
    let mut worst = f64::NEG_INFINITY;
    for v in &vertices {
        let av = a * DVector::from_column_slice(&[v[0], v[1]]);
        for w in disturbance_vertices {
            let x = &av + DVector::from_column_slice(&[w[0], w[1]]);
            for i in 0..set.num_rows() {
                let excess = (set.normals.row(i).transpose().dot(&x) - set.offsets[i])
                    / (1.0 + set.offsets[i].abs());
                worst = worst.max(excess);
            }
        }
    }
    worst
}

/// Worst membership excess of `(p ⊖ w) ⊕ w` against `p`, certified on the
/// vertices of the reconstructed sum (≤ 0 iff the round trip stays inside).
pub fn erosion_dilation_excess(p: &Polytope, w: &Polytope) -> f64 {
    let eroded = p.pontryagin_diff(w).expect("difference exists");
    let sum = eroded.minkowski_sum(w).expect("sum exists");
    let vertices = sum.vertices_2d().expect("bounded 2-D sum");
    assert!(!vertices.is_empty(), "round trip needs a nonempty erosion");
    let mut worst = f64::NEG_INFINITY;
    for v in &vertices {
        let x = DVector::from_column_slice(&[v[0], v[1]]);
        for i in 0..p.num_rows() {
            let excess = (p.normals.row(i).transpose().dot(&x) - p.offsets[i])
                / (1.0 + p.offsets[i].abs());
            worst = worst.max(excess);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Scalar feasibility oracle
// ---------------------------------------------------------------------------

/// Plant and constraint data of the one-dimensional benchmark, duplicated
/// here so the oracle shares no code with the implementation under test.
#[derive(Debug, Clone, Copy)]
pub struct ScalarPlant {
    pub a: f64,
    pub b: f64,
    pub noise_bound: f64,
    pub state_max: f64,
    pub input_max: f64,
    pub gain_tightening: f64,
}

impl ScalarPlant {
    pub fn benchmark(noise_bound: f64) -> Self {
        ScalarPlant {
            a: 1.1,
            b: 0.1,
            noise_bound,
            state_max: 0.1,
            input_max: 10.0,
            gain_tightening: 0.5,
        }
    }
}

/// Worst-case admissibility of the saturated affine loop from `s`, by
/// direct iteration: apply the clamped input, take the disturbance that
/// pushes the state away from recovery, and fail on constraint violation,
/// an empty input interval, or divergence. Long horizons make the verdict
/// effectively exact away from the feasibility boundary.
pub fn scalar_feasible_bruteforce(p: &ScalarPlant, gain: f64, bias: f64, s0: f64) -> bool {
    let tol = 1e-12 * (1.0 + p.state_max.abs());
    let mut s = s0;
    if s > p.state_max + tol {
        return false;
    }
    for _ in 0..10_000 {
        let state_cap = (p.state_max - p.noise_bound - p.a * s) / p.b;
        let input_cap = p.input_max - p.gain_tightening * gain;
        let hi = state_cap.min(input_cap);
        let lo = -p.input_max;
        if hi < lo {
            return false;
        }
        let u = (bias - gain * s).clamp(lo, hi);
        let next = p.a * s + p.b * (u - p.noise_bound);
        if next > p.state_max + tol {
            return false;
        }
        if next.abs() > 1e4 {
            return false;
        }
        if (next - s).abs() <= 1e-14 * (1.0 + s.abs()) {
            return true;
        }
        s = next;
    }
    true
}

/// Lowest admissible state on a grid scan from below (step `step`), or
/// `None` when every probe up to `hi` fails.
pub fn scalar_roa_lower_bruteforce(
    p: &ScalarPlant,
    gain: f64,
    bias: f64,
    lo: f64,
    hi: f64,
    step: f64,
) -> Option<f64> {
    let mut s = lo;
    while s <= hi {
        if scalar_feasible_bruteforce(p, gain, bias, s) {
            return Some(s);
        }
        s += step;
    }
    None
}
