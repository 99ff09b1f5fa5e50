//! Gradient estimation and the constrained parameter-update step.
//!
//! Two gradient sources feed the update step. For the one-dimensional
//! experiment, the closed-loop cost is evaluated exactly (at desk scale) by
//! value iteration of the projected policy on a uniform state grid with a
//! noise quadrature, and differentiated by central finite differences in the
//! two parameters. For the tube controller, a batch temporal-difference
//! direction is assembled from the planner's value functions and their
//! envelope-theorem parameter sensitivities.
//!
//! The update itself ([`constrained_step`]) solves a small strictly convex
//! QP: move the parameters against the gradient, scaled by a metric, subject
//! to the linear safety constraints — disturbance-set membership of every
//! observed residual, steady-state consistency of the reference, and
//! closed-loop stability margins. Conditions that are not linear in the
//! parameters (cost definiteness, terminal-set nonemptiness, region-of-
//! attraction membership) are the caller's post-checks; on failure the
//! caller shrinks the step scale and retries, so the incumbent parameters
//! always remain a feasible fallback.

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::geometry::{self, GeometryError, Polytope};
use crate::model::{DataSet, LinearModel, TransitionRecord};
use crate::mpc::{
    scalar_policy, EnvelopeDifferentiator, MpcError, ScalarMpcParameters, ScalarProblem,
    TubeController, TubeProblem, THETA_DIM,
};
use crate::solvers::{self, QpProblem, QpStatus, SolverError};

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("update QP is infeasible: the incumbent no longer satisfies the assembled constraints")]
    UpdateInfeasible,
    #[error("candidate parameters failed a nonlinear post-check")]
    PostCheckFailed,
    #[error("step scale underflow (alpha = {0:.3e})")]
    AlphaUnderflow(f64),
    #[error("batch record {0} is infeasible for the current parameters")]
    InfeasiblePoint(usize),
    #[error("state grid too coarse: cost {coarse} vs {fine} at doubled resolution")]
    GridTooCoarse { coarse: f64, fine: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

/// How a gradient estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    /// Grid value iteration differentiated by finite differences.
    ExactGrid,
    /// Batch temporal-difference direction with envelope sensitivities.
    QBatch,
}

#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub grad: DVector<f64>,
    pub method: GradientMethod,
    pub sample_count: usize,
}

/// Step-size and metric configuration of the update rule.
#[derive(Debug, Clone)]
pub struct UpdateStepConfig {
    /// Step scale in (0, 1].
    pub alpha: f64,
    /// Positive-definite metric of the proximal term.
    pub metric: DMatrix<f64>,
    /// Backtracking shrink factor in (0, 1).
    pub rho: f64,
    /// Number of deferrals before the step scale shrinks.
    pub n_fail: usize,
}

impl UpdateStepConfig {
    pub fn identity_metric(dim: usize, alpha: f64, rho: f64, n_fail: usize) -> Self {
        UpdateStepConfig {
            alpha,
            metric: DMatrix::identity(dim, dim),
            rho,
            n_fail,
        }
    }
}

/// Linear constraints on the parameter vector used by the update QP.
#[derive(Debug, Clone)]
pub struct ThetaConstraintSet {
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub in_matrix: DMatrix<f64>,
    pub in_rhs: DVector<f64>,
}

impl ThetaConstraintSet {
    pub fn unconstrained(dim: usize) -> Self {
        ThetaConstraintSet {
            eq_matrix: DMatrix::zeros(0, dim),
            eq_rhs: DVector::zeros(0),
            in_matrix: DMatrix::zeros(0, dim),
            in_rhs: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.eq_matrix.ncols()
    }

    pub fn satisfied_by(&self, theta: &DVector<f64>, tol: f64) -> bool {
        let eq = &self.eq_matrix * theta - &self.eq_rhs;
        if eq.amax() > tol {
            return false;
        }
        let slack = &self.in_matrix * theta - &self.in_rhs;
        slack.iter().all(|&v| v <= tol)
    }

    /// Concatenate two constraint sets over the same parameter space.
    pub fn stacked(&self, other: &ThetaConstraintSet) -> ThetaConstraintSet {
        assert_eq!(self.dim(), other.dim(), "constraint dimension");
        let stack_m = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
            m.rows_mut(0, a.nrows()).copy_from(a);
            m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            m
        };
        let stack_v = |a: &DVector<f64>, b: &DVector<f64>| {
            let mut v = DVector::zeros(a.len() + b.len());
            v.rows_mut(0, a.len()).copy_from(a);
            v.rows_mut(a.len(), b.len()).copy_from(b);
            v
        };
        ThetaConstraintSet {
            eq_matrix: stack_m(&self.eq_matrix, &other.eq_matrix),
            eq_rhs: stack_v(&self.eq_rhs, &other.eq_rhs),
            in_matrix: stack_m(&self.in_matrix, &other.in_matrix),
            in_rhs: stack_v(&self.in_rhs, &other.in_rhs),
        }
    }
}

/// One proximal update: `min ½‖θ − θ_p‖²_H + α g'(θ − θ_p)` over the linear
/// constraint set. `alpha = 0` returns the incumbent exactly.
pub fn constrained_step(
    theta_p: &DVector<f64>,
    grad: &DVector<f64>,
    alpha: f64,
    metric: &DMatrix<f64>,
    constraints: &ThetaConstraintSet,
) -> Result<DVector<f64>, LearningError> {
    assert_eq!(theta_p.len(), grad.len(), "gradient dimension");
    assert_eq!(constraints.dim(), theta_p.len(), "constraint dimension");
    if alpha == 0.0 {
        return Ok(theta_p.clone());
    }
    let qp = QpProblem {
        hessian: metric.clone(),
        gradient: grad * alpha - metric * theta_p,
        eq_matrix: constraints.eq_matrix.clone(),
        eq_rhs: constraints.eq_rhs.clone(),
        in_matrix: constraints.in_matrix.clone(),
        in_rhs: constraints.in_rhs.clone(),
    };
    let sol = solvers::solve_qp(&qp)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.primal),
        QpStatus::Infeasible => Err(LearningError::UpdateInfeasible),
        QpStatus::Unbounded => Err(LearningError::Solver(SolverError::NotConverged)),
    }
}

/// [`constrained_step`] followed by a caller-supplied nonlinear post-check
/// on the candidate (definiteness, terminal set, stability margins, …).
pub fn constrained_step_checked(
    theta_p: &DVector<f64>,
    grad: &DVector<f64>,
    alpha: f64,
    metric: &DMatrix<f64>,
    constraints: &ThetaConstraintSet,
    post_check: &dyn Fn(&DVector<f64>) -> bool,
) -> Result<DVector<f64>, LearningError> {
    let candidate = constrained_step(theta_p, grad, alpha, metric, constraints)?;
    if post_check(&candidate) {
        Ok(candidate)
    } else {
        Err(LearningError::PostCheckFailed)
    }
}

// ---------------------------------------------------------------------------
// Constraint assembly
// ---------------------------------------------------------------------------

/// Stability-margin interval on the feedback gain of the one-dimensional
/// controller: `|a − b·gain| ≤ 1 − epsilon` as two inequality rows over
/// θ = (gain, bias).
pub fn scalar_gain_constraints(problem: &ScalarProblem, epsilon: f64) -> ThetaConstraintSet {
    let lo = (problem.a - 1.0 + epsilon) / problem.b;
    let hi = (problem.a + 1.0 - epsilon) / problem.b;
    ThetaConstraintSet {
        eq_matrix: DMatrix::zeros(0, 2),
        eq_rhs: DVector::zeros(0),
        in_matrix: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.0]),
        in_rhs: DVector::from_vec(vec![-lo, hi]),
    }
}

/// State-boundary rows of the one-dimensional update QP under the literal,
/// unprojected reading of the learning constraint: the raw affine action at
/// the boundary states `s_b ∈ {0, s̄}` must keep the worst-case successor at
/// or below the state bound, `(a − b·gain)·s_b + b·bias ≤ s̄ − w̄`. The
/// default update omits these rows: the deployed controller projects its
/// action onto the admissible interval, which satisfies the bound for any
/// parameters, making the rows tautologies. The literal rows are kept
/// available for comparison because they exclude part of the parameter
/// space the projected controller can safely use.
pub fn scalar_boundary_rows(problem: &ScalarProblem) -> ThetaConstraintSet {
    let boundary_states = [0.0, problem.state_max];
    let rhs_value = problem.state_max - problem.noise_bound;
    let mut in_matrix = DMatrix::zeros(2, 2);
    let mut in_rhs = DVector::zeros(2);
    for (r, &sb) in boundary_states.iter().enumerate() {
        in_matrix[(r, 0)] = -problem.b * sb;
        in_matrix[(r, 1)] = problem.b;
        in_rhs[r] = rhs_value - problem.a * sb;
    }
    ThetaConstraintSet {
        eq_matrix: DMatrix::zeros(0, 2),
        eq_rhs: DVector::zeros(0),
        in_matrix,
        in_rhs,
    }
}

/// Transition residuals `s' − (A s + B a + f)` of a data set, as points.
pub fn residuals(model: &LinearModel, data: &DataSet) -> Vec<Vector2<f64>> {
    data.records
        .iter()
        .map(|r| {
            let w = model.residual(r);
            Vector2::new(w[0], w[1])
        })
        .collect()
}

/// Constraints on the tube parameters: the reference must be a steady state
/// of the model, and the parametrized disturbance set must contain every
/// observed transition residual. Only the residuals' convex-hull vertices
/// are kept — containing the hull contains all points — so the row count
/// stays bounded as data accumulates.
pub fn tube_theta_constraints(model: &LinearModel, data: &DataSet) -> ThetaConstraintSet {
    let mut eq_matrix = DMatrix::zeros(2, THETA_DIM);
    let mut eq_rhs = DVector::zeros(2);
    for i in 0..2 {
        for j in 0..2 {
            let shift = if i == j { 1.0 } else { 0.0 };
            eq_matrix[(i, 10 + j)] = model.a[(i, j)] - shift;
        }
        eq_matrix[(i, 12)] = model.b[(i, 0)];
        eq_rhs[i] = -model.affine[i];
    }

    let hull = geometry::hull_2d(&residuals(model, data));
    let mut in_matrix = DMatrix::zeros(4 * hull.len(), THETA_DIM);
    let mut in_rhs = DVector::zeros(4 * hull.len());
    for (p, w) in hull.iter().enumerate() {
        for row in 0..4 {
            let r = 4 * p + row;
            in_matrix[(r, 13 + 2 * row)] = w[0];
            in_matrix[(r, 13 + 2 * row + 1)] = w[1];
            in_rhs[r] = 1.0;
        }
    }
    ThetaConstraintSet {
        eq_matrix,
        eq_rhs,
        in_matrix,
        in_rhs,
    }
}

/// Linearized reference-feasibility rows: the candidate reference must
/// satisfy the problem constraints under the incumbent's infinite-horizon
/// tightening, with a small inset. Keeps step proposals inside the
/// controller-validity region, so backtracking rarely has to reject a
/// candidate outright. The tightening moves with the disturbance-set
/// parameters, so each row's right-hand side is relaxed (if necessary) to
/// keep the incumbent reference itself feasible, and the controller's
/// nonlinear validity check still guards the residual gap.
pub fn reference_feasibility_rows(
    problem: &TubeProblem,
    gamma_inf: &DVector<f64>,
    theta_p: &DVector<f64>,
) -> ThetaConstraintSet {
    let rows = problem.cons_rhs.len();
    let mut in_matrix = DMatrix::zeros(rows, THETA_DIM);
    let mut in_rhs = DVector::zeros(rows);
    for i in 0..rows {
        in_matrix[(i, 10)] = problem.cons_x[(i, 0)];
        in_matrix[(i, 11)] = problem.cons_x[(i, 1)];
        in_matrix[(i, 12)] = problem.cons_u[i];
        let incumbent_value = problem.cons_x[(i, 0)] * theta_p[10]
            + problem.cons_x[(i, 1)] * theta_p[11]
            + problem.cons_u[i] * theta_p[12];
        let inset = 1e-6 * (1.0 + problem.cons_rhs[i].abs());
        in_rhs[i] = (problem.cons_rhs[i] - gamma_inf[i] - inset).max(incumbent_value);
    }
    ThetaConstraintSet {
        eq_matrix: DMatrix::zeros(0, THETA_DIM),
        eq_rhs: DVector::zeros(0),
        in_matrix,
        in_rhs,
    }
}

/// Linear sufficient conditions for valid stage weights: the input weight is
/// bounded away from zero, and the state weight is diagonally dominant with
/// the same margin (which forces positive definiteness of the symmetric
/// 2-by-2 block). Candidates satisfying these rows always pass the
/// controller's definiteness check.
pub fn stage_weight_validity_rows(margin: f64) -> ThetaConstraintSet {
    // theta layout: hx = (theta[6], theta[7]; theta[7], theta[8]), hu = theta[9].
    let mut in_matrix = DMatrix::zeros(5, THETA_DIM);
    let mut in_rhs = DVector::zeros(5);
    // -hu <= -margin
    in_matrix[(0, 9)] = -1.0;
    in_rhs[0] = -margin;
    // -hx11 ± hx12 <= -margin  and  -hx22 ± hx12 <= -margin
    for (r, (diag, sign)) in [(6, 1.0), (6, -1.0), (8, 1.0), (8, -1.0)]
        .into_iter()
        .enumerate()
    {
        in_matrix[(r + 1, diag)] = -1.0;
        in_matrix[(r + 1, 7)] = sign;
        in_rhs[r + 1] = -margin;
    }
    ThetaConstraintSet {
        eq_matrix: DMatrix::zeros(0, THETA_DIM),
        eq_rhs: DVector::zeros(0),
        in_matrix,
        in_rhs,
    }
}

/// Per-update trust region |θ_j − θ_p,j| ≤ r_j, expressed as paired linear
/// rows. Components with an infinite radius contribute no rows. The stage
/// weights and reference enter the controller synthesis nonlinearly (gain,
/// tightening, mRPI scaling), so the linearized constraint rows built around
/// the incumbent are only trustworthy nearby; rate-limiting those blocks
/// keeps every proposed candidate inside the region where the nonlinear
/// validity checks pass, instead of relying on rejection and step shrinking.
pub fn trust_region_rows(theta_p: &DVector<f64>, radii: &DVector<f64>) -> ThetaConstraintSet {
    let bounded: Vec<usize> = (0..THETA_DIM).filter(|&j| radii[j].is_finite()).collect();
    let mut in_matrix = DMatrix::zeros(2 * bounded.len(), THETA_DIM);
    let mut in_rhs = DVector::zeros(2 * bounded.len());
    for (r, &j) in bounded.iter().enumerate() {
        in_matrix[(2 * r, j)] = 1.0;
        in_rhs[2 * r] = theta_p[j] + radii[j];
        in_matrix[(2 * r + 1, j)] = -1.0;
        in_rhs[2 * r + 1] = -(theta_p[j] - radii[j]);
    }
    ThetaConstraintSet {
        eq_matrix: DMatrix::zeros(0, THETA_DIM),
        eq_rhs: DVector::zeros(0),
        in_matrix,
        in_rhs,
    }
}

/// Extreme next-state realizations used by the per-step update gate of the
/// one-dimensional experiment: nominal successor under the applied action,
/// displaced by the plant noise bound on both sides.
pub fn scalar_worst_case_states(
    problem: &ScalarProblem,
    params: &ScalarMpcParameters,
    s: f64,
) -> Option<(f64, f64)> {
    let u = scalar_policy(problem, params, s)?;
    let nominal = problem.a * s + problem.b * u;
    Some((nominal - problem.noise_bound, nominal + problem.noise_bound))
}

/// Vertices of the one-step reachable set `{A s + B a + w : w ∈ w_set}`.
pub fn one_step_dispersion(
    model: &LinearModel,
    w_set: &Polytope,
    s: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, GeometryError> {
    let nominal = model.step(s, a);
    Ok(w_set
        .vertices_2d()?
        .into_iter()
        .map(|v| {
            DVector::from_vec(vec![nominal[0] + v[0], nominal[1] + v[1]])
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Exact grid gradient for the one-dimensional experiment
// ---------------------------------------------------------------------------

/// Quadratic tracking stage cost `(s − target)² + weight·a²`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarCost {
    pub state_target: f64,
    pub action_weight: f64,
}

impl ScalarCost {
    pub fn eval(&self, s: f64, a: f64) -> f64 {
        let ds = s - self.state_target;
        ds * ds + self.action_weight * a * a
    }
}

/// Uniform state grid for value iteration.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn with_step(lo: f64, hi: f64, step: f64) -> Self {
        assert!(hi > lo && step > 0.0);
        let points = ((hi - lo) / step).round() as usize + 1;
        GridSpec { lo, hi, points }
    }

    /// Same span at doubled resolution.
    pub fn refined(&self) -> Self {
        GridSpec {
            lo: self.lo,
            hi: self.hi,
            points: 2 * self.points - 1,
        }
    }

    fn value(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64
    }

    /// Lower node index and fraction for linear interpolation, clamped to
    /// the grid ends.
    fn locate(&self, x: f64) -> (usize, f64) {
        let t = (x - self.lo) / (self.hi - self.lo) * (self.points - 1) as f64;
        if t <= 0.0 {
            return (0, 0.0);
        }
        if t >= (self.points - 1) as f64 {
            return (self.points - 2, 1.0);
        }
        let j = (t.floor() as usize).min(self.points - 2);
        (j, (t - j as f64).clamp(0.0, 1.0))
    }
}

/// Quadrature over the plant noise distribution.
#[derive(Debug, Clone)]
pub struct NoiseQuadrature {
    /// `(node, weight)` pairs; weights sum to one.
    pub nodes: Vec<(f64, f64)>,
}

impl NoiseQuadrature {
    /// Trapezoid rule for a uniform density on `[−bound, bound]`.
    pub fn trapezoid(bound: f64, n: usize) -> Self {
        assert!(n >= 2);
        let step = 2.0 * bound / (n - 1) as f64;
        let base = step / (2.0 * bound);
        let nodes = (0..n)
            .map(|k| {
                let w = -bound + step * k as f64;
                let weight = if k == 0 || k == n - 1 { base / 2.0 } else { base };
                (w, weight)
            })
            .collect();
        NoiseQuadrature { nodes }
    }
}

/// Discounted cost-to-go of the projected policy, by value iteration on the
/// grid: `V(s) = ℓ(s, u(s)) + γ E_w[V(a s + b u(s) + w)]` with the plant
/// noise entering the state additively and successors interpolated linearly
/// (clamped at the grid ends). States where the policy has no admissible
/// input fall back to full braking, keeping the recursion well defined on
/// grid padding that the closed loop never visits.
pub fn scalar_policy_value(
    problem: &ScalarProblem,
    params: &ScalarMpcParameters,
    cost: &ScalarCost,
    gamma: f64,
    grid: &GridSpec,
    quad: &NoiseQuadrature,
) -> Vec<f64> {
    assert!((0.0..1.0).contains(&gamma));
    let n = grid.points;
    let k = quad.nodes.len();
    let mut stage = vec![0.0f64; n];
    let mut trans: Vec<(usize, f64)> = Vec::with_capacity(n * k);
    for i in 0..n {
        let s = grid.value(i);
        let u = scalar_policy(problem, params, s).unwrap_or(-problem.input_max);
        stage[i] = cost.eval(s, u);
        let nominal = problem.a * s + problem.b * u;
        for &(w, _) in &quad.nodes {
            trans.push(grid.locate(nominal + w));
        }
    }

    let mut v = vec![0.0f64; n];
    let mut v_new = vec![0.0f64; n];
    for _ in 0..5000 {
        let mut change = 0.0f64;
        let mut scale = 1.0f64;
        for i in 0..n {
            let mut expect = 0.0;
            for (q, &(_, weight)) in quad.nodes.iter().enumerate() {
                let (j, frac) = trans[i * k + q];
                expect += weight * ((1.0 - frac) * v[j] + frac * v[j + 1]);
            }
            v_new[i] = stage[i] + gamma * expect;
            change = change.max((v_new[i] - v[i]).abs());
            scale = scale.max(v_new[i].abs());
        }
        std::mem::swap(&mut v, &mut v_new);
        if change <= 1e-12 * scale {
            break;
        }
    }
    v
}

/// Mean of the piecewise-linear grid interpolant over `[lo, hi]`, integrated
/// exactly segment by segment.
pub fn expected_over_interval(grid: &GridSpec, values: &[f64], lo: f64, hi: f64) -> f64 {
    assert!(hi >= lo);
    let at = |x: f64| -> f64 {
        let (j, frac) = grid.locate(x);
        (1.0 - frac) * values[j] + frac * values[j + 1]
    };
    if hi == lo {
        return at(lo);
    }
    let step = (grid.hi - grid.lo) / (grid.points - 1) as f64;
    let mut total = 0.0;
    let mut a = lo;
    while a < hi {
        let next_node = grid.lo + step * ((a - grid.lo) / step).floor() + step;
        let b = next_node.min(hi);
        total += (b - a) * 0.5 * (at(a) + at(b));
        a = b;
    }
    total / (hi - lo)
}

/// Closed-loop discounted cost from an initial-state interval (uniform
/// weight): value iteration followed by averaging.
pub fn scalar_expected_cost(
    problem: &ScalarProblem,
    params: &ScalarMpcParameters,
    cost: &ScalarCost,
    gamma: f64,
    grid: &GridSpec,
    quad: &NoiseQuadrature,
    init: (f64, f64),
) -> f64 {
    let v = scalar_policy_value(problem, params, cost, gamma, grid, quad);
    expected_over_interval(grid, &v, init.0, init.1)
}

/// Gradient of the closed-loop cost in the two controller parameters, by
/// central finite differences of the grid-evaluated cost (step 1e−4). The
/// grid is validated by a doubled-resolution check before differentiating.
pub fn exact_grad_scalar(
    problem: &ScalarProblem,
    params: &ScalarMpcParameters,
    cost: &ScalarCost,
    gamma: f64,
    grid: &GridSpec,
    quad: &NoiseQuadrature,
    init: (f64, f64),
) -> Result<GradientEstimate, LearningError> {
    let coarse = scalar_expected_cost(problem, params, cost, gamma, grid, quad, init);
    let fine = scalar_expected_cost(problem, params, cost, gamma, &grid.refined(), quad, init);
    if (fine - coarse).abs() > 1e-3 * (1.0 + coarse.abs()) {
        return Err(LearningError::GridTooCoarse { coarse, fine });
    }

    let h = 1e-4;
    let theta = params.to_theta();
    let mut grad = DVector::zeros(2);
    for j in 0..2 {
        let mut up = theta;
        up[j] += h;
        let mut down = theta;
        down[j] -= h;
        let jp = scalar_expected_cost(
            problem,
            &ScalarMpcParameters::from_theta(up),
            cost,
            gamma,
            grid,
            quad,
            init,
        );
        let jm = scalar_expected_cost(
            problem,
            &ScalarMpcParameters::from_theta(down),
            cost,
            gamma,
            grid,
            quad,
            init,
        );
        grad[j] = (jp - jm) / (2.0 * h);
    }
    Ok(GradientEstimate {
        grad,
        method: GradientMethod::ExactGrid,
        sample_count: grid.points,
    })
}

// ---------------------------------------------------------------------------
// Batch temporal-difference direction for the tube controller
// ---------------------------------------------------------------------------

/// Temporal-difference residual statistics of one batch.
#[derive(Debug, Clone, Copy)]
pub struct TdStats {
    pub mean_abs: f64,
    pub mean_sq: f64,
    pub count: usize,
}

/// Gradient of `½ Σ δ_i²` in the parameters, where
/// `δ_i = ℓ(s_i, a_i) + γ V̂(s_{i+1}) − Q̂(s_i, a_i)` and both value
/// functions are differentiated by the envelope theorem at their solved
/// optima. Every batch state must be feasible for the current parameters;
/// an infeasible record aborts with its index, since it violates the
/// collection contract (states are only visited under a controller that was
/// feasible there).
pub fn q_batch_update_direction(
    controller: &TubeController,
    sensitivity: &EnvelopeDifferentiator,
    batch: &[TransitionRecord],
    stage_cost: &dyn Fn(&DVector<f64>, &DVector<f64>) -> f64,
    gamma: f64,
) -> Result<(GradientEstimate, TdStats), LearningError> {
    let mut grad = DVector::zeros(THETA_DIM);
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (idx, rec) in batch.iter().enumerate() {
        let infeasible = |e: MpcError| match e {
            MpcError::Infeasible => LearningError::InfeasiblePoint(idx),
            other => LearningError::Mpc(other),
        };
        let q = controller
            .solve_action_value(&rec.state, rec.action[0])
            .map_err(infeasible)?;
        let v_next = controller.solve_value(&rec.next_state).map_err(infeasible)?;
        let delta = stage_cost(&rec.state, &rec.action) + gamma * v_next.value - q.value;
        let grad_q = sensitivity.gradient(&rec.state, &q);
        let grad_v = sensitivity.gradient(&rec.next_state, &v_next);
        grad += (grad_v * gamma - grad_q) * delta;
        abs_sum += delta.abs();
        sq_sum += delta * delta;
    }
    let count = batch.len();
    let stats = TdStats {
        mean_abs: if count > 0 { abs_sum / count as f64 } else { 0.0 },
        mean_sq: if count > 0 { sq_sum / count as f64 } else { 0.0 },
        count,
    };
    Ok((
        GradientEstimate {
            grad,
            method: GradientMethod::QBatch,
            sample_count: count,
        },
        stats,
    ))
}
