//! Tube-based model predictive controller, fully derived from a parameter
//! vector.
//!
//! The controller plans a nominal trajectory `z_0 = s, z_{k+1} = A z_k +
//! B v_k + f` and leaves disturbance rejection to an ancillary feedback
//! `u = v - K e` acting on the deviation `e` between the real and nominal
//! state. The deviation grows as `e_{k+1} = (A - BK) e_k + w`, so stage
//! constraints on the real trajectory become constraints on the nominal one
//! tightened by the accumulated worst-case deviation (a sum of support
//! values of the disturbance set). The nominal terminal state must land in a
//! robust positively invariant subset of the constraints tightened by the
//! *infinite-horizon* deviation.
//!
//! Everything downstream of the parameters — the Riccati terminal weight and
//! feedback gain, the tightenings, the terminal set — is recomputed by
//! [`TubeController::new`]. For differentiation, [`EnvelopeDifferentiator`]
//! re-evaluates the solve's Lagrangian at perturbed parameters while keeping
//! the optimal primal/dual point and the combinatorial structure (terminal
//! row provenance, disturbance series order) frozen, which yields the exact
//! value-function gradient wherever the active set is stable.

use nalgebra::{DMatrix, DVector};

use crate::geometry::{self, GeometryError, Polytope, SupportCache};
use crate::model::LinearModel;
use crate::mpc::{MpcError, MpcSolution};
use crate::solvers::{self, QpProblem, QpStatus};
use crate::tol;

/// Length of the packed parameter vector.
pub const THETA_DIM: usize = 21;

/// Learnable parameters of the tube controller.
///
/// Packed layout (see [`TubeMpcParameters::to_theta`]): initial-cost
/// curvature `lam` (3, symmetric), slope `lin` (2), constant `l0` (1), state
/// stage weight `hx` (3, symmetric), input stage weight `hu` (1), state
/// reference `x_ref` (2), input reference `u_ref` (1), disturbance-set
/// matrix `m_set` (8, row-major), 21 entries in total.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeMpcParameters {
    /// Initial-cost curvature (2x2 symmetric); enters the value, not the QP.
    pub lam: DMatrix<f64>,
    /// Initial-cost slope.
    pub lin: DVector<f64>,
    /// Initial-cost constant.
    pub l0: f64,
    /// State stage weight (2x2 symmetric, positive definite).
    pub hx: DMatrix<f64>,
    /// Input stage weight (positive).
    pub hu: f64,
    /// State reference of the stage cost and terminal set.
    pub x_ref: DVector<f64>,
    /// Input reference of the stage cost.
    pub u_ref: f64,
    /// Disturbance-set shape: `W = {w : m_set w <= 1}` (4x2).
    pub m_set: DMatrix<f64>,
}

impl TubeMpcParameters {
    pub fn to_theta(&self) -> DVector<f64> {
        let mut t = DVector::zeros(THETA_DIM);
        t[0] = self.lam[(0, 0)];
        t[1] = self.lam[(0, 1)];
        t[2] = self.lam[(1, 1)];
        t[3] = self.lin[0];
        t[4] = self.lin[1];
        t[5] = self.l0;
        t[6] = self.hx[(0, 0)];
        t[7] = self.hx[(0, 1)];
        t[8] = self.hx[(1, 1)];
        t[9] = self.hu;
        t[10] = self.x_ref[0];
        t[11] = self.x_ref[1];
        t[12] = self.u_ref;
        for r in 0..4 {
            for c in 0..2 {
                t[13 + 2 * r + c] = self.m_set[(r, c)];
            }
        }
        t
    }

    pub fn from_theta(theta: &DVector<f64>) -> Self {
        assert_eq!(theta.len(), THETA_DIM, "parameter vector length");
        let lam = DMatrix::from_row_slice(2, 2, &[theta[0], theta[1], theta[1], theta[2]]);
        let hx = DMatrix::from_row_slice(2, 2, &[theta[6], theta[7], theta[7], theta[8]]);
        let mut m_set = DMatrix::zeros(4, 2);
        for r in 0..4 {
            for c in 0..2 {
                m_set[(r, c)] = theta[13 + 2 * r + c];
            }
        }
        TubeMpcParameters {
            lam,
            lin: DVector::from_vec(vec![theta[3], theta[4]]),
            l0: theta[5],
            hx,
            hu: theta[9],
            x_ref: DVector::from_vec(vec![theta[10], theta[11]]),
            u_ref: theta[12],
            m_set,
        }
    }
}

/// Fixed data of the tube control problem: the model, the stage constraint
/// rows `cons_x x + cons_u u <= cons_rhs`, the horizon, and the accuracy of
/// the infinite-horizon tightening bound.
#[derive(Debug, Clone)]
pub struct TubeProblem {
    pub model: LinearModel,
    pub cons_x: DMatrix<f64>,
    pub cons_u: DVector<f64>,
    pub cons_rhs: DVector<f64>,
    pub horizon: usize,
    pub mrpi_eps: f64,
}

impl TubeProblem {
    /// Box constraints `|x_i| <= state_halfwidth`, `|u| <= input_halfwidth`.
    pub fn with_boxes(
        model: LinearModel,
        state_halfwidth: f64,
        input_halfwidth: f64,
        horizon: usize,
        mrpi_eps: f64,
    ) -> Self {
        let cons_x = DMatrix::from_row_slice(
            6,
            2,
            &[
                1.0, 0.0, //
                -1.0, 0.0, //
                0.0, 1.0, //
                0.0, -1.0, //
                0.0, 0.0, //
                0.0, 0.0,
            ],
        );
        let cons_u = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
        let cons_rhs = DVector::from_vec(vec![
            state_halfwidth,
            state_halfwidth,
            state_halfwidth,
            state_halfwidth,
            input_halfwidth,
            input_halfwidth,
        ]);
        TubeProblem {
            model,
            cons_x,
            cons_u,
            cons_rhs,
            horizon,
            mrpi_eps,
        }
    }

    fn num_cons(&self) -> usize {
        self.cons_rhs.len()
    }
}

/// Everything derived from the parameters before a solve.
#[derive(Debug, Clone)]
pub struct DerivedIngredients {
    /// Terminal cost weight (Riccati fixed point of the stage weights).
    pub riccati_p: DMatrix<f64>,
    /// Ancillary feedback gain (1x2).
    pub gain: DMatrix<f64>,
    /// Deviation dynamics `a - b gain`.
    pub a_cl: DMatrix<f64>,
    /// Disturbance set `{w : m_set w <= 1}`.
    pub w_set: Polytope,
    /// Stage tightenings, row `k` = accumulated deviation support at step
    /// `k` along each constraint row (horizon x rows).
    pub tightenings: DMatrix<f64>,
    /// Infinite-horizon tightening upper bound per constraint row.
    pub gamma_inf: DVector<f64>,
    /// Terminal set in deviation-from-reference coordinates.
    pub terminal: Polytope,
    /// Provenance of each terminal row: (constraint row, preimage power).
    pub terminal_provenance: Vec<(usize, usize)>,
    /// Contraction factor of the disturbance series tail.
    pub mrpi_alpha: f64,
    /// Number of terms kept in the disturbance support series.
    pub mrpi_order: usize,
}

/// The combinatorial choices of a derivation, frozen so the same structure
/// can be re-evaluated at perturbed parameters.
#[derive(Debug, Clone)]
pub struct FrozenStructure {
    pub terminal_provenance: Vec<(usize, usize)>,
    pub mrpi_order: usize,
}

/// Intermediate derivation results shared by fresh and frozen assembly.
struct Parts {
    p: DMatrix<f64>,
    k: DMatrix<f64>,
    a_cl: DMatrix<f64>,
    w_set: Polytope,
    w_cache: SupportCache,
    d_rows: DMatrix<f64>,
    gammas: DMatrix<f64>,
    gamma_inf: DVector<f64>,
    y_offsets: DVector<f64>,
    alpha: f64,
    order: usize,
}

fn derive_parts(
    problem: &TubeProblem,
    params: &TubeMpcParameters,
    frozen_order: Option<usize>,
) -> Result<Parts, MpcError> {
    let n = problem.horizon;
    let rows = problem.num_cons();

    // Positive-definite stage weights with an explicit margin.
    let eig = nalgebra::SymmetricEigen::new(params.hx.clone());
    if eig.eigenvalues.iter().any(|&l| l <= tol::PD_MARGIN) || params.hu <= tol::PD_MARGIN {
        return Err(MpcError::IndefiniteCost);
    }

    let riccati = solvers::dare(
        &problem.model.a,
        &problem.model.b,
        &params.hx,
        &DMatrix::from_row_slice(1, 1, &[params.hu]),
    )?;
    let a_cl = &problem.model.a - &problem.model.b * &riccati.k;
    let rho = solvers::spectral_radius(&a_cl);
    if rho >= 1.0 - 1e-9 {
        return Err(MpcError::UnstableGain(rho));
    }

    let w_set = Polytope::new(params.m_set.clone(), DVector::from_element(4, 1.0))
        .map_err(MpcError::Geometry)?;
    // Vertex caching silently assumes boundedness; verify it first.
    for i in 0..2 {
        let mut e = DVector::zeros(2);
        for sign in [1.0, -1.0] {
            e[i] = sign;
            match w_set.support(&e) {
                Ok(_) => {}
                Err(GeometryError::Unbounded) => return Err(MpcError::BadDisturbanceSet),
                Err(e) => return Err(MpcError::Geometry(e)),
            }
        }
    }
    let w_cache = SupportCache::build(&w_set).map_err(|_| MpcError::BadDisturbanceSet)?;

    // Constraint rows acting on the deviation: row_i = cons_x_i - cons_u_i K.
    let d_rows = &problem.cons_x - &problem.cons_u * &riccati.k;

    let (alpha, order) = match frozen_order {
        None => geometry::mrpi_scaling(&a_cl, &w_set, problem.mrpi_eps)?,
        Some(order) => {
            // Re-evaluate the contraction factor at the frozen order.
            let mut alpha = 0.0f64;
            for i in 0..w_set.num_rows() {
                let mut d = w_set.normals.row(i).transpose();
                for _ in 0..order {
                    d = a_cl.transpose() * d;
                }
                alpha = alpha.max(w_cache.support(&d) / w_set.offsets[i]);
            }
            if alpha >= 1.0 - 1e-9 {
                return Err(MpcError::UnstableGain(alpha));
            }
            (alpha, order)
        }
    };

    // Accumulated deviation supports along each constraint row, for every
    // step of the horizon and for the truncated infinite-horizon series.
    let mut gammas = DMatrix::zeros(n, rows);
    let mut series = DVector::zeros(rows);
    let mut dirs: Vec<DVector<f64>> = (0..rows).map(|i| d_rows.row(i).transpose()).collect();
    let mut acc = vec![0.0f64; rows];
    for j in 0..n.max(order) {
        for i in 0..rows {
            if j + 1 < n || j < order {
                let s = w_cache.support(&dirs[i]);
                acc[i] += s;
                if j + 1 < n {
                    gammas[(j + 1, i)] = acc[i];
                }
                if j + 1 == order {
                    series[i] = acc[i];
                }
                dirs[i] = a_cl.transpose() * &dirs[i];
            }
        }
    }
    let gamma_inf = &series / (1.0 - alpha);

    let mut y_offsets = DVector::zeros(rows);
    for i in 0..rows {
        y_offsets[i] = problem.cons_rhs[i]
            - gamma_inf[i]
            - problem.cons_x.row(i).transpose().dot(&params.x_ref)
            - problem.cons_u[i] * params.u_ref;
    }

    Ok(Parts {
        p: riccati.p,
        k: riccati.k,
        a_cl,
        w_set,
        w_cache,
        d_rows,
        gammas,
        gamma_inf,
        y_offsets,
        alpha,
        order,
    })
}

/// Assembled QP data for a fixed parameter vector; the initial state enters
/// only through right-hand sides and constant cost terms.
struct Template {
    horizon: usize,
    dim: usize,
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
    eq_matrix: DMatrix<f64>,
    eq_rhs_base: DVector<f64>,
    in_matrix: DMatrix<f64>,
    in_rhs_base: DVector<f64>,
    constant_base: f64,
    // Pieces needed to finish the s-dependent parts.
    a: DMatrix<f64>,
    cons_x: DMatrix<f64>,
    hx: DMatrix<f64>,
    lam: DMatrix<f64>,
    lin: DVector<f64>,
    x_ref: DVector<f64>,
}

impl Template {
    fn build(
        problem: &TubeProblem,
        params: &TubeMpcParameters,
        parts: &Parts,
        terminal_normals: &DMatrix<f64>,
        terminal_offsets: &DVector<f64>,
    ) -> Template {
        let n = problem.horizon;
        let rows = problem.num_cons();
        let nx = 2;
        let dim = 2 * n + n;
        let v0 = 2 * n;
        let n_term = terminal_offsets.len();

        let mut hessian = DMatrix::zeros(dim, dim);
        let mut gradient = DVector::zeros(dim);
        for k in 1..=n {
            let block = if k == n { &parts.p } else { &params.hx };
            let z = 2 * (k - 1);
            for i in 0..nx {
                for j in 0..nx {
                    hessian[(z + i, z + j)] = 2.0 * block[(i, j)];
                }
            }
            let g = block * &params.x_ref * -2.0;
            gradient[z] = g[0];
            gradient[z + 1] = g[1];
        }
        for k in 0..n {
            hessian[(v0 + k, v0 + k)] = 2.0 * params.hu;
            gradient[v0 + k] = -2.0 * params.hu * params.u_ref;
        }

        let mut eq_matrix = DMatrix::zeros(2 * n, dim);
        let mut eq_rhs_base = DVector::zeros(2 * n);
        for k in 0..n {
            let r = 2 * k;
            let z_next = 2 * k;
            for i in 0..nx {
                eq_matrix[(r + i, z_next + i)] = 1.0;
                eq_matrix[(r + i, v0 + k)] = -problem.model.b[(i, 0)];
                eq_rhs_base[r + i] = problem.model.affine[i];
            }
            if k > 0 {
                let z_prev = 2 * (k - 1);
                for i in 0..nx {
                    for j in 0..nx {
                        eq_matrix[(r + i, z_prev + j)] = -problem.model.a[(i, j)];
                    }
                }
            }
        }

        let mut in_matrix = DMatrix::zeros(rows * n + n_term, dim);
        let mut in_rhs_base = DVector::zeros(rows * n + n_term);
        for k in 0..n {
            for i in 0..rows {
                let r = rows * k + i;
                in_matrix[(r, v0 + k)] = problem.cons_u[i];
                if k > 0 {
                    let z = 2 * (k - 1);
                    in_matrix[(r, z)] = problem.cons_x[(i, 0)];
                    in_matrix[(r, z + 1)] = problem.cons_x[(i, 1)];
                }
                in_rhs_base[r] = problem.cons_rhs[i] - parts.gammas[(k, i)];
            }
        }
        let z_last = 2 * (n - 1);
        for t in 0..n_term {
            let r = rows * n + t;
            in_matrix[(r, z_last)] = terminal_normals[(t, 0)];
            in_matrix[(r, z_last + 1)] = terminal_normals[(t, 1)];
            in_rhs_base[r] = terminal_offsets[t]
                + terminal_normals.row(t).transpose().dot(&params.x_ref);
        }

        let xr_hx_xr = (&params.hx * &params.x_ref).dot(&params.x_ref);
        let xr_p_xr = (&parts.p * &params.x_ref).dot(&params.x_ref);
        let constant_base = (n as f64 - 1.0) * xr_hx_xr
            + xr_p_xr
            + n as f64 * params.hu * params.u_ref * params.u_ref
            + params.l0;

        Template {
            horizon: n,
            dim,
            hessian,
            gradient,
            eq_matrix,
            eq_rhs_base,
            in_matrix,
            in_rhs_base,
            constant_base,
            a: problem.model.a.clone(),
            cons_x: problem.cons_x.clone(),
            hx: params.hx.clone(),
            lam: params.lam.clone(),
            lin: params.lin.clone(),
            x_ref: params.x_ref.clone(),
        }
    }

    fn rhs_for_state(&self, s: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut eq_rhs = self.eq_rhs_base.clone();
        let as_ = &self.a * s;
        eq_rhs[0] += as_[0];
        eq_rhs[1] += as_[1];
        let mut in_rhs = self.in_rhs_base.clone();
        let cs = &self.cons_x * s;
        for i in 0..self.cons_x.nrows() {
            in_rhs[i] -= cs[i];
        }
        (eq_rhs, in_rhs)
    }

    /// All cost terms outside the QP: the initial-cost quadratic and the
    /// reference constants, both depending on the parameters and `s`.
    fn constant(&self, s: &DVector<f64>) -> f64 {
        let ds = s - &self.x_ref;
        self.constant_base
            + (&self.hx * &ds).dot(&ds)
            + (&self.lam * s).dot(s)
            + self.lin.dot(s)
    }

    fn qp(&self, s: &DVector<f64>, action: Option<f64>) -> QpProblem {
        let (eq_rhs, in_rhs) = self.rhs_for_state(s);
        let (eq_matrix, eq_rhs) = match action {
            None => (self.eq_matrix.clone(), eq_rhs),
            Some(a) => {
                let mut m = DMatrix::zeros(self.eq_matrix.nrows() + 1, self.dim);
                m.rows_mut(0, self.eq_matrix.nrows())
                    .copy_from(&self.eq_matrix);
                m[(self.eq_matrix.nrows(), 2 * self.horizon)] = 1.0;
                let mut r = DVector::zeros(eq_rhs.len() + 1);
                r.rows_mut(0, eq_rhs.len()).copy_from(&eq_rhs);
                r[eq_rhs.len()] = a;
                (m, r)
            }
        };
        QpProblem {
            hessian: self.hessian.clone(),
            gradient: self.gradient.clone(),
            eq_matrix,
            eq_rhs,
            in_matrix: self.in_matrix.clone(),
            in_rhs,
        }
    }

    /// Lagrangian of the solve at a *fixed* primal/dual point, under this
    /// template's parameters. Equality terms are omitted: their data does
    /// not depend on the parameters, so they cancel in differences.
    fn lagrangian(&self, s: &DVector<f64>, primal: &DVector<f64>, dual_in: &DVector<f64>) -> f64 {
        debug_assert_eq!(dual_in.len(), self.in_matrix.nrows());
        let (_, in_rhs) = self.rhs_for_state(s);
        let qx = &self.hessian * primal;
        let mut value = self.constant(s) + 0.5 * qx.dot(primal) + self.gradient.dot(primal);
        let residual = &self.in_matrix * primal - in_rhs;
        value += dual_in.dot(&residual);
        value
    }
}

/// A derived, solve-ready tube controller for one parameter vector.
pub struct TubeController {
    pub problem: TubeProblem,
    pub params: TubeMpcParameters,
    pub derived: DerivedIngredients,
    template: Template,
}

impl TubeController {
    /// Derive all ingredients and assemble the solver data. Fails when the
    /// parameters do not yield a well-posed controller (indefinite weights,
    /// unstable gain, unbounded disturbance set, empty terminal set, a
    /// reference violating the tightened constraints, or a tail disturbance
    /// not contained at the horizon).
    pub fn new(problem: TubeProblem, params: TubeMpcParameters) -> Result<Self, MpcError> {
        let parts = derive_parts(&problem, &params, None)?;

        // Reference must satisfy the infinite-horizon tightened constraints.
        for i in 0..parts.y_offsets.len() {
            if parts.y_offsets[i] < -1e-12 * (1.0 + problem.cons_rhs[i].abs()) {
                return Err(MpcError::ReferenceInfeasible);
            }
        }

        // When the plan shifts by one step, the disturbance seen at the
        // terminal stage is the horizon-propagated a_cl^N w. It must stay in
        // the modelled set for the accumulated-deviation table to remain
        // valid, and the terminal set must absorb it.
        let a_pow = a_cl_power(&parts.a_cl, problem.horizon);
        for i in 0..parts.w_set.num_rows() {
            let d = a_pow.transpose() * parts.w_set.normals.row(i).transpose();
            if parts.w_cache.support(&d) > parts.w_set.offsets[i] + tol::SET_INCLUSION {
                return Err(MpcError::HorizonContainment);
            }
        }

        // Terminal set: maximal subset of the fully tightened constraints
        // (deviation coordinates) that is robustly invariant under the
        // nominal loop with the horizon-propagated disturbance.
        let y_set = Polytope::new(parts.d_rows.clone(), parts.y_offsets.clone())
            .map_err(MpcError::Geometry)?;
        let invariant = match geometry::max_rpi_mapped(&parts.a_cl, &y_set, &parts.w_set, &a_pow) {
            Ok(inv) => inv,
            Err(GeometryError::EmptySet) | Err(GeometryError::Degenerate) => {
                return Err(MpcError::TerminalSetEmpty)
            }
            Err(e) => return Err(MpcError::Geometry(e)),
        };

        let template = Template::build(
            &problem,
            &params,
            &parts,
            &invariant.set.normals,
            &invariant.set.offsets,
        );
        let derived = DerivedIngredients {
            riccati_p: parts.p,
            gain: parts.k,
            a_cl: parts.a_cl,
            w_set: parts.w_set,
            tightenings: parts.gammas,
            gamma_inf: parts.gamma_inf,
            terminal: invariant.set,
            terminal_provenance: invariant.provenance,
            mrpi_alpha: parts.alpha,
            mrpi_order: parts.order,
        };
        Ok(TubeController {
            problem,
            params,
            derived,
            template,
        })
    }

    pub fn structure(&self) -> FrozenStructure {
        FrozenStructure {
            terminal_provenance: self.derived.terminal_provenance.clone(),
            mrpi_order: self.derived.mrpi_order,
        }
    }

    fn run(&self, s: &DVector<f64>, action: Option<f64>) -> Result<MpcSolution, MpcError> {
        let qp = self.template.qp(s, action);
        let sol = solvers::solve_qp(&qp)?;
        match sol.status {
            QpStatus::Optimal => Ok(MpcSolution {
                value: sol.value + self.template.constant(s),
                action: sol.primal[2 * self.problem.horizon],
                solution: sol,
            }),
            QpStatus::Infeasible => Err(MpcError::Infeasible),
            QpStatus::Unbounded => Err(MpcError::Internal(
                "strictly convex program reported unbounded".into(),
            )),
        }
    }

    /// Optimal value and first input at `s`.
    pub fn solve_value(&self, s: &DVector<f64>) -> Result<MpcSolution, MpcError> {
        self.run(s, None)
    }

    /// Value with the first input pinned to `action`.
    pub fn solve_action_value(&self, s: &DVector<f64>, action: f64) -> Result<MpcSolution, MpcError> {
        self.run(s, Some(action))
    }

    /// The input the controller applies at `s`.
    pub fn action(&self, s: &DVector<f64>) -> Result<f64, MpcError> {
        Ok(self.solve_value(s)?.action)
    }

    /// Whether the planning problem has any admissible trajectory from `s`
    /// (phase-1 only; no cost minimisation).
    pub fn is_feasible(&self, s: &DVector<f64>) -> Result<bool, MpcError> {
        let (eq_rhs, in_rhs) = self.template.rhs_for_state(s);
        let point = solvers::feasible_point(
            &self.template.eq_matrix,
            &eq_rhs,
            &self.template.in_matrix,
            &in_rhs,
        )?;
        Ok(point.is_some())
    }
}

fn a_cl_power(a_cl: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut a_pow = DMatrix::identity(a_cl.nrows(), a_cl.ncols());
    for _ in 0..n {
        a_pow = &a_pow * a_cl;
    }
    a_pow
}

/// Builds a frozen-structure template at given parameters: same terminal row
/// provenance and series order, freshly evaluated data.
fn frozen_template(
    problem: &TubeProblem,
    params: &TubeMpcParameters,
    structure: &FrozenStructure,
) -> Result<Template, MpcError> {
    let parts = derive_parts(problem, params, Some(structure.mrpi_order))?;
    let n_term = structure.terminal_provenance.len();
    let mut normals = DMatrix::zeros(n_term, 2);
    let mut offsets = DVector::zeros(n_term);

    // Walk each source row's preimage chain once, emitting rows at the
    // recorded powers. Offsets accumulate supports of the terminal-stage
    // disturbance a_cl^horizon w, i.e. supports of w along the chain shifted
    // by the horizon power.
    let max_power = structure
        .terminal_provenance
        .iter()
        .map(|&(_, t)| t)
        .max()
        .unwrap_or(0);
    let rows = problem.num_cons();
    let a_pow = a_cl_power(&parts.a_cl, problem.horizon);
    let mut dirs: Vec<DVector<f64>> = (0..rows).map(|i| parts.d_rows.row(i).transpose()).collect();
    let mut shifted: Vec<DVector<f64>> = dirs.iter().map(|d| a_pow.transpose() * d).collect();
    let mut sums = vec![0.0f64; rows];
    for power in 0..=max_power {
        for (r, &(source, t)) in structure.terminal_provenance.iter().enumerate() {
            if t == power {
                normals.row_mut(r).copy_from(&dirs[source].transpose());
                offsets[r] = parts.y_offsets[source] - sums[source];
            }
        }
        if power < max_power {
            for i in 0..rows {
                sums[i] += parts.w_cache.support(&shifted[i]);
                dirs[i] = parts.a_cl.transpose() * &dirs[i];
                shifted[i] = parts.a_cl.transpose() * &shifted[i];
            }
        }
    }
    Ok(Template::build(problem, params, &parts, &normals, &offsets))
}

/// Central-difference differentiator of the solve's Lagrangian in the
/// parameters, with the optimal point and derivation structure held fixed.
///
/// By the envelope theorem this equals the gradient of the optimal value in
/// the parameters wherever the active set is stable. One differentiator
/// serves both the value and the pinned-action value: the pinned action only
/// adds parameter-independent equality data, which cancels in differences.
pub struct EnvelopeDifferentiator {
    sides: Vec<(f64, Template, Template)>,
}

impl EnvelopeDifferentiator {
    pub fn new(
        problem: &TubeProblem,
        params: &TubeMpcParameters,
        structure: &FrozenStructure,
    ) -> Result<Self, MpcError> {
        let theta = params.to_theta();
        let mut sides = Vec::with_capacity(THETA_DIM);
        for j in 0..THETA_DIM {
            let mut h = 1e-6 * theta[j].abs().max(1.0);
            let mut built = None;
            for _ in 0..3 {
                let mut tp = theta.clone();
                tp[j] += h;
                let mut tm = theta.clone();
                tm[j] -= h;
                let plus = frozen_template(problem, &TubeMpcParameters::from_theta(&tp), structure);
                let minus =
                    frozen_template(problem, &TubeMpcParameters::from_theta(&tm), structure);
                match (plus, minus) {
                    (Ok(p), Ok(m)) => {
                        built = Some((2.0 * h, p, m));
                        break;
                    }
                    // Perturbation crossed a validity boundary (definiteness,
                    // stability): shrink and retry.
                    _ => h /= 100.0,
                }
            }
            match built {
                Some(side) => sides.push(side),
                None => {
                    return Err(MpcError::Internal(format!(
                        "parameter {j} sits on a derivation validity boundary"
                    )))
                }
            }
        }
        Ok(EnvelopeDifferentiator { sides })
    }

    /// Gradient of the solved value in the parameters, at the solve's
    /// optimal primal/dual point.
    pub fn gradient(&self, s: &DVector<f64>, solution: &MpcSolution) -> DVector<f64> {
        let x = &solution.solution.primal;
        let mu = &solution.solution.dual_in;
        DVector::from_iterator(
            self.sides.len(),
            self.sides.iter().map(|(two_h, plus, minus)| {
                (plus.lagrangian(s, x, mu) - minus.lagrangian(s, x, mu)) / two_h
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn default_problem() -> TubeProblem {
        let model = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.05, 0.1]),
            DVector::zeros(2),
        )
        .unwrap();
        TubeProblem::with_boxes(model, 1.0, 10.0, 50, 1e-4)
    }

    pub(crate) fn default_params() -> TubeMpcParameters {
        TubeMpcParameters {
            lam: DMatrix::zeros(2, 2),
            lin: DVector::zeros(2),
            l0: 0.0,
            hx: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.01]),
            hu: 0.01,
            x_ref: DVector::zeros(2),
            u_ref: 0.0,
            m_set: DMatrix::from_row_slice(
                4,
                2,
                &[20.0, 0.0, -20.0, 0.0, 0.0, 20.0, 0.0, -20.0],
            ),
        }
    }

    #[test]
    fn theta_roundtrip_is_exact() {
        let params = TubeMpcParameters {
            lam: DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.7]),
            lin: DVector::from_vec(vec![1.0, -2.0]),
            l0: 0.25,
            hx: DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]),
            hu: 0.05,
            x_ref: DVector::from_vec(vec![-0.3, 0.1]),
            u_ref: 0.2,
            m_set: DMatrix::from_row_slice(4, 2, &[21.0, 1.0, -19.0, 0.5, 0.1, 18.0, -0.2, -22.0]),
        };
        let theta = params.to_theta();
        assert_eq!(theta.len(), THETA_DIM);
        let back = TubeMpcParameters::from_theta(&theta);
        assert_eq!(back, params);
    }

    #[test]
    fn derivation_produces_monotone_tightenings_and_invariant_terminal() {
        let ctl = TubeController::new(default_problem(), default_params()).unwrap();
        let d = &ctl.derived;
        assert!(solvers::spectral_radius(&d.a_cl) < 1.0);
        for i in 0..6 {
            for k in 1..ctl.problem.horizon {
                assert!(d.tightenings[(k, i)] >= d.tightenings[(k - 1, i)] - 1e-12);
            }
            assert!(d.gamma_inf[i] >= d.tightenings[(ctl.problem.horizon - 1, i)] - 1e-12);
        }
        // Robust invariance certificate of the terminal set: one closed-loop
        // step plus the horizon-propagated disturbance stays inside.
        let oc = SupportCache::build(&d.terminal).unwrap();
        let wc = SupportCache::build(&d.w_set).unwrap();
        let a_pow = a_cl_power(&d.a_cl, ctl.problem.horizon);
        for i in 0..d.terminal.num_rows() {
            let n = d.terminal.normals.row(i).transpose();
            let lhs = oc.support(&(d.a_cl.transpose() * &n))
                + wc.support(&(a_pow.transpose() * &n));
            assert!(lhs <= d.terminal.offsets[i] + 1e-8);
        }
        assert_eq!(d.terminal_provenance.len(), d.terminal.num_rows());
    }

    #[test]
    fn solution_respects_dynamics_and_constraints() {
        let ctl = TubeController::new(default_problem(), default_params()).unwrap();
        let s = DVector::from_vec(vec![0.8, 0.0]);
        let out = ctl.solve_value(&s).unwrap();
        let n = ctl.problem.horizon;
        let x = &out.solution.primal;
        // Dynamics: z_1 = A s + B v_0 and z_{k+1} = A z_k + B v_k.
        let m = &ctl.problem.model;
        let z1 = m.step(&s, &DVector::from_vec(vec![x[2 * n]]));
        assert_abs_diff_eq!(x[0], z1[0], epsilon = 1e-8);
        assert_abs_diff_eq!(x[1], z1[1], epsilon = 1e-8);
        for k in 1..n {
            let zk = DVector::from_vec(vec![x[2 * (k - 1)], x[2 * (k - 1) + 1]]);
            let znext = m.step(&zk, &DVector::from_vec(vec![x[2 * n + k]]));
            assert_abs_diff_eq!(x[2 * k], znext[0], epsilon = 1e-7);
            assert_abs_diff_eq!(x[2 * k + 1], znext[1], epsilon = 1e-7);
        }
        // Tightened constraints hold along the plan.
        for k in 1..n {
            let zk = DVector::from_vec(vec![x[2 * (k - 1)], x[2 * (k - 1) + 1]]);
            let vk = x[2 * n + k];
            for i in 0..6 {
                let lhs = ctl.problem.cons_x.row(i).transpose().dot(&zk)
                    + ctl.problem.cons_u[i] * vk;
                let rhs = ctl.problem.cons_rhs[i] - ctl.derived.tightenings[(k, i)];
                assert!(lhs <= rhs + 1e-7, "row {i} step {k}: {lhs} > {rhs}");
            }
        }
        // Terminal state lands in the terminal set (deviation coordinates).
        let z_last = DVector::from_vec(vec![x[2 * (n - 1)], x[2 * (n - 1) + 1]]);
        let dev = &z_last - &ctl.params.x_ref;
        assert!(ctl.derived.terminal.contains(&dev, 1e-7));
        assert!(out.value.is_finite());
    }

    #[test]
    fn pinned_action_value_matches_at_the_optimum_and_dominates_elsewhere() {
        let ctl = TubeController::new(default_problem(), default_params()).unwrap();
        let s = DVector::from_vec(vec![0.8, 0.0]);
        let v = ctl.solve_value(&s).unwrap();
        let q_star = ctl.solve_action_value(&s, v.action).unwrap();
        assert_abs_diff_eq!(q_star.value, v.value, epsilon = 1e-7 * (1.0 + v.value.abs()));
        let q_off = ctl.solve_action_value(&s, v.action + 0.5).unwrap();
        assert!(q_off.value > v.value + 1e-9);
    }

    #[test]
    fn infeasible_outside_the_state_box() {
        let ctl = TubeController::new(default_problem(), default_params()).unwrap();
        let s = DVector::from_vec(vec![5.0, 5.0]);
        assert!(matches!(ctl.solve_value(&s), Err(MpcError::Infeasible)));
        assert!(!ctl.is_feasible(&s).unwrap());
        let inside = DVector::from_vec(vec![0.8, 0.0]);
        assert!(ctl.is_feasible(&inside).unwrap());
    }

    #[test]
    fn kkt_residuals_at_the_solution() {
        let ctl = TubeController::new(default_problem(), default_params()).unwrap();
        let s = DVector::from_vec(vec![0.8, 0.0]);
        let qp = ctl.template.qp(&s, None);
        let sol = solvers::solve_qp(&qp).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let stationarity = (&qp.hessian * &sol.primal
            + &qp.gradient
            + qp.eq_matrix.transpose() * &sol.dual_eq
            + qp.in_matrix.transpose() * &sol.dual_in)
            .amax();
        assert!(stationarity <= 1e-7, "stationarity {stationarity}");
        let eq_res = (&qp.eq_matrix * &sol.primal - &qp.eq_rhs).amax();
        assert!(eq_res <= 1e-8, "equality residual {eq_res}");
        for i in 0..qp.in_matrix.nrows() {
            let slack = qp.in_rhs[i] - (qp.in_matrix.row(i) * &sol.primal)[0];
            assert!(slack >= -1e-8);
            assert!(sol.dual_in[i] >= -1e-10);
            assert!(sol.dual_in[i] * slack <= 1e-6);
        }
    }

    #[test]
    fn envelope_gradient_matches_analytic_initial_cost_terms() {
        let ctl = TubeController::new(default_problem(), default_params()).unwrap();
        let s = DVector::from_vec(vec![0.8, -0.2]);
        let sol = ctl.solve_value(&s).unwrap();
        let diff =
            EnvelopeDifferentiator::new(&ctl.problem, &ctl.params, &ctl.structure()).unwrap();
        let g = diff.gradient(&s, &sol);
        // The initial-cost terms enter the value linearly with known
        // coefficients: d/d lam = s s' (doubled off-diagonal in packed
        // form), d/d lin = s, d/d l0 = 1.
        assert_abs_diff_eq!(g[0], s[0] * s[0], epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], 2.0 * s[0] * s[1], epsilon = 1e-8);
        assert_abs_diff_eq!(g[2], s[1] * s[1], epsilon = 1e-8);
        assert_abs_diff_eq!(g[3], s[0], epsilon = 1e-8);
        assert_abs_diff_eq!(g[4], s[1], epsilon = 1e-8);
        assert_abs_diff_eq!(g[5], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn envelope_gradient_matches_full_finite_differences() {
        let problem = default_problem();
        let params = default_params();
        let ctl = TubeController::new(problem.clone(), params.clone()).unwrap();
        let s = DVector::from_vec(vec![0.8, 0.0]);
        let sol = ctl.solve_value(&s).unwrap();
        let diff = EnvelopeDifferentiator::new(&problem, &params, &ctl.structure()).unwrap();
        let g = diff.gradient(&s, &sol);
        // Full re-derive-and-resolve finite differences on a few
        // representative coordinates (state reference, input weight, and a
        // disturbance-set entry).
        for &j in &[10usize, 9, 13] {
            let theta = params.to_theta();
            let h = 1e-5 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let vp = TubeController::new(problem.clone(), TubeMpcParameters::from_theta(&tp))
                .unwrap()
                .solve_value(&s)
                .unwrap()
                .value;
            let vm = TubeController::new(problem.clone(), TubeMpcParameters::from_theta(&tm))
                .unwrap()
                .solve_value(&s)
                .unwrap()
                .value;
            let fd = (vp - vm) / (2.0 * h);
            let scale = 1.0 + fd.abs().max(g[j].abs());
            assert!(
                (fd - g[j]).abs() <= 2e-4 * scale,
                "coordinate {j}: envelope {} vs finite difference {fd}",
                g[j]
            );
        }
    }
}
