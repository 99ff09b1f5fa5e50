//! Dense convex QP/LP solving and a discrete-time algebraic Riccati solver.
//!
//! The QP solver is a primal active-set method in the null space of the
//! equality constraints. It is written for small dense problems (tens to a
//! few hundred variables) where robustness and determinism matter more than
//! scale: all tie-breaks are by lowest constraint index, and a Bland-style
//! rule takes over after degenerate (zero-length) steps so the iteration
//! cannot cycle. Linear programs are the zero-Hessian special case; descent
//! directions then come from the projected gradient and an unbounded ray is
//! reported as [`QpStatus::Unbounded`].
//!
//! Problems are posed as
//! ```text
//!   minimize   1/2 x' Q x + c' x
//!   subject to A_eq x  = b_eq
//!              A_in x <= b_in
//! ```
//! with `Q` symmetric and positive semidefinite on the null space of `A_eq`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::tol;

/// Errors from the dense solvers.
///
/// Infeasibility and unboundedness are *outcomes*, reported through
/// [`QpStatus`]; errors are reserved for problems the solver cannot process.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("hessian is not symmetric")]
    AsymmetricHessian,
    #[error("hessian is indefinite on the equality null space")]
    IndefiniteHessian,
    #[error("reduced hessian condition number exceeds {0:.1e}")]
    IllConditioned(f64),
    #[error("active-set iteration limit {0} reached")]
    MaxIterations(usize),
    #[error("riccati iteration did not converge")]
    NotConverged,
    #[error("system pair appears not stabilizable (riccati iterates diverge)")]
    NotStabilizable,
    #[error("weight matrix must be positive definite")]
    IndefiniteWeight,
}

/// Termination status of a QP/LP solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    /// KKT point found to tolerance.
    Optimal,
    /// Phase-1 proved there is no point satisfying all constraints.
    Infeasible,
    /// A feasible descent ray exists (only possible with a singular or zero
    /// Hessian, e.g. an LP).
    Unbounded,
}

/// A dense convex QP. Empty constraint blocks are zero-row matrices.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub in_matrix: DMatrix<f64>,
    pub in_rhs: DVector<f64>,
}

/// Primal/dual solution of a [`QpProblem`].
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    /// Minimiser (best iterate for `Unbounded`, zeros for `Infeasible`).
    pub primal: DVector<f64>,
    /// Multipliers of the equality constraints (sign-free).
    pub dual_eq: DVector<f64>,
    /// Multipliers of the inequality constraints (nonnegative, zero off the
    /// active set).
    pub dual_in: DVector<f64>,
    /// Indices of inequality constraints active at the solution, ascending.
    pub active_set: Vec<usize>,
    /// Objective value (`-inf` when unbounded, `+inf` when infeasible).
    pub value: f64,
    pub iterations: usize,
}

impl QpSolution {
    fn infeasible(n: usize) -> Self {
        QpSolution {
            status: QpStatus::Infeasible,
            primal: DVector::zeros(n),
            dual_eq: DVector::zeros(0),
            dual_in: DVector::zeros(0),
            active_set: Vec::new(),
            value: f64::INFINITY,
            iterations: 0,
        }
    }

    /// The primal point if the solve ended at an optimum.
    pub fn optimal(&self) -> Option<&DVector<f64>> {
        (self.status == QpStatus::Optimal).then_some(&self.primal)
    }
}

impl QpProblem {
    /// Inequality-constrained QP (no equality block).
    pub fn inequality_form(
        hessian: DMatrix<f64>,
        gradient: DVector<f64>,
        in_matrix: DMatrix<f64>,
        in_rhs: DVector<f64>,
    ) -> Self {
        let n = gradient.len();
        QpProblem {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            in_matrix,
            in_rhs,
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        let n = self.gradient.len();
        let check = |name: &str, rows: usize, cols: usize, rhs: usize| {
            if cols != n || rows != rhs {
                return Err(SolverError::DimensionMismatch(format!(
                    "{name}: {rows}x{cols} with rhs length {rhs}, n = {n}"
                )));
            }
            Ok(())
        };
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(SolverError::DimensionMismatch(format!(
                "hessian is {}x{}, n = {}",
                self.hessian.nrows(),
                self.hessian.ncols(),
                n
            )));
        }
        check(
            "eq",
            self.eq_matrix.nrows(),
            self.eq_matrix.ncols(),
            self.eq_rhs.len(),
        )?;
        check(
            "in",
            self.in_matrix.nrows(),
            self.in_matrix.ncols(),
            self.in_rhs.len(),
        )?;
        let scale = self.hessian.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.hessian[(i, j)] - self.hessian[(j, i)]).abs() > 1e-12 * scale {
                    return Err(SolverError::AsymmetricHessian);
                }
            }
        }
        Ok(())
    }
}

/// Solve a convex QP. Infeasible/unbounded outcomes are reported in the
/// returned status, not as errors.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, SolverError> {
    problem.validate()?;
    let n = problem.gradient.len();

    // Eliminate equalities: x = x_p + Z y with A_eq x_p = b_eq and the
    // columns of Z an orthonormal basis of null(A_eq).
    let (x_p, z) = if problem.eq_matrix.nrows() == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        let svd = problem.eq_matrix.clone().svd(true, true);
        let rank_tol = 1e-12
            * svd
                .singular_values
                .iter()
                .cloned()
                .fold(0.0f64, f64::max)
                .max(1.0);
        let x_p: DVector<f64> = svd
            .solve(&problem.eq_rhs, rank_tol)
            .map_err(|e| SolverError::DimensionMismatch(e.to_string()))?
            .column(0)
            .into();
        let residual = (&problem.eq_matrix * &x_p - &problem.eq_rhs).amax();
        if residual > tol::FEAS * (1.0 + problem.eq_rhs.amax()) {
            // The equality system itself has no solution.
            return Ok(QpSolution::infeasible(n));
        }
        let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > rank_tol)
            .count();
        let mut range = DMatrix::zeros(n, rank);
        for (k, i) in (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > rank_tol)
            .enumerate()
        {
            range.set_column(k, &v_t.row(i).transpose());
        }
        (x_p, orthonormal_complement(&range))
    };

    let nz = z.ncols();
    let q_z = {
        let mut m = z.transpose() * &problem.hessian * &z;
        // Exact symmetry keeps Cholesky happy.
        for i in 0..nz {
            for j in (i + 1)..nz {
                let a = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = a;
                m[(j, i)] = a;
            }
        }
        m
    };
    let c_z = z.transpose() * (&problem.hessian * &x_p + &problem.gradient);
    let g_z = &problem.in_matrix * &z;
    let h_z = &problem.in_rhs - &problem.in_matrix * &x_p;

    let finish = |y: &DVector<f64>,
                  working: &[usize],
                  lambda_w: &DVector<f64>,
                  status: QpStatus,
                  iterations: usize| {
        let x = &x_p + &z * y;
        let mut dual_in = DVector::zeros(problem.in_matrix.nrows());
        for (k, &i) in working.iter().enumerate() {
            dual_in[i] = lambda_w[k].max(0.0);
        }
        let dual_eq = if problem.eq_matrix.nrows() == 0 {
            DVector::zeros(0)
        } else {
            let rhs = -(&problem.hessian * &x
                + &problem.gradient
                + problem.in_matrix.transpose() * &dual_in);
            problem
                .eq_matrix
                .transpose()
                .clone()
                .svd(true, true)
                .solve(&rhs, 1e-13)
                .map(|m| m.column(0).into())
                .unwrap_or_else(|_| DVector::zeros(problem.eq_matrix.nrows()))
        };
        let value = if status == QpStatus::Unbounded {
            f64::NEG_INFINITY
        } else {
            0.5 * (&problem.hessian * &x).dot(&x) + problem.gradient.dot(&x)
        };
        let mut active_set: Vec<usize> = working.to_vec();
        active_set.sort_unstable();
        QpSolution {
            status,
            primal: x,
            dual_eq,
            dual_in,
            active_set,
            value,
            iterations,
        }
    };

    if nz == 0 {
        // x is pinned by the equalities; only feasibility remains.
        let slack_ok = (0..h_z.len()).all(|i| h_z[i] >= -tol::FEAS * (1.0 + problem.in_rhs.amax()));
        if !slack_ok {
            return Ok(QpSolution::infeasible(n));
        }
        return Ok(finish(
            &DVector::zeros(0),
            &[],
            &DVector::zeros(0),
            QpStatus::Optimal,
            0,
        ));
    }

    let lp = q_z.amax() == 0.0;
    let y0 = match phase_one(&g_z, &h_z)? {
        Some(y) => y,
        None => return Ok(QpSolution::infeasible(n)),
    };
    let out = active_set_min(&q_z, &c_z, &g_z, &h_z, y0, lp)?;
    Ok(finish(
        &out.y,
        &out.working,
        &out.lambda_w,
        out.status,
        out.iterations,
    ))
}

/// Solve a linear program `min c' x  s.t.  A_eq x = b_eq, A_in x <= b_in`.
pub fn solve_lp(
    gradient: DVector<f64>,
    in_matrix: DMatrix<f64>,
    in_rhs: DVector<f64>,
    eq_matrix: DMatrix<f64>,
    eq_rhs: DVector<f64>,
) -> Result<QpSolution, SolverError> {
    let n = gradient.len();
    solve_qp(&QpProblem {
        hessian: DMatrix::zeros(n, n),
        gradient,
        eq_matrix,
        eq_rhs,
        in_matrix,
        in_rhs,
    })
}

/// Find any point satisfying the constraint system, or `None` if the phase-1
/// LP proves it empty.
pub fn feasible_point(
    eq_matrix: &DMatrix<f64>,
    eq_rhs: &DVector<f64>,
    in_matrix: &DMatrix<f64>,
    in_rhs: &DVector<f64>,
) -> Result<Option<DVector<f64>>, SolverError> {
    let n = in_matrix.ncols().max(eq_matrix.ncols());
    let problem = QpProblem {
        hessian: DMatrix::zeros(n, n),
        gradient: DVector::zeros(n),
        eq_matrix: eq_matrix.clone(),
        eq_rhs: eq_rhs.clone(),
        in_matrix: in_matrix.clone(),
        in_rhs: in_rhs.clone(),
    };
    // A zero objective makes every feasible point optimal, so the active-set
    // loop stops at the phase-1 point immediately.
    let sol = solve_qp(&problem)?;
    Ok(match sol.status {
        QpStatus::Infeasible => None,
        _ => Some(sol.primal),
    })
}

struct ActiveSetOut {
    y: DVector<f64>,
    working: Vec<usize>,
    lambda_w: DVector<f64>,
    status: QpStatus,
    iterations: usize,
}

/// Orthonormal bases of the working-set row space and of its orthogonal
/// complement, maintained incrementally across single-row changes. Every
/// downstream use depends only on the spanned subspaces, so any orthonormal
/// basis of the same spaces is equivalent.
struct WorkingBasis {
    dim: usize,
    range: Vec<DVector<f64>>,
    complement: Vec<DVector<f64>>,
}

impl WorkingBasis {
    fn new(dim: usize) -> Self {
        WorkingBasis {
            dim,
            range: Vec::new(),
            complement: (0..dim)
                .map(|j| {
                    let mut e = DVector::zeros(dim);
                    e[j] = 1.0;
                    e
                })
                .collect(),
        }
    }

    /// Columns spanning the feasible directions of the working set.
    fn null_matrix(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.dim, self.complement.len());
        for (k, v) in self.complement.iter().enumerate() {
            z.set_column(k, v);
        }
        z
    }

    /// Register one more working row. A row already inside the range leaves
    /// both spans unchanged, matching a from-scratch rank factorisation.
    fn add_row(&mut self, row: &DVector<f64>) {
        let z = self.complement.len();
        if z == 0 {
            return;
        }
        // Complement-space coefficients of the row, with one
        // reorthogonalisation pass so they describe the projection exactly.
        let mut w = DVector::zeros(z);
        for (j, cvec) in self.complement.iter().enumerate() {
            w[j] = cvec.dot(row);
        }
        let mut proj = DVector::zeros(self.dim);
        for (j, cvec) in self.complement.iter().enumerate() {
            proj.axpy(w[j], cvec, 1.0);
        }
        let leftover = row - &proj;
        for (j, cvec) in self.complement.iter().enumerate() {
            w[j] += cvec.dot(&leftover);
        }
        let nrm = w.norm();
        if nrm <= 1e-12 * row.amax().max(1.0) {
            return; // dependent row: spans unchanged
        }
        w /= nrm;
        let mut u = DVector::zeros(self.dim);
        for (j, cvec) in self.complement.iter().enumerate() {
            u.axpy(w[j], cvec, 1.0);
        }
        u /= u.norm();
        // Remove the u-direction from the complement with a Householder
        // reflection applied in coefficient space: H maps w to ∓e_k, so the
        // reflected complement has ∓u in column k while the other columns
        // stay orthonormal and orthogonal to u. Dropping column k leaves an
        // exact orthonormal basis of the shrunken complement.
        let mut k = 0usize;
        for j in 1..z {
            if w[j].abs() > w[k].abs() {
                k = j;
            }
        }
        let sgn = if w[k] >= 0.0 { 1.0 } else { -1.0 };
        let mut vh = w;
        vh[k] += sgn;
        let beta = 2.0 / vh.norm_squared();
        let mut t = DVector::zeros(self.dim);
        for (j, cvec) in self.complement.iter().enumerate() {
            t.axpy(vh[j], cvec, 1.0);
        }
        for (j, cvec) in self.complement.iter_mut().enumerate() {
            cvec.axpy(-beta * vh[j], &t, 1.0);
        }
        self.complement.remove(k);
        self.range.push(u);
        debug_assert_eq!(self.range.len() + self.complement.len(), self.dim);
    }

    /// Rebuild after a row leaves the working set: refactor the remaining
    /// rows and return any freed direction to the complement.
    fn rebuild(&mut self, rows: &[DVector<f64>]) {
        let old_range = std::mem::take(&mut self.range);
        for row in rows {
            let mut v = row.clone();
            for _ in 0..2 {
                for r in &self.range {
                    let c = r.dot(&v);
                    v.axpy(-c, r, 1.0);
                }
            }
            let nrm = v.norm();
            if nrm > 1e-12 * row.amax().max(1.0) {
                self.range.push(v / nrm);
            }
        }
        // Old range directions no longer spanned by the remaining rows
        // return to the complement, restoring the dimension invariant.
        for u in old_range {
            let mut v = u;
            for _ in 0..2 {
                for r in &self.range {
                    let c = r.dot(&v);
                    v.axpy(-c, r, 1.0);
                }
                for cvec in &self.complement {
                    let c = cvec.dot(&v);
                    v.axpy(-c, cvec, 1.0);
                }
            }
            let nrm = v.norm();
            if nrm > 1e-8 {
                self.complement.push(v / nrm);
            }
        }
        debug_assert_eq!(self.range.len() + self.complement.len(), self.dim);
    }
}

/// Primal active-set iteration on `min 1/2 y'Qy + c'y  s.t.  G y <= h` from a
/// feasible start. `lp` selects projected-gradient directions instead of
/// Newton steps.
fn active_set_min(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    mut y: DVector<f64>,
    lp: bool,
) -> Result<ActiveSetOut, SolverError> {
    let n = y.len();
    let m = g.nrows();
    let cap = 200 + 20 * (n + m);
    let mut working: Vec<usize> = Vec::new();
    let mut basis = WorkingBasis::new(n);
    let mut zero_steps = 0usize;
    let mut bland = false;
    let dir_scale = 1.0 + y.amax();

    for iteration in 0..cap {
        // Null-space basis of the working set, maintained incrementally.
        let z_w = basis.null_matrix();

        let grad = if lp { c.clone() } else { q * &y + c };
        let g_red = z_w.transpose() * &grad;

        // Direction in the working-set null space: Newton where the reduced
        // Hessian has curvature, a descent ray along its kernel otherwise.
        let (dir, is_ray) = if z_w.ncols() == 0 {
            (DVector::zeros(n), false)
        } else if lp {
            (-(&z_w * &g_red), true)
        } else {
            let h_red = z_w.transpose() * q * &z_w;
            match nalgebra::Cholesky::new(h_red.clone()) {
                Some(chol) => {
                    let step = chol.solve(&g_red);
                    (-(&z_w * step), false)
                }
                None => {
                    // Semidefinite reduced Hessian: split curvature and kernel.
                    let eig = nalgebra::SymmetricEigen::new(h_red);
                    let lmax = eig.eigenvalues.amax();
                    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * lmax.max(1.0)) {
                        return Err(SolverError::IndefiniteHessian);
                    }
                    let kernel_cut = 1e-14 * lmax.max(1.0);
                    let mut ray = DVector::zeros(z_w.ncols());
                    let mut newton = DVector::zeros(z_w.ncols());
                    let mut lmin_pos = f64::INFINITY;
                    for k in 0..eig.eigenvalues.len() {
                        let lam = eig.eigenvalues[k];
                        let vk: DVector<f64> = eig.eigenvectors.column(k).into();
                        let coef = vk.dot(&g_red);
                        if lam <= kernel_cut {
                            ray += &vk * (-coef);
                        } else {
                            lmin_pos = lmin_pos.min(lam);
                            newton += &vk * (-coef / lam);
                        }
                    }
                    if lmin_pos.is_finite() && lmax / lmin_pos > tol::COND_LIMIT {
                        return Err(SolverError::IllConditioned(tol::COND_LIMIT));
                    }
                    if ray.amax() > 1e-11 * (1.0 + g_red.amax()) {
                        (&z_w * &ray, true)
                    } else {
                        (&z_w * newton, false)
                    }
                }
            }
        };

        if dir.amax() <= 1e-11 * dir_scale {
            // Stationary on the working set; inspect multipliers.
            let lambda_w = working_multipliers(g, &working, &grad);
            let leaving = if bland {
                (0..working.len()).find(|&k| lambda_w[k] < -tol::DUAL)
            } else {
                let mut best: Option<(usize, f64)> = None;
                for k in 0..working.len() {
                    if lambda_w[k] < -tol::DUAL
                        && best.map_or(true, |(_, v)| lambda_w[k] < v)
                    {
                        best = Some((k, lambda_w[k]));
                    }
                }
                best.map(|(k, _)| k)
            };
            match leaving {
                None => {
                    return Ok(ActiveSetOut {
                        y,
                        working,
                        lambda_w,
                        status: QpStatus::Optimal,
                        iterations: iteration,
                    });
                }
                Some(k) => {
                    working.remove(k);
                    let rows: Vec<DVector<f64>> =
                        working.iter().map(|&i| g.row(i).transpose()).collect();
                    basis.rebuild(&rows);
                    continue;
                }
            }
        }

        // Ratio test against the rows outside the working set.
        let gd = g * &dir;
        let gy = g * &y;
        let mut alpha_max = f64::INFINITY;
        let mut blocking: Option<usize> = None;
        for i in 0..m {
            if working.contains(&i) || gd[i] <= 1e-13 * (1.0 + gd.amax()) {
                continue;
            }
            let ratio = ((h[i] - gy[i]) / gd[i]).max(0.0);
            if ratio < alpha_max - 1e-13 {
                alpha_max = ratio;
                blocking = Some(i);
            } else if (ratio - alpha_max).abs() <= 1e-13 {
                // Tie: keep the lowest index for determinism.
                if let Some(b) = blocking {
                    if i < b {
                        blocking = Some(i);
                    }
                }
            }
        }

        let target = if is_ray { f64::INFINITY } else { 1.0 };
        let alpha = target.min(alpha_max);
        if alpha.is_infinite() {
            let lambda_w = working_multipliers(g, &working, &grad);
            return Ok(ActiveSetOut {
                y,
                working,
                lambda_w,
                status: QpStatus::Unbounded,
                iterations: iteration,
            });
        }

        y += &dir * alpha;
        if alpha < alpha_max {
            // Unblocked Newton step: working set unchanged, next pass will
            // either terminate or drop a constraint.
            zero_steps = 0;
            bland = false;
            continue;
        }
        if let Some(i) = blocking {
            working.push(i);
            basis.add_row(&g.row(i).transpose());
        }
        if alpha <= 1e-13 {
            zero_steps += 1;
            if zero_steps > 8 {
                bland = true;
            }
        } else {
            zero_steps = 0;
            bland = false;
        }
    }
    Err(SolverError::MaxIterations(cap))
}

/// Least-squares multipliers of the working set: `G_w' lambda = -grad`.
fn working_multipliers(g: &DMatrix<f64>, working: &[usize], grad: &DVector<f64>) -> DVector<f64> {
    if working.is_empty() {
        return DVector::zeros(0);
    }
    let n = g.ncols();
    let mut gw_t = DMatrix::zeros(n, working.len());
    for (k, &i) in working.iter().enumerate() {
        gw_t.set_column(k, &g.row(i).transpose());
    }
    gw_t.svd(true, true)
        .solve(&(-grad), 1e-13)
        .map(|m| m.column(0).into())
        .unwrap_or_else(|_| DVector::zeros(working.len()))
}

/// Phase 1: minimise the elastic violation `t` in `G y - t <= h, t >= 0`.
/// Returns a feasible point of `G y <= h`, or `None` if the minimum exceeds
/// the feasibility tolerance.
fn phase_one(g: &DMatrix<f64>, h: &DVector<f64>) -> Result<Option<DVector<f64>>, SolverError> {
    let n = g.ncols();
    let m = g.nrows();
    if m == 0 {
        return Ok(Some(DVector::zeros(n)));
    }
    let worst = (0..m).map(|i| -h[i]).fold(f64::NEG_INFINITY, f64::max);
    if worst <= tol::FEAS {
        return Ok(Some(DVector::zeros(n)));
    }

    let mut g1 = DMatrix::zeros(m + 1, n + 1);
    let mut h1 = DVector::zeros(m + 1);
    for i in 0..m {
        for j in 0..n {
            g1[(i, j)] = g[(i, j)];
        }
        g1[(i, n)] = -1.0;
        h1[i] = h[i];
    }
    g1[(m, n)] = -1.0; // -t <= 0
    let mut c1 = DVector::zeros(n + 1);
    c1[n] = 1.0;
    let mut y0 = DVector::zeros(n + 1);
    y0[n] = worst + 1.0;

    let out = active_set_min(&DMatrix::zeros(n + 1, n + 1), &c1, &g1, &h1, y0, true)?;
    if out.status != QpStatus::Optimal {
        // min t >= 0 is bounded, so anything else is a solver defect.
        return Err(SolverError::NotConverged);
    }
    let t = out.y[n];
    if t > tol::FEAS * (1.0 + h.amax()) {
        return Ok(None);
    }
    Ok(Some(out.y.rows(0, n).into_owned()))
}

/// Orthonormal basis of the orthogonal complement of `u` (which must have
/// orthonormal columns). Deterministic: candidate axes are picked by largest
/// residual norm, ties to the lowest index. The selection uses incrementally
/// maintained squared residuals (`r_j = 1 − Σ u[j,·]² − Σ b[j]²`), so only
/// the chosen axis is ever orthogonalised explicitly.
fn orthonormal_complement(u: &DMatrix<f64>) -> DMatrix<f64> {
    let n = u.nrows();
    let k = u.ncols();
    let want = n - k;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(want);
    let mut r: Vec<f64> = (0..n)
        .map(|j| {
            let mut s = 1.0;
            for c in 0..k {
                s -= u[(j, c)] * u[(j, c)];
            }
            s
        })
        .collect();
    while basis.len() < want {
        let mut best = 0usize;
        let mut best_nrm = f64::NEG_INFINITY;
        for (j, rj) in r.iter().enumerate() {
            let nrm = rj.max(0.0).sqrt();
            if nrm > best_nrm + 1e-15 {
                best_nrm = nrm;
                best = j;
            }
        }
        let mut v = DVector::zeros(n);
        v[best] = 1.0;
        // Two orthogonalisation passes for stability.
        for _ in 0..2 {
            let coeffs = u.transpose() * &v;
            v -= u * coeffs;
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        let nrm = v.norm();
        debug_assert!(nrm > 1e-10, "orthonormal complement lost rank");
        v /= nrm;
        for (j, rj) in r.iter_mut().enumerate() {
            *rj -= v[j] * v[j];
        }
        basis.push(v);
    }
    let mut out = DMatrix::zeros(n, want);
    for (i, v) in basis.iter().enumerate() {
        out.set_column(i, v);
    }
    out
}

/// Solution of the discrete-time algebraic Riccati equation together with the
/// associated state-feedback gain.
#[derive(Debug, Clone)]
pub struct Dare {
    /// Stabilising solution `P` of `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q`.
    pub p: DMatrix<f64>,
    /// Gain `K = (R + B'PB)^-1 B'PA`, stabilising as `A - B K`.
    pub k: DMatrix<f64>,
}

/// Fixed-point iteration for the DARE. `q` must be symmetric positive
/// semidefinite and `r` symmetric positive definite.
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<Dare, SolverError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(SolverError::DimensionMismatch(
            "riccati state dimensions".into(),
        ));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(SolverError::DimensionMismatch(
            "riccati input dimensions".into(),
        ));
    }
    let sym_min = |mat: &DMatrix<f64>| {
        nalgebra::SymmetricEigen::new(mat.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    };
    if sym_min(q) < -1e-10 * q.amax().max(1.0) {
        return Err(SolverError::IndefiniteWeight);
    }
    if sym_min(r) <= 0.0 {
        return Err(SolverError::IndefiniteWeight);
    }

    let mut p = q.clone();
    for _ in 0..200_000 {
        let btpb = b.transpose() * &p * b + r;
        let btpa = b.transpose() * &p * a;
        let k = nalgebra::Cholesky::new(btpb)
            .ok_or(SolverError::IndefiniteWeight)?
            .solve(&btpa);
        let mut p_next = a.transpose() * &p * a - a.transpose() * &p * b * &k + q;
        // Symmetrise to stop round-off drift across iterations.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (p_next[(i, j)] + p_next[(j, i)]);
                p_next[(i, j)] = v;
                p_next[(j, i)] = v;
            }
        }
        if p_next.amax() > 1e14 {
            return Err(SolverError::NotStabilizable);
        }
        let diff = (&p_next - &p).amax();
        p = p_next;
        if diff < tol::RICCATI * p.amax().max(1.0) {
            let btpb = b.transpose() * &p * b + r;
            let btpa = b.transpose() * &p * a;
            let k = nalgebra::Cholesky::new(btpb)
                .ok_or(SolverError::IndefiniteWeight)?
                .solve(&btpa);
            return Ok(Dare { p, k });
        }
    }
    Err(SolverError::NotConverged)
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}
