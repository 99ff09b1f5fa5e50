//! Halfspace polytopes and invariant-set computations.
//!
//! A [`Polytope`] is the set `{x : N x <= c}`. Most of the crate works in one
//! or two dimensions, where supports, vertex enumeration, redundancy removal,
//! and Minkowski sums all have cheap exact forms; those paths avoid linear
//! programs entirely. The general-dimension fallbacks go through the LP
//! solver.
//!
//! Two invariant-set constructions are provided for the closed-loop map
//! `x+ = A x + w`, `w ∈ W`:
//!
//! - [`max_rpi`]: the maximal robust positively invariant subset of a
//!   constraint set, by intersecting successive preimages. Every retained row
//!   keeps its provenance `(source row, preimage power)`, so callers can
//!   re-evaluate the same rows under perturbed data.
//! - [`min_rpi`]: an outer approximation of the minimal robust positively
//!   invariant set, as a scaled finite Minkowski series.

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::solvers::{self, QpStatus, SolverError};
use crate::tol;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("polytope is empty")]
    EmptySet,
    #[error("polytope is unbounded in the requested direction")]
    Unbounded,
    #[error("operation requires dimension 1 or 2, got {0}")]
    UnsupportedDimension(usize),
    #[error("polytope is degenerate (no interior)")]
    Degenerate,
    #[error("invariant set not finitely determined within {0} iterations")]
    NotFinitelyDetermined(usize),
    #[error("disturbance set must contain the origin in its interior")]
    OriginNotInterior,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// The polyhedron `{x : normals * x <= offsets}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub normals: DMatrix<f64>,
    pub offsets: DVector<f64>,
}

impl Polytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, GeometryError> {
        if normals.nrows() != offsets.len() {
            return Err(GeometryError::DimensionMismatch(format!(
                "{} rows vs {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        Ok(Polytope { normals, offsets })
    }

    pub fn from_rows(rows: &[(DVector<f64>, f64)]) -> Result<Self, GeometryError> {
        if rows.is_empty() {
            return Err(GeometryError::DimensionMismatch("no rows".into()));
        }
        let dim = rows[0].0.len();
        let mut normals = DMatrix::zeros(rows.len(), dim);
        let mut offsets = DVector::zeros(rows.len());
        for (i, (n, c)) in rows.iter().enumerate() {
            if n.len() != dim {
                return Err(GeometryError::DimensionMismatch(
                    "inconsistent row dimensions".into(),
                ));
            }
            normals.row_mut(i).copy_from(&n.transpose());
            offsets[i] = *c;
        }
        Ok(Polytope { normals, offsets })
    }

    /// Axis-aligned box `{x : |x_i - center_i| <= halfwidth_i}`.
    pub fn box_nd(center: &DVector<f64>, halfwidths: &DVector<f64>) -> Self {
        let n = center.len();
        let mut normals = DMatrix::zeros(2 * n, n);
        let mut offsets = DVector::zeros(2 * n);
        for i in 0..n {
            normals[(2 * i, i)] = 1.0;
            offsets[2 * i] = center[i] + halfwidths[i];
            normals[(2 * i + 1, i)] = -1.0;
            offsets[2 * i + 1] = -center[i] + halfwidths[i];
        }
        Polytope { normals, offsets }
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.normals.nrows()
    }

    /// Membership up to `tol`, scaled per row by `1 + |offset|`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        for i in 0..self.num_rows() {
            let residual = self.normals.row(i).transpose().dot(x) - self.offsets[i];
            if residual > tol * (1.0 + self.offsets[i].abs()) {
                return false;
            }
        }
        true
    }

    /// Support function `max { d'x : x in P }` by linear programming.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64, GeometryError> {
        let sol = solvers::solve_lp(
            -direction,
            self.normals.clone(),
            self.offsets.clone(),
            DMatrix::zeros(0, self.dim()),
            DVector::zeros(0),
        )?;
        match sol.status {
            QpStatus::Optimal => Ok(-sol.value),
            QpStatus::Unbounded => Err(GeometryError::Unbounded),
            QpStatus::Infeasible => Err(GeometryError::EmptySet),
        }
    }

    pub fn is_empty(&self) -> Result<bool, GeometryError> {
        let point = solvers::feasible_point(
            &DMatrix::zeros(0, self.dim()),
            &DVector::zeros(0),
            &self.normals,
            &self.offsets,
        )?;
        Ok(point.is_none())
    }

    /// `alpha * P` for `alpha > 0` (scaling about the origin).
    pub fn scale(&self, alpha: f64) -> Self {
        assert!(alpha > 0.0, "scale factor must be positive");
        Polytope {
            normals: self.normals.clone(),
            offsets: &self.offsets * alpha,
        }
    }

    /// `P + {t}` (translation).
    pub fn translate(&self, t: &DVector<f64>) -> Self {
        Polytope {
            normals: self.normals.clone(),
            offsets: &self.offsets + &self.normals * t,
        }
    }

    /// Row-wise intersection `P ∩ Q`.
    pub fn intersection(&self, other: &Polytope) -> Result<Self, GeometryError> {
        if self.dim() != other.dim() {
            return Err(GeometryError::DimensionMismatch(
                "intersection of different dimensions".into(),
            ));
        }
        let mut normals = DMatrix::zeros(self.num_rows() + other.num_rows(), self.dim());
        normals.rows_mut(0, self.num_rows()).copy_from(&self.normals);
        normals
            .rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.normals);
        let mut offsets = DVector::zeros(self.num_rows() + other.num_rows());
        offsets.rows_mut(0, self.num_rows()).copy_from(&self.offsets);
        offsets
            .rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.offsets);
        Ok(Polytope { normals, offsets })
    }

    /// `{x : A x ∈ P}`.
    pub fn affine_preimage(&self, a: &DMatrix<f64>) -> Result<Self, GeometryError> {
        if a.nrows() != self.dim() {
            return Err(GeometryError::DimensionMismatch(
                "preimage map rows must match set dimension".into(),
            ));
        }
        Ok(Polytope {
            normals: &self.normals * a,
            offsets: self.offsets.clone(),
        })
    }

    /// Pontryagin difference `P ⊖ W = {x : x + w ∈ P for all w ∈ W}`: each
    /// offset drops by the support of `W` along that row.
    pub fn pontryagin_diff(&self, w: &Polytope) -> Result<Self, GeometryError> {
        if self.dim() != w.dim() {
            return Err(GeometryError::DimensionMismatch(
                "difference of different dimensions".into(),
            ));
        }
        let cache = SupportCache::build(w)?;
        let mut offsets = self.offsets.clone();
        for i in 0..self.num_rows() {
            offsets[i] -= cache.support(&self.normals.row(i).transpose());
        }
        Ok(Polytope {
            normals: self.normals.clone(),
            offsets,
        })
    }

    /// Minkowski sum `P ⊕ Q` (dimension 1 or 2 only).
    pub fn minkowski_sum(&self, other: &Polytope) -> Result<Self, GeometryError> {
        if self.dim() != other.dim() {
            return Err(GeometryError::DimensionMismatch(
                "sum of different dimensions".into(),
            ));
        }
        match self.dim() {
            1 => {
                let (a_lo, a_hi) = self.interval_1d()?;
                let (b_lo, b_hi) = other.interval_1d()?;
                Ok(interval_polytope(a_lo + b_lo, a_hi + b_hi))
            }
            2 => {
                let va = self.vertices_2d()?;
                let vb = other.vertices_2d()?;
                let mut sums = Vec::with_capacity(va.len() * vb.len());
                for p in &va {
                    for q in &vb {
                        sums.push(p + q);
                    }
                }
                let hull = hull_2d(&sums);
                hrep_from_hull(&hull)
            }
            d => Err(GeometryError::UnsupportedDimension(d)),
        }
    }

    /// Endpoints of a one-dimensional polytope.
    pub fn interval_1d(&self) -> Result<(f64, f64), GeometryError> {
        if self.dim() != 1 {
            return Err(GeometryError::UnsupportedDimension(self.dim()));
        }
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..self.num_rows() {
            let n = self.normals[(i, 0)];
            let c = self.offsets[i];
            if n.abs() <= 1e-14 {
                if c < -tol::FEAS {
                    return Err(GeometryError::EmptySet);
                }
                continue;
            }
            if n > 0.0 {
                hi = hi.min(c / n);
            } else {
                lo = lo.max(c / n);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(GeometryError::Unbounded);
        }
        if lo > hi + tol::FEAS * (1.0 + hi.abs()) {
            return Err(GeometryError::EmptySet);
        }
        Ok((lo, hi.max(lo)))
    }

    /// Vertices of a bounded two-dimensional polytope, counterclockwise.
    pub fn vertices_2d(&self) -> Result<Vec<Vector2<f64>>, GeometryError> {
        if self.dim() != 2 {
            return Err(GeometryError::UnsupportedDimension(self.dim()));
        }
        let m = self.num_rows();
        let mut vertices: Vec<Vector2<f64>> = Vec::new();
        for i in 0..m {
            let (ni, ci) = (self.normals.row(i).transpose(), self.offsets[i]);
            for j in (i + 1)..m {
                let (nj, cj) = (self.normals.row(j).transpose(), self.offsets[j]);
                let det = ni[0] * nj[1] - ni[1] * nj[0];
                if det.abs() <= 1e-13 * (ni.norm() * nj.norm()).max(1e-300) {
                    continue;
                }
                let v = Vector2::new((ci * nj[1] - cj * ni[1]) / det, (ni[0] * cj - nj[0] * ci) / det);
                let scale = 1.0 + v.amax();
                let inside = (0..m).all(|k| {
                    self.normals[(k, 0)] * v[0] + self.normals[(k, 1)] * v[1]
                        <= self.offsets[k] + 1e-8 * scale * self.normals.row(k).norm().max(1.0)
                });
                if inside && !vertices.iter().any(|u| (u - v).amax() <= 1e-9 * scale) {
                    vertices.push(v);
                }
            }
        }
        if vertices.is_empty() {
            return Err(GeometryError::EmptySet);
        }
        let centroid = vertices.iter().sum::<Vector2<f64>>() / vertices.len() as f64;
        vertices.sort_by(|a, b| {
            let ta = (a[1] - centroid[1]).atan2(a[0] - centroid[0]);
            let tb = (b[1] - centroid[1]).atan2(b[0] - centroid[0]);
            ta.partial_cmp(&tb).expect("finite angles")
        });
        Ok(vertices)
    }

    /// Drop redundant rows of a bounded set with nonempty interior; returns
    /// the reduced set and the retained original row indices (ascending).
    pub fn remove_redundant(&self) -> Result<(Self, Vec<usize>), GeometryError> {
        let keep = essential_rows(self)?;
        let retained: Vec<usize> = (0..self.num_rows()).filter(|&i| keep[i]).collect();
        let mut normals = DMatrix::zeros(retained.len(), self.dim());
        let mut offsets = DVector::zeros(retained.len());
        for (r, &i) in retained.iter().enumerate() {
            normals.row_mut(r).copy_from(&self.normals.row(i));
            offsets[r] = self.offsets[i];
        }
        Ok((Polytope { normals, offsets }, retained))
    }

    /// Whether `self ⊆ other` up to `tol`, by comparing supports of `self`
    /// along the rows of `other`.
    pub fn subset_of(&self, other: &Polytope, tol: f64) -> Result<bool, GeometryError> {
        if self.dim() != other.dim() {
            return Err(GeometryError::DimensionMismatch(
                "subset test across dimensions".into(),
            ));
        }
        let cache = SupportCache::build(self)?;
        for i in 0..other.num_rows() {
            let s = cache.support(&other.normals.row(i).transpose());
            if s > other.offsets[i] + tol * (1.0 + other.offsets[i].abs()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Componentwise bounds `(lower, upper)` of the set.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>), GeometryError> {
        let cache = SupportCache::build(self)?;
        let n = self.dim();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            hi[i] = cache.support(&e);
            e[i] = -1.0;
            lo[i] = -cache.support(&e);
        }
        Ok((lo, hi))
    }
}

/// Interval `[lo, hi]` as a one-dimensional polytope.
pub fn interval_polytope(lo: f64, hi: f64) -> Polytope {
    Polytope {
        normals: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        offsets: DVector::from_vec(vec![hi, -lo]),
    }
}

/// Precomputed representation of a fixed low-dimensional polytope for cheap
/// repeated support evaluations (closed form in 1-D, vertex maximum in 2-D,
/// LP fallback otherwise).
#[derive(Debug, Clone)]
pub enum SupportCache {
    Interval { lo: f64, hi: f64 },
    Vertices(Vec<Vector2<f64>>),
    General(Polytope),
}

impl SupportCache {
    pub fn build(p: &Polytope) -> Result<Self, GeometryError> {
        match p.dim() {
            1 => {
                let (lo, hi) = p.interval_1d()?;
                Ok(SupportCache::Interval { lo, hi })
            }
            2 => Ok(SupportCache::Vertices(p.vertices_2d()?)),
            _ => Ok(SupportCache::General(p.clone())),
        }
    }

    pub fn support(&self, direction: &DVector<f64>) -> f64 {
        match self {
            SupportCache::Interval { lo, hi } => {
                let d = direction[0];
                if d >= 0.0 {
                    d * hi
                } else {
                    d * lo
                }
            }
            SupportCache::Vertices(vs) => vs
                .iter()
                .map(|v| v[0] * direction[0] + v[1] * direction[1])
                .fold(f64::NEG_INFINITY, f64::max),
            SupportCache::General(p) => p
                .support(direction)
                .expect("support of cached general polytope"),
        }
    }
}

/// Convex hull of a 2-D point cloud (monotone chain). Collinear interior
/// points are dropped; the result is counterclockwise.
pub fn hull_2d(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| {
        (a[0], a[1])
            .partial_cmp(&(b[0], b[1]))
            .expect("finite points")
    });
    pts.dedup_by(|a, b| (*a - *b).amax() <= 1e-12 * (1.0 + a.amax()));
    if pts.len() <= 2 {
        return pts;
    }
    let scale: f64 = pts.iter().map(|p| p.amax()).fold(1.0, f64::max);
    let cross =
        |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| -> f64 {
            (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
        };
    let eps = 1e-12 * scale * scale;
    let mut lower: Vec<Vector2<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= eps
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= eps
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Halfspace representation of a counterclockwise convex polygon.
fn hrep_from_hull(hull: &[Vector2<f64>]) -> Result<Polytope, GeometryError> {
    if hull.len() < 3 {
        return Err(GeometryError::Degenerate);
    }
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::with_capacity(hull.len());
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let edge = b - a;
        // Outward normal of a counterclockwise edge.
        let n = DVector::from_vec(vec![edge[1], -edge[0]]);
        let nrm = n.norm();
        if nrm <= 1e-14 {
            continue;
        }
        let n = n / nrm;
        rows.push((n.clone(), n[0] * a[0] + n[1] * a[1]));
    }
    Polytope::from_rows(&rows)
}

/// Marks each row as essential (non-redundant). Requires a bounded set; in
/// two dimensions the set must have nonempty interior.
fn essential_rows(p: &Polytope) -> Result<Vec<bool>, GeometryError> {
    let m = p.num_rows();
    match p.dim() {
        1 => {
            let (lo, hi) = p.interval_1d()?;
            let mut best_hi: Option<(usize, f64)> = None;
            let mut best_lo: Option<(usize, f64)> = None;
            for i in 0..m {
                let n = p.normals[(i, 0)];
                if n.abs() <= 1e-14 {
                    continue;
                }
                let bound = p.offsets[i] / n;
                if n > 0.0 {
                    if best_hi.map_or(true, |(_, b)| bound < b - 1e-15) {
                        best_hi = Some((i, bound));
                    }
                } else if best_lo.map_or(true, |(_, b)| bound > b + 1e-15) {
                    best_lo = Some((i, bound));
                }
            }
            let _ = (lo, hi);
            let mut keep = vec![false; m];
            if let Some((i, _)) = best_hi {
                keep[i] = true;
            }
            if let Some((i, _)) = best_lo {
                keep[i] = true;
            }
            Ok(keep)
        }
        2 => {
            // Deduplicate rows (normalised), then keep rows supporting an
            // edge: at least two distinct incident vertices.
            let mut keep = vec![true; m];
            let mut normalised: Vec<(Vector2<f64>, f64)> = Vec::with_capacity(m);
            for i in 0..m {
                let n = Vector2::new(p.normals[(i, 0)], p.normals[(i, 1)]);
                let nrm = n.norm();
                if nrm <= 1e-14 {
                    keep[i] = p.offsets[i] < -tol::FEAS; // trivial or empty
                    if keep[i] {
                        return Err(GeometryError::EmptySet);
                    }
                    normalised.push((Vector2::zeros(), f64::INFINITY));
                    continue;
                }
                normalised.push((n / nrm, p.offsets[i] / nrm));
            }
            for i in 0..m {
                if !keep[i] {
                    continue;
                }
                for j in (i + 1)..m {
                    if keep[j]
                        && (normalised[i].0 - normalised[j].0).amax() <= 1e-12
                        && (normalised[i].1 - normalised[j].1).abs()
                            <= 1e-12 * (1.0 + normalised[i].1.abs())
                    {
                        keep[j] = false;
                    }
                }
            }
            let vertices = p.vertices_2d()?;
            for i in 0..m {
                if !keep[i] || normalised[i].1.is_infinite() {
                    keep[i] = false;
                    continue;
                }
                let (n, c) = normalised[i];
                let incident: Vec<&Vector2<f64>> = vertices
                    .iter()
                    .filter(|v| (n[0] * v[0] + n[1] * v[1] - c).abs() <= 1e-8 * (1.0 + v.amax()))
                    .collect();
                let has_edge = incident.len() >= 2
                    && incident.iter().any(|v| {
                        incident
                            .iter()
                            .any(|u| (*v - *u).amax() > 1e-9 * (1.0 + v.amax()))
                    });
                keep[i] = has_edge;
            }
            if keep.iter().all(|k| !k) {
                return Err(GeometryError::Degenerate);
            }
            Ok(keep)
        }
        _ => {
            // General dimension: one LP per row against the others.
            let mut keep = vec![true; m];
            for i in 0..m {
                let rows: Vec<usize> = (0..m).filter(|&j| j != i && keep[j]).collect();
                let mut normals = DMatrix::zeros(rows.len(), p.dim());
                let mut offsets = DVector::zeros(rows.len());
                for (r, &j) in rows.iter().enumerate() {
                    normals.row_mut(r).copy_from(&p.normals.row(j));
                    offsets[r] = p.offsets[j];
                }
                let others = Polytope { normals, offsets };
                match others.support(&p.normals.row(i).transpose()) {
                    Ok(s) => {
                        keep[i] = s > p.offsets[i] + tol::REDUNDANCY * (1.0 + p.offsets[i].abs())
                    }
                    Err(GeometryError::Unbounded) => keep[i] = true,
                    Err(e) => return Err(e),
                }
            }
            Ok(keep)
        }
    }
}

/// Maximal robust positively invariant set with row provenance.
#[derive(Debug, Clone)]
pub struct InvariantSet {
    pub set: Polytope,
    /// For each retained row: `(source row of the constraint set, preimage
    /// power t)`, meaning normal `(A')^t n_i` and offset
    /// `c_i - sum_{tau < t} supp(W, (A')^tau n_i)` (with the mapped
    /// disturbance `e W` in place of `W` for [`max_rpi_mapped`]).
    pub provenance: Vec<(usize, usize)>,
    /// Number of preimage generations taken before the set stopped shrinking.
    pub generations: usize,
}

/// Maximal robust positively invariant subset of `constraint` under
/// `x+ = a x + w`, `w ∈ disturbance`, by successive preimage intersection.
///
/// Both sets must be bounded; `constraint` must have nonempty interior in
/// dimension two. Terminates when a full preimage generation is redundant,
/// or errors with [`GeometryError::NotFinitelyDetermined`] at the iteration
/// cap.
pub fn max_rpi(
    a: &DMatrix<f64>,
    constraint: &Polytope,
    disturbance: &Polytope,
) -> Result<InvariantSet, GeometryError> {
    max_rpi_mapped(a, constraint, disturbance, &DMatrix::identity(a.nrows(), a.ncols()))
}

/// Like [`max_rpi`], but for dynamics `x+ = a x + e w`: the disturbance
/// enters through the linear map `e`. Support values of the mapped set are
/// taken as `supp(e W, n) = supp(W, e' n)`, so `e` may be strongly
/// contracting without any numerical trouble.
pub fn max_rpi_mapped(
    a: &DMatrix<f64>,
    constraint: &Polytope,
    disturbance: &Polytope,
    e: &DMatrix<f64>,
) -> Result<InvariantSet, GeometryError> {
    let dim = constraint.dim();
    if a.nrows() != dim || a.ncols() != dim || disturbance.dim() != dim {
        return Err(GeometryError::DimensionMismatch(
            "closed-loop map and sets must share one dimension".into(),
        ));
    }
    if e.nrows() != dim || e.ncols() != dim {
        return Err(GeometryError::DimensionMismatch(
            "disturbance map must be square in the state dimension".into(),
        ));
    }
    let raw_cache = SupportCache::build(disturbance)?;
    let e_t = e.transpose();
    let w_cache = move |d: &DVector<f64>| raw_cache.support(&(&e_t * d));
    let a_t = a.transpose();

    struct Row {
        normal: DVector<f64>,
        offset: f64,
        source: usize,
        power: usize,
    }

    let m0 = constraint.num_rows();
    let mut rows: Vec<Row> = (0..m0)
        .map(|i| Row {
            normal: constraint.normals.row(i).transpose(),
            offset: constraint.offsets[i],
            source: i,
            power: 0,
        })
        .collect();

    // Per-source running state: current transported normal `(A')^t n_i` and
    // the accumulated support sum in its offset.
    let mut carried: Vec<(DVector<f64>, f64)> = (0..m0)
        .map(|i| (constraint.normals.row(i).transpose(), 0.0))
        .collect();

    let assemble = |rows: &[Row]| -> Polytope {
        let mut normals = DMatrix::zeros(rows.len(), dim);
        let mut offsets = DVector::zeros(rows.len());
        for (r, row) in rows.iter().enumerate() {
            normals.row_mut(r).copy_from(&row.normal.transpose());
            offsets[r] = row.offset;
        }
        Polytope { normals, offsets }
    };

    let prune = |rows: &mut Vec<Row>| -> Result<Polytope, GeometryError> {
        let set = assemble(rows);
        let keep = essential_rows(&set)?;
        let mut k = 0usize;
        rows.retain(|_| {
            let keep_it = keep[k];
            k += 1;
            keep_it
        });
        Ok(assemble(rows))
    };

    let mut current = prune(&mut rows)?;
    for generation in 1..=tol::RPI_ITER_CAP {
        let current_cache = SupportCache::build(&current)?;
        // Advance every source chain by one preimage power.
        let mut fresh: Vec<Row> = Vec::with_capacity(m0);
        for (i, state) in carried.iter_mut().enumerate() {
            let support = w_cache(&state.0);
            let next_normal = &a_t * &state.0;
            let next_sum = state.1 + support;
            *state = (next_normal, next_sum);
            fresh.push(Row {
                normal: state.0.clone(),
                offset: constraint.offsets[i] - state.1,
                source: i,
                power: generation,
            });
        }
        let all_redundant = fresh.iter().all(|row| {
            current_cache.support(&row.normal)
                <= row.offset + tol::SET_INCLUSION * (1.0 + row.offset.abs())
        });
        if all_redundant {
            rows.sort_by_key(|r| (r.power, r.source));
            let set = assemble(&rows);
            let provenance = rows.iter().map(|r| (r.source, r.power)).collect();
            return Ok(InvariantSet {
                set,
                provenance,
                generations: generation - 1,
            });
        }
        rows.extend(fresh);
        current = prune(&mut rows)?;
    }
    Err(GeometryError::NotFinitelyDetermined(tol::RPI_ITER_CAP))
}

/// Outer approximation of the minimal robust positively invariant set.
#[derive(Debug, Clone)]
pub struct MinRpi {
    pub set: Polytope,
    /// Contraction factor: `a^order W ⊆ alpha W`.
    pub alpha: f64,
    /// Number of Minkowski terms in the underlying finite series.
    pub order: usize,
}

/// Find `(alpha, order)` with `a^order W ⊆ alpha W`, `alpha < 1`, such that
/// inflating the `order`-term series by `1/(1 - alpha)` adds at most `eps`
/// per coordinate direction.
pub fn mrpi_scaling(
    a: &DMatrix<f64>,
    disturbance: &Polytope,
    eps: f64,
) -> Result<(f64, usize), GeometryError> {
    let dim = disturbance.dim();
    if a.nrows() != dim || a.ncols() != dim {
        return Err(GeometryError::DimensionMismatch(
            "map and disturbance dimension".into(),
        ));
    }
    for i in 0..disturbance.num_rows() {
        if disturbance.offsets[i] <= 1e-12 {
            return Err(GeometryError::OriginNotInterior);
        }
    }
    let cache = SupportCache::build(disturbance)?;
    let a_t = a.transpose();
    // Transported row normals (A')^s n_i for the contraction test, and
    // transported coordinate directions for the series-size accumulators.
    let mut row_dirs: Vec<DVector<f64>> = (0..disturbance.num_rows())
        .map(|i| disturbance.normals.row(i).transpose())
        .collect();
    let mut axis_dirs: Vec<DVector<f64>> = Vec::with_capacity(2 * dim);
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        axis_dirs.push(e.clone());
        e[i] = -1.0;
        axis_dirs.push(e);
    }
    let mut series_size = vec![0.0f64; axis_dirs.len()];

    for s in 1..=tol::RPI_ITER_CAP {
        for (k, d) in axis_dirs.iter_mut().enumerate() {
            series_size[k] += cache.support(d);
            *d = &a_t * &*d;
        }
        let mut alpha = 0.0f64;
        for (i, d) in row_dirs.iter_mut().enumerate() {
            *d = &a_t * &*d;
            alpha = alpha.max(cache.support(d) / disturbance.offsets[i]);
        }
        if alpha < 1.0 {
            let size = series_size.iter().cloned().fold(0.0f64, f64::max);
            if alpha / (1.0 - alpha) * size <= eps {
                return Ok((alpha, s));
            }
        }
    }
    Err(GeometryError::NotFinitelyDetermined(tol::RPI_ITER_CAP))
}

/// Minimal robust positively invariant set (outer approximation): the
/// `order`-term Minkowski series of `a^j W`, inflated by `1/(1 - alpha)`.
pub fn min_rpi(
    a: &DMatrix<f64>,
    disturbance: &Polytope,
    eps: f64,
) -> Result<MinRpi, GeometryError> {
    let (alpha, order) = mrpi_scaling(a, disturbance, eps)?;
    let dim = disturbance.dim();
    let inflate = 1.0 / (1.0 - alpha);
    match dim {
        1 => {
            let cache = SupportCache::build(disturbance)?;
            let mut power = 1.0f64; // scalar a^j
            let a0 = a[(0, 0)];
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for _ in 0..order {
                hi += cache.support(&DVector::from_vec(vec![power]));
                lo -= cache.support(&DVector::from_vec(vec![-power]));
                power *= a0;
            }
            Ok(MinRpi {
                set: interval_polytope(lo * inflate, hi * inflate),
                alpha,
                order,
            })
        }
        2 => {
            let w_verts = disturbance.vertices_2d()?;
            let mut a_pow = DMatrix::identity(2, 2);
            let mut acc: Vec<Vector2<f64>> = vec![Vector2::zeros()];
            for _ in 0..order {
                let mapped: Vec<Vector2<f64>> = w_verts
                    .iter()
                    .map(|v| {
                        Vector2::new(
                            a_pow[(0, 0)] * v[0] + a_pow[(0, 1)] * v[1],
                            a_pow[(1, 0)] * v[0] + a_pow[(1, 1)] * v[1],
                        )
                    })
                    .collect();
                let mut sums = Vec::with_capacity(acc.len() * mapped.len());
                for p in &acc {
                    for q in &mapped {
                        sums.push(p + q);
                    }
                }
                acc = hull_2d(&sums);
                a_pow = &a_pow * a;
            }
            let inflated: Vec<Vector2<f64>> = acc.iter().map(|v| v * inflate).collect();
            let set = hrep_from_hull(&hull_2d(&inflated))?;
            Ok(MinRpi { set, alpha, order })
        }
        d => Err(GeometryError::UnsupportedDimension(d)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(halfwidth: f64) -> Polytope {
        Polytope::box_nd(
            &DVector::zeros(2),
            &DVector::from_vec(vec![halfwidth, halfwidth]),
        )
    }

    #[test]
    fn box_supports_are_corner_values() {
        let p = Polytope::box_nd(
            &DVector::from_vec(vec![1.0, -2.0]),
            &DVector::from_vec(vec![0.5, 2.0]),
        );
        let d = DVector::from_vec(vec![2.0, -1.0]);
        // max 2x - y over [0.5,1.5] x [-4,0] -> 2*1.5 + 4 = 7.
        assert_abs_diff_eq!(p.support(&d).unwrap(), 7.0, epsilon = 1e-8);
        let cache = SupportCache::build(&p).unwrap();
        assert_abs_diff_eq!(cache.support(&d), 7.0, epsilon = 1e-9);
    }

    #[test]
    fn square_vertices_enumerated_ccw() {
        let p = square(1.0);
        let v = p.vertices_2d().unwrap();
        assert_eq!(v.len(), 4);
        // Counterclockwise: the signed area is positive.
        let mut area = 0.0;
        for i in 0..v.len() {
            let a = v[i];
            let b = v[(i + 1) % v.len()];
            area += a[0] * b[1] - b[0] * a[1];
        }
        assert!(area > 0.0);
        assert_abs_diff_eq!(0.5 * area, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn redundant_row_is_dropped_with_index_bookkeeping() {
        let mut p = square(1.0);
        // Append a slack diagonal row x + y <= 5 (never active).
        let q = Polytope::from_rows(&[(DVector::from_vec(vec![1.0, 1.0]), 5.0)]).unwrap();
        p = p.intersection(&q).unwrap();
        let (reduced, retained) = p.remove_redundant().unwrap();
        assert_eq!(reduced.num_rows(), 4);
        assert_eq!(retained, vec![0, 1, 2, 3]);
    }

    #[test]
    fn pontryagin_difference_of_boxes_shrinks_offsets() {
        let p = square(1.0);
        let w = square(0.25);
        let d = p.pontryagin_diff(&w).unwrap();
        let (lo, hi) = (
            d.bounding_box().unwrap().0,
            d.bounding_box().unwrap().1,
        );
        assert_abs_diff_eq!(lo[0], -0.75, epsilon = 1e-8);
        assert_abs_diff_eq!(hi[1], 0.75, epsilon = 1e-8);
    }

    #[test]
    fn minkowski_sum_of_polygons_adds_vertex_counts() {
        // Square ⊕ rotated square = octagon.
        let p = square(1.0);
        let rot = Polytope::new(
            DMatrix::from_row_slice(
                4,
                2,
                &[
                    std::f64::consts::FRAC_1_SQRT_2,
                    std::f64::consts::FRAC_1_SQRT_2,
                    -std::f64::consts::FRAC_1_SQRT_2,
                    std::f64::consts::FRAC_1_SQRT_2,
                    std::f64::consts::FRAC_1_SQRT_2,
                    -std::f64::consts::FRAC_1_SQRT_2,
                    -std::f64::consts::FRAC_1_SQRT_2,
                    -std::f64::consts::FRAC_1_SQRT_2,
                ],
            ),
            DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]),
        )
        .unwrap();
        let sum = p.minkowski_sum(&rot).unwrap();
        assert_eq!(sum.vertices_2d().unwrap().len(), 8);
        // Support adds along every direction.
        for k in 0..8 {
            let th = k as f64 * std::f64::consts::PI / 4.0 + 0.1;
            let d = DVector::from_vec(vec![th.cos(), th.sin()]);
            assert_abs_diff_eq!(
                sum.support(&d).unwrap(),
                p.support(&d).unwrap() + rot.support(&d).unwrap(),
                epsilon = 1e-7
            );
        }
    }

    #[test]
    fn empty_intersection_detected() {
        let p = square(1.0).translate(&DVector::from_vec(vec![5.0, 0.0]));
        let q = square(1.0);
        let i = p.intersection(&q).unwrap();
        assert!(i.is_empty().unwrap());
        assert!(matches!(i.vertices_2d(), Err(GeometryError::EmptySet)));
    }

    fn stable_2x2(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        // Scaled rotation in skewed coordinates: eigenvalues are exactly
        // r e^{±i th}, so the spectral radius is r < 0.9.
        let th: f64 = rng.gen_range(-3.0..3.0);
        let r: f64 = rng.gen_range(0.3..0.9);
        let k: f64 = rng.gen_range(0.5..1.5);
        DMatrix::from_row_slice(
            2,
            2,
            &[
                r * th.cos(),
                -r * th.sin() * k,
                r * th.sin() / k,
                r * th.cos(),
            ],
        )
    }

    /// Exact robust-invariance certificate for an H-rep set: for every row,
    /// supp(Omega, A'n) + supp(W, n) <= offset.
    fn is_robust_invariant(a: &DMatrix<f64>, omega: &Polytope, w: &Polytope, tol: f64) -> bool {
        let oc = SupportCache::build(omega).unwrap();
        let wc = SupportCache::build(w).unwrap();
        (0..omega.num_rows()).all(|i| {
            let n = omega.normals.row(i).transpose();
            oc.support(&(a.transpose() * &n)) + wc.support(&n)
                <= omega.offsets[i] + tol * (1.0 + omega.offsets[i].abs())
        })
    }

    #[test]
    fn max_rpi_is_invariant_and_maximal_on_scalar_case() {
        // x+ = 0.5 x + w, |w| <= 0.25, |x| <= 1: invariance needs
        // 0.5 c + 0.25 <= c, so the largest invariant interval is all of
        // [-1, 1].
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let y = interval_polytope(-1.0, 1.0);
        let w = interval_polytope(-0.25, 0.25);
        let inv = max_rpi(&a, &y, &w).unwrap();
        let (lo, hi) = inv.set.interval_1d().unwrap();
        assert_abs_diff_eq!(lo, -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-9);
        assert!(is_robust_invariant(&a, &inv.set, &w, 1e-8));
    }

    #[test]
    fn max_rpi_shrinks_when_disturbance_requires_it() {
        // x+ = 1.2 x - 0.5 x = 0.7x with w in [-0.3, 0.3]: invariance forces
        // c >= 0.7c + 0.3 -> c <= 1 exactly equals the constraint; tighten
        // the dynamics to 0.9 so the fixed point sits inside: c = 3 > 1 so
        // again full. Use an expanding-ish map instead: a = 0.9, w = 0.3,
        // |x| <= 1: need 0.9c + 0.3 <= c -> c >= 3 > 1: no invariant subset
        // of [-1,1] except... c must satisfy c <= 1 and c >= 3: empty.
        let a = DMatrix::from_row_slice(1, 1, &[0.9]);
        let y = interval_polytope(-1.0, 1.0);
        let w = interval_polytope(-0.3, 0.3);
        assert!(matches!(
            max_rpi(&a, &y, &w),
            Err(GeometryError::EmptySet) | Err(GeometryError::Degenerate)
        ));
    }

    #[test]
    fn max_rpi_2d_certificate_and_provenance() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.05, 0.1]);
        let gain = crate::solvers::dare(
            &a,
            &b,
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(1, 1, &[0.1]),
        )
        .unwrap()
        .k;
        let a_cl = &a - &b * &gain;
        let y = square(1.0);
        let w = square(0.02);
        let inv = max_rpi(&a_cl, &y, &w).unwrap();
        assert!(is_robust_invariant(&a_cl, &inv.set, &w, 1e-8));
        assert!(inv.set.subset_of(&y, 1e-9).unwrap());
        assert_eq!(inv.provenance.len(), inv.set.num_rows());
        // Re-assembling rows from provenance reproduces the set exactly.
        let wc = SupportCache::build(&w).unwrap();
        for (r, &(source, power)) in inv.provenance.iter().enumerate() {
            let mut n = y.normals.row(source).transpose();
            let mut drop = 0.0;
            for _ in 0..power {
                drop += wc.support(&n);
                n = a_cl.transpose() * n;
            }
            assert_abs_diff_eq!(
                (inv.set.normals.row(r).transpose() - &n).amax(),
                0.0,
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                inv.set.offsets[r],
                y.offsets[source] - drop,
                epsilon = 1e-10
            );
        }
        // Monte Carlo spot check.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let verts = inv.set.vertices_2d().unwrap();
        let wv = w.vertices_2d().unwrap();
        for _ in 0..200 {
            let i = rng.gen_range(0..verts.len());
            let j = rng.gen_range(0..wv.len());
            let x = verts[i];
            let succ = DVector::from_vec(vec![
                a_cl[(0, 0)] * x[0] + a_cl[(0, 1)] * x[1] + wv[j][0],
                a_cl[(1, 0)] * x[0] + a_cl[(1, 1)] * x[1] + wv[j][1],
            ]);
            assert!(inv.set.contains(&succ, 1e-7));
        }
    }

    #[test]
    fn min_rpi_is_invariant_and_tight_scalar() {
        // x+ = 0.5x + w, |w| <= 0.1: minimal invariant set is [-0.2, 0.2].
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let w = interval_polytope(-0.1, 0.1);
        let out = min_rpi(&a, &w, 1e-4).unwrap();
        let (lo, hi) = out.set.interval_1d().unwrap();
        assert!(out.alpha < 1.0);
        assert!((hi - 0.2).abs() <= 1e-3 && hi >= 0.2 - 1e-12);
        assert!((lo + 0.2).abs() <= 1e-3 && lo <= -0.2 + 1e-12);
        assert!(is_robust_invariant(&a, &out.set, &w, 1e-8));
    }

    #[test]
    fn min_rpi_2d_invariance_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..8 {
            let a = stable_2x2(&mut rng);
            let w = square(0.05);
            let out = min_rpi(&a, &w, 1e-3).unwrap();
            assert!(
                is_robust_invariant(&a, &out.set, &w, 1e-7),
                "violated for a = {a}"
            );
            // The approximation contains the true set: W itself maps inside.
            assert!(w.subset_of(&out.set, 1e-7).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn support_scales_linearly(
            hw in 0.1f64..3.0,
            alpha in 0.1f64..4.0,
            dx in -1.0f64..1.0,
            dy in -1.0f64..1.0,
        ) {
            prop_assume!(dx.abs() + dy.abs() > 1e-3);
            let p = square(hw);
            let d = DVector::from_vec(vec![dx, dy]);
            let s1 = p.scale(alpha).support(&d).unwrap();
            let s0 = p.support(&d).unwrap();
            prop_assert!((s1 - alpha * s0).abs() <= 1e-7 * (1.0 + s0.abs()));
        }

        #[test]
        fn erode_then_dilate_stays_inside(
            hw in 0.5f64..2.0,
            wx in 0.05f64..0.4,
            wy in 0.05f64..0.4,
        ) {
            let p = square(hw);
            let w = Polytope::box_nd(
                &DVector::zeros(2),
                &DVector::from_vec(vec![wx, wy]),
            );
            let eroded = p.pontryagin_diff(&w).unwrap();
            prop_assume!(!eroded.is_empty().unwrap());
            let back = eroded.minkowski_sum(&w).unwrap();
            prop_assert!(back.subset_of(&p, 1e-7).unwrap());
            // For boxes the identity is exact both ways.
            prop_assert!(p.subset_of(&back, 1e-7).unwrap());
        }

        #[test]
        fn vertices_lie_in_the_set_and_on_two_rows(
            hw in 0.2f64..2.0,
            cut in 0.1f64..1.9,
        ) {
            let p = square(hw);
            let q = Polytope::from_rows(&[
                (DVector::from_vec(vec![1.0, 1.0]), cut),
            ]).unwrap();
            let clipped = p.intersection(&q).unwrap();
            prop_assume!(!clipped.is_empty().unwrap());
            if let Ok(vs) = clipped.vertices_2d() {
                for v in &vs {
                    let xv = DVector::from_vec(vec![v[0], v[1]]);
                    prop_assert!(clipped.contains(&xv, 1e-7));
                    let tight = (0..clipped.num_rows()).filter(|&i| {
                        let n = clipped.normals.row(i).transpose();
                        (n.dot(&xv) - clipped.offsets[i]).abs()
                            <= 1e-7 * (1.0 + clipped.offsets[i].abs())
                    }).count();
                    prop_assert!(tight >= 2);
                }
            }
        }

        #[test]
        fn translation_moves_supports(
            hw in 0.2f64..2.0,
            tx in -2.0f64..2.0,
            ty in -2.0f64..2.0,
        ) {
            let p = square(hw);
            let t = DVector::from_vec(vec![tx, ty]);
            let moved = p.translate(&t);
            let d = DVector::from_vec(vec![0.6, -0.8]);
            let lhs = moved.support(&d).unwrap();
            let rhs = p.support(&d).unwrap() + d.dot(&t);
            prop_assert!((lhs - rhs).abs() <= 1e-7 * (1.0 + rhs.abs()));
        }
    }
}
