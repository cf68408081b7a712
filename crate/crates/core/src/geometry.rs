//! Convex polytopes in halfspace (H) and vertex (V) form.
//!
//! All sets used by the controller live in low dimension (states are 2-D,
//! parameters 3-D in the reference setup), so vertex and facet enumeration are
//! done by exhaustive basis enumeration rather than incremental hull
//! algorithms. Support functions go through the conic LP path with an
//! active-set polish so that LP optima are exact to machine precision.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, LinExpr, SolveStatus, SolverSettings};

/// Absolute tolerance on halfspace residuals for containment tests.
pub const CONTAINMENT_TOL: f64 = 1e-8;
/// Vertices closer than this (Euclidean) are merged.
pub const DUPLICATE_TOL: f64 = 1e-9;
/// Largest dimension accepted by vertex and facet enumeration.
pub const MAX_ENUM_DIM: usize = 4;

const ZERO_ROW_TOL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("polytope is empty")]
    Empty,
    #[error("polytope is unbounded")]
    Unbounded,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("vertex list is empty")]
    NoVertices,
    #[error("unsupported shape: {0}")]
    Unsupported(String),
    #[error("LP failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Value of a support function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Support {
    Finite(f64),
    Unbounded,
}

impl Support {
    pub fn value(self) -> f64 {
        match self {
            Support::Finite(v) => v,
            Support::Unbounded => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Result<f64> {
        match self {
            Support::Finite(v) => Ok(v),
            Support::Unbounded => Err(GeometryError::Unbounded),
        }
    }
}

/// `{x : normals · x ≤ offsets}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HDoc", into = "HDoc")]
pub struct HPolytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct HDoc {
    normals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl TryFrom<HDoc> for HPolytope {
    type Error = GeometryError;
    fn try_from(doc: HDoc) -> Result<Self> {
        let r = doc.normals.len();
        let n = doc.normals.first().map_or(0, Vec::len);
        if doc.normals.iter().any(|row| row.len() != n) {
            return Err(GeometryError::Dimension("ragged normals".into()));
        }
        let flat: Vec<f64> = doc.normals.into_iter().flatten().collect();
        HPolytope::new(DMatrix::from_row_slice(r, n, &flat), DVector::from_vec(doc.offsets))
    }
}

impl From<HPolytope> for HDoc {
    fn from(p: HPolytope) -> Self {
        HDoc {
            normals: p
                .normals
                .row_iter()
                .map(|row| row.iter().copied().collect())
                .collect(),
            offsets: p.offsets.iter().copied().collect(),
        }
    }
}

fn dot_row(m: &DMatrix<f64>, i: usize, x: &DVector<f64>) -> f64 {
    (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum()
}

impl HPolytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(GeometryError::Dimension(format!(
                "{} normals, {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        if normals.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::Dimension("non-finite entry".into()));
        }
        Ok(Self { normals, offsets })
    }

    /// The whole space `R^n` (no constraints).
    pub fn universe(n: usize) -> Self {
        Self {
            normals: DMatrix::zeros(0, n),
            offsets: DVector::zeros(0),
        }
    }

    /// Axis-aligned box `[lower, upper]` with rows `[I; -I]`.
    pub fn from_box(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<Self> {
        let n = lower.len();
        if upper.len() != n {
            return Err(GeometryError::Dimension("box bounds".into()));
        }
        let mut normals = DMatrix::zeros(2 * n, n);
        let mut offsets = DVector::zeros(2 * n);
        for i in 0..n {
            normals[(i, i)] = 1.0;
            offsets[i] = upper[i];
            normals[(n + i, i)] = -1.0;
            offsets[n + i] = -lower[i];
        }
        Self::new(normals, offsets)
    }

    /// `{x : ‖x‖_∞ ≤ r}`
    pub fn inf_ball(n: usize, r: f64) -> Self {
        Self::from_box(&DVector::from_element(n, -r), &DVector::from_element(n, r)).expect("box")
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.normals.row(i).transpose()
    }

    /// Largest halfspace residual `max_i (n_i·x − h_i)`; `-∞` for no rows.
    pub fn max_residual(&self, x: &DVector<f64>) -> f64 {
        (0..self.n_rows())
            .map(|i| dot_row(&self.normals, i, x) - self.offsets[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.max_residual(x) <= tol
    }

    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope> {
        if self.dim() != other.dim() {
            return Err(GeometryError::Dimension("intersection".into()));
        }
        let r = self.n_rows() + other.n_rows();
        let mut normals = DMatrix::zeros(r, self.dim());
        normals.rows_mut(0, self.n_rows()).copy_from(&self.normals);
        normals.rows_mut(self.n_rows(), other.n_rows()).copy_from(&other.normals);
        let offsets = DVector::from_iterator(r, self.offsets.iter().chain(other.offsets.iter()).copied());
        HPolytope::new(normals, offsets)
    }

    /// `{x : H(Ax + b) ≤ h}`
    pub fn preimage(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<HPolytope> {
        if a.nrows() != self.dim() || b.len() != self.dim() {
            return Err(GeometryError::Dimension("preimage".into()));
        }
        HPolytope::new(&self.normals * a, &self.offsets - &self.normals * b)
    }

    /// `{z + αx : x ∈ self}` for `α > 0`.
    pub fn scale_translate(&self, alpha: f64, z: &DVector<f64>) -> HPolytope {
        HPolytope {
            normals: self.normals.clone(),
            offsets: self.offsets.scale(alpha) + &self.normals * z,
        }
    }

    /// Drops rows with zero normal; `Empty` if such a row excludes everything.
    fn without_trivial_rows(&self) -> Result<HPolytope> {
        let mut keep = Vec::new();
        for i in 0..self.n_rows() {
            let norm = self.normals.row(i).norm();
            if norm <= ZERO_ROW_TOL {
                if self.offsets[i] < -CONTAINMENT_TOL {
                    return Err(GeometryError::Empty);
                }
            } else {
                keep.push(i);
            }
        }
        Ok(self.select_rows(&keep))
    }

    fn select_rows(&self, rows: &[usize]) -> HPolytope {
        HPolytope {
            normals: self.normals.select_rows(rows),
            offsets: self.offsets.select_rows(rows),
        }
    }

    fn lp_program(&self, extra: Option<(usize, f64)>) -> (ConicProgram, Vec<usize>) {
        let mut prog = ConicProgram::new();
        let xb = prog.add_vector("x", self.dim());
        let vars: Vec<usize> = (0..self.dim()).map(|j| xb.var(j)).collect();
        for i in 0..self.n_rows() {
            let mut e = LinExpr::constant(-self.offsets[i]);
            if let Some((row, relax)) = extra {
                if row == i {
                    e.constant -= relax;
                }
            }
            for (j, &v) in vars.iter().enumerate() {
                e.add_term(v, self.normals[(i, j)]);
            }
            // Unit-norm rows keep the solver well scaled when data rows are tiny.
            let norm = self.normals.row(i).norm();
            prog.add_le(if norm > 0.0 { e.scaled(1.0 / norm) } else { e });
        }
        (prog, vars)
    }

    /// `max_{x ∈ P} d·x`.
    pub fn support(&self, d: &DVector<f64>) -> Result<Support> {
        self.support_with_point(d).map(|(s, _)| s)
    }

    /// Support value and a maximizer (when finite).
    pub fn support_with_point(&self, d: &DVector<f64>) -> Result<(Support, Option<DVector<f64>>)> {
        if d.len() != self.dim() {
            return Err(GeometryError::Dimension("support direction".into()));
        }
        let p = self.without_trivial_rows()?;
        p.support_impl(d, None)
    }

    fn support_impl(&self, d: &DVector<f64>, relax: Option<(usize, f64)>) -> Result<(Support, Option<DVector<f64>>)> {
        let (mut prog, vars) = self.lp_program(relax);
        for (j, &v) in vars.iter().enumerate() {
            prog.add_linear_cost(v, -d[j]);
        }
        let out = conic::solve(&prog, &SolverSettings::default())?;
        match out.status {
            SolveStatus::Optimal => {
                let x = DVector::from_iterator(self.dim(), vars.iter().map(|&v| out.value(v)));
                let offsets = match relax {
                    Some((row, r)) => {
                        let mut o = self.offsets.clone();
                        o[row] += r;
                        o
                    }
                    None => self.offsets.clone(),
                };
                let x = polish_lp_vertex(&self.normals, &offsets, d, &x).unwrap_or(x);
                Ok((Support::Finite(d.dot(&x)), Some(x)))
            }
            SolveStatus::Unbounded => Ok((Support::Unbounded, None)),
            SolveStatus::Infeasible => Err(GeometryError::Empty),
            SolveStatus::NumericalFailure => Err(GeometryError::Solver(out.stats.backend_status)),
        }
    }

    pub fn is_empty(&self) -> Result<bool> {
        let p = match self.without_trivial_rows() {
            Ok(p) => p,
            Err(GeometryError::Empty) => return Ok(true),
            Err(e) => return Err(e),
        };
        if p.n_rows() == 0 {
            return Ok(false);
        }
        let (prog, _) = p.lp_program(None);
        let out = conic::solve(&prog, &SolverSettings::default())?;
        match out.status {
            SolveStatus::Optimal => Ok(false),
            SolveStatus::Infeasible => Ok(true),
            _ => Err(GeometryError::Solver(out.stats.backend_status)),
        }
    }

    /// Support finite in `±e_i` for every coordinate.
    pub fn is_bounded(&self) -> Result<bool> {
        for i in 0..self.dim() {
            for s in [1.0, -1.0] {
                let mut d = DVector::zeros(self.dim());
                d[i] = s;
                if self.support(&d)? == Support::Unbounded {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Largest inscribed ball `(center, radius)`.
    pub fn chebyshev_center(&self) -> Result<(DVector<f64>, f64)> {
        let p = self.without_trivial_rows()?;
        let n = p.dim();
        let mut prog = ConicProgram::new();
        let xb = prog.add_vector("x", n);
        let r = prog.add_scalar("r").var(0);
        for i in 0..p.n_rows() {
            let mut e = LinExpr::constant(-p.offsets[i]).term(r, p.normals.row(i).norm());
            for j in 0..n {
                e.add_term(xb.var(j), p.normals[(i, j)]);
            }
            prog.add_le(e);
        }
        prog.add_ge(LinExpr::var(r));
        prog.add_linear_cost(r, -1.0);
        let out = conic::solve(&prog, &SolverSettings::default())?;
        match out.status {
            SolveStatus::Optimal => Ok((DVector::from_vec(out.block_values(&xb)), out.value(r))),
            SolveStatus::Infeasible => Err(GeometryError::Empty),
            SolveStatus::Unbounded => Err(GeometryError::Unbounded),
            SolveStatus::NumericalFailure => Err(GeometryError::Solver(out.stats.backend_status)),
        }
    }

    /// Removes duplicate and LP-redundant rows.
    pub fn remove_redundant(&self) -> Result<HPolytope> {
        let p = self.without_trivial_rows()?;
        // Normalize, then merge rows with identical normals keeping the tightest offset.
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..p.n_rows() {
            let nrm = p.normals.row(i).norm();
            let a = p.row(i) / nrm;
            let b = p.offsets[i] / nrm;
            match rows.iter_mut().find(|(n, _)| (n - &a).norm() < 1e-10) {
                Some(existing) => existing.1 = existing.1.min(b),
                None => rows.push((a, b)),
            }
        }
        let mut current = HPolytope::from_rows(p.dim(), &rows);
        if current.is_empty()? {
            return Err(GeometryError::Empty);
        }
        let mut i = 0;
        while i < current.n_rows() {
            // Row i is redundant if relaxing it by 1 does not change the support in its direction.
            let d = current.row(i);
            let (s, _) = current.support_impl(&d, Some((i, 1.0)))?;
            let redundant = match s {
                Support::Finite(v) => v <= current.offsets[i] + 1e-9,
                Support::Unbounded => false,
            };
            if redundant {
                let keep: Vec<usize> = (0..current.n_rows()).filter(|&k| k != i).collect();
                current = current.select_rows(&keep);
            } else {
                i += 1;
            }
        }
        Ok(current)
    }

    fn from_rows(n: usize, rows: &[(DVector<f64>, f64)]) -> HPolytope {
        let mut normals = DMatrix::zeros(rows.len(), n);
        let mut offsets = DVector::zeros(rows.len());
        for (i, (a, b)) in rows.iter().enumerate() {
            normals.set_row(i, &a.transpose());
            offsets[i] = *b;
        }
        HPolytope { normals, offsets }
    }

    /// `(lower, upper)` if every row is `±e_i` and both sides of every axis are present.
    pub fn box_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.dim();
        let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(n, f64::INFINITY);
        for i in 0..self.n_rows() {
            let row = self.normals.row(i);
            let nz: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
            if nz.len() != 1 {
                return None;
            }
            let j = nz[0];
            let a = row[j];
            let b = self.offsets[i] / a;
            if a > 0.0 {
                upper[j] = upper[j].min(b);
            } else {
                lower[j] = lower[j].max(b);
            }
        }
        if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        Some((lower, upper))
    }

    /// Volume of an axis-aligned box; `0` if any side is degenerate.
    pub fn box_volume(&self) -> Result<f64> {
        let (lo, hi) = self
            .box_bounds()
            .ok_or_else(|| GeometryError::Unsupported("volume requires an axis-aligned box".into()))?;
        Ok(lo.iter().zip(hi.iter()).map(|(l, h)| (h - l).max(0.0)).product())
    }

    /// Vertex enumeration; the polytope must be bounded and nonempty.
    pub fn vertices(&self) -> Result<VPolytope> {
        let n = self.dim();
        if n == 0 || n > MAX_ENUM_DIM {
            return Err(GeometryError::Unsupported(format!("vertex enumeration in dimension {n}")));
        }
        let p = self.without_trivial_rows()?;
        let r = p.n_rows();
        if r < n + 1 {
            return Err(GeometryError::Unbounded);
        }
        let scale = p.offsets.abs().max().max(1.0);
        let mut verts: Vec<DVector<f64>> = Vec::new();
        for combo in Combinations::new(r, n) {
            let a = p.normals.select_rows(&combo);
            let b = p.offsets.select_rows(&combo);
            let Some(x) = a.lu().solve(&b) else { continue };
            if !x.iter().all(|v| v.is_finite()) {
                continue;
            }
            // Reject near-singular bases whose solution fails to reproduce b.
            let sub = p.normals.select_rows(&combo);
            if (&sub * &x - &b).abs().max() > 1e-9 * scale {
                continue;
            }
            if p.max_residual(&x) <= 1e-9 * scale {
                push_unique(&mut verts, x);
            }
        }
        if verts.is_empty() {
            return if p.is_empty()? {
                Err(GeometryError::Empty)
            } else {
                Err(GeometryError::Unbounded)
            };
        }
        if !p.is_bounded()? {
            return Err(GeometryError::Unbounded);
        }
        VPolytope::new(verts)
    }
}

/// Moves an approximate LP optimum onto its active face exactly, verifying
/// primal feasibility and dual sign conditions. `None` if verification fails.
fn polish_lp_vertex(
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    d: &DVector<f64>,
    x: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = normals.ncols();
    let scale = offsets.abs().max().max(1.0) * x.abs().max().max(1.0);
    let mut order: Vec<(f64, usize)> = (0..normals.nrows())
        .map(|i| {
            let nrm = normals.row(i).norm();
            ((offsets[i] - dot_row(normals, i, x)) / nrm, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut active: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for &(slack, i) in &order {
        if slack > 1e-5 * scale || active.len() == n {
            break;
        }
        let mut v = normals.row(i).transpose();
        let v0 = v.norm();
        for q in &basis {
            let c = q.dot(&v);
            v -= q * c;
        }
        if v.norm() > 1e-8 * v0 {
            basis.push(v.normalize());
            active.push(i);
        }
    }
    if active.is_empty() {
        return if d.norm() == 0.0 { Some(x.clone()) } else { None };
    }
    let a = normals.select_rows(&active);
    let b = offsets.select_rows(&active);
    let gram = &a * a.transpose();
    let chol = gram.clone().cholesky()?;
    let xp = x - a.transpose() * chol.solve(&(&a * x - &b));
    // Dual: d = Aᵀλ with λ ≥ 0.
    let lambda = chol.solve(&(&a * d));
    let dual_res = (a.transpose() * &lambda - d).norm();
    let dn = d.norm().max(1e-300);
    if dual_res > 1e-9 * dn || lambda.iter().any(|&l| l < -1e-9 * dn) {
        return None;
    }
    let off_scale = offsets.abs().max().max(1.0);
    let feasible = (0..normals.nrows()).all(|i| dot_row(normals, i, &xp) - offsets[i] <= 1e-11 * off_scale);
    feasible.then_some(xp)
}

fn push_unique(verts: &mut Vec<DVector<f64>>, x: DVector<f64>) {
    if !verts.iter().any(|v| (v - &x).norm() <= DUPLICATE_TOL) {
        verts.push(x);
    }
}

/// Lexicographic `k`-subsets of `0..n`.
struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            idx: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Convex hull of a nonempty vertex list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VDoc", into = "VDoc")]
pub struct VPolytope {
    vertices: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct VDoc {
    vertices: Vec<Vec<f64>>,
}

impl TryFrom<VDoc> for VPolytope {
    type Error = GeometryError;
    fn try_from(doc: VDoc) -> Result<Self> {
        VPolytope::new(doc.vertices.into_iter().map(DVector::from_vec).collect())
    }
}

impl From<VPolytope> for VDoc {
    fn from(p: VPolytope) -> Self {
        VDoc {
            vertices: p.vertices.iter().map(|v| v.iter().copied().collect()).collect(),
        }
    }
}

impl VPolytope {
    /// Merges duplicates; rejects empty or ragged input.
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        let n = points.first().ok_or(GeometryError::NoVertices)?.len();
        if points.iter().any(|p| p.len() != n) {
            return Err(GeometryError::Dimension("ragged vertex list".into()));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(GeometryError::Dimension("non-finite vertex".into()));
        }
        let mut vertices = Vec::with_capacity(points.len());
        for p in points {
            push_unique(&mut vertices, p);
        }
        Ok(Self { vertices })
    }

    pub fn singleton(x: DVector<f64>) -> Self {
        Self { vertices: vec![x] }
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.vertices.len() == 1
    }

    pub fn centroid(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim());
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len() as f64
    }

    pub fn support(&self, d: &DVector<f64>) -> f64 {
        self.vertices.iter().map(|v| v.dot(d)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `{Ax + b : x ∈ P}`
    pub fn affine_map(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<VPolytope> {
        if a.ncols() != self.dim() || a.nrows() != b.len() {
            return Err(GeometryError::Dimension("affine map".into()));
        }
        VPolytope::new(self.vertices.iter().map(|v| a * v + b).collect())
    }

    /// `P ⊕ Q`, keeping only extreme points.
    pub fn minkowski_sum(&self, other: &VPolytope) -> Result<VPolytope> {
        if self.dim() != other.dim() {
            return Err(GeometryError::Dimension("Minkowski sum".into()));
        }
        let mut sums = Vec::with_capacity(self.len() * other.len());
        for p in &self.vertices {
            for q in &other.vertices {
                sums.push(p + q);
            }
        }
        VPolytope::new(sums)?.reduce()
    }

    /// Drops points that are convex combinations of the others.
    pub fn reduce(&self) -> Result<VPolytope> {
        let mut pts = self.vertices.clone();
        let mut i = 0;
        while i < pts.len() && pts.len() > 1 {
            let others: Vec<&DVector<f64>> = pts.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, p)| p).collect();
            if in_convex_hull(&others, &pts[i])? {
                pts.remove(i);
            } else {
                i += 1;
            }
        }
        Ok(VPolytope { vertices: pts })
    }

    /// Facet enumeration for a full-dimensional hull.
    pub fn to_hpolytope(&self) -> Result<HPolytope> {
        let n = self.dim();
        if n == 0 || n > MAX_ENUM_DIM {
            return Err(GeometryError::Unsupported(format!("facet enumeration in dimension {n}")));
        }
        let pts = &self.vertices;
        let scale = pts.iter().map(|p| p.abs().max()).fold(1.0, f64::max);
        let tol = 1e-9 * scale;
        if n == 1 {
            let lo = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            if hi - lo <= tol {
                return Err(GeometryError::Unsupported("hull is not full-dimensional".into()));
            }
            return HPolytope::from_box(&DVector::from_element(1, lo), &DVector::from_element(1, hi));
        }
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for combo in Combinations::new(pts.len(), n) {
            let base = &pts[combo[0]];
            let mut span = DMatrix::zeros(n - 1, n);
            for (r, &k) in combo[1..].iter().enumerate() {
                span.set_row(r, &(&pts[k] - base).transpose());
            }
            let Some(normal) = null_vector(&span) else { continue };
            let offset = normal.dot(base);
            let mut above = false;
            let mut below = false;
            for p in pts {
                let s = normal.dot(p) - offset;
                above |= s > tol;
                below |= s < -tol;
            }
            let (a, b) = match (above, below) {
                (true, true) => continue,
                (false, true) => (normal, offset),
                (true, false) => (-normal, -offset),
                (false, false) => return Err(GeometryError::Unsupported("hull is not full-dimensional".into())),
            };
            if !rows.iter().any(|(r, o)| (r - &a).norm() < 1e-9 && (o - b).abs() < tol) {
                rows.push((a, b));
            }
        }
        if rows.len() < n + 1 {
            return Err(GeometryError::Unsupported("hull is not full-dimensional".into()));
        }
        Ok(HPolytope::from_rows(n, &rows))
    }
}

/// Unit vector spanning the null space of an `(n-1) × n` matrix of full row rank.
fn null_vector(span: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = span.ncols();
    let full = DMatrix::from_fn(n, n, |i, j| if i < n - 1 { span[(i, j)] } else { 0.0 });
    let svd = full.svd(false, true);
    let vt = svd.v_t?;
    let (imin, &smin) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    // The padded zero row contributes one zero singular value; a second means rank deficiency.
    let smax = svd.singular_values.max().max(1e-300);
    let zeros = svd.singular_values.iter().filter(|&&s| s <= 1e-10 * smax).count();
    if zeros > 1 || smin > 1e-10 * smax {
        return None;
    }
    Some(vt.row(imin).transpose().normalize())
}

fn in_convex_hull(points: &[&DVector<f64>], x: &DVector<f64>) -> Result<bool> {
    if points.is_empty() {
        return Ok(false);
    }
    let n = x.len();
    let mut prog = ConicProgram::new();
    let lam = prog.add_vector("lambda", points.len());
    let mut sum = LinExpr::constant(-1.0);
    for k in 0..points.len() {
        sum.add_term(lam.var(k), 1.0);
        prog.add_ge(LinExpr::var(lam.var(k)));
    }
    prog.add_eq(sum);
    for j in 0..n {
        let mut e = LinExpr::constant(-x[j]);
        for (k, p) in points.iter().enumerate() {
            e.add_term(lam.var(k), p[j]);
        }
        prog.add_eq(e);
    }
    let out = conic::solve(&prog, &SolverSettings::default())?;
    Ok(match out.status {
        SolveStatus::Optimal => out.residuals.max_eq_residual <= 1e-9,
        _ => false,
    })
}

/// Every vertex of `q` satisfies `p`'s inequalities within [`CONTAINMENT_TOL`].
pub fn contains(p: &HPolytope, q: &VPolytope) -> bool {
    p.dim() == q.dim() && q.vertices().iter().all(|v| p.contains_point(v, CONTAINMENT_TOL))
}

/// Hit-and-run sampler over a bounded H-polytope.
#[derive(Clone, Debug)]
pub struct HitAndRun {
    pub burn_in_per_dim: usize,
    pub thinning: usize,
}

impl Default for HitAndRun {
    fn default() -> Self {
        Self {
            burn_in_per_dim: 50,
            thinning: 10,
        }
    }
}

impl HitAndRun {
    /// `count` approximately uniform points from a chain started at the
    /// interior point `start`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        p: &HPolytope,
        start: &DVector<f64>,
        count: usize,
        rng: &mut R,
    ) -> Vec<DVector<f64>> {
        let n = p.dim();
        let mut x = start.clone();
        let mut out = Vec::with_capacity(count);
        let burn = self.burn_in_per_dim * n;
        let step = |x: &mut DVector<f64>, rng: &mut R| {
            let mut d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let nrm = d.norm();
            if nrm == 0.0 {
                return;
            }
            d /= nrm;
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 0..p.n_rows() {
                let a = dot_row(&p.normals, i, &d);
                let slack = (p.offsets[i] - dot_row(&p.normals, i, x)).max(0.0);
                if a > 1e-300 {
                    hi = hi.min(slack / a);
                } else if a < -1e-300 {
                    lo = lo.max(slack / a);
                }
            }
            if lo.is_finite() && hi.is_finite() && hi > lo {
                let t = rng.random_range(lo..=hi);
                x.axpy(t, &d, 1.0);
            }
        };
        for _ in 0..burn {
            step(&mut x, rng);
        }
        while out.len() < count {
            for _ in 0..self.thinning {
                step(&mut x, rng);
            }
            out.push(x.clone());
        }
        out
    }
}

/// `count` points approximately uniform on `p`, deterministic given `seed`.
pub fn sample_uniform(p: &VPolytope, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    if p.is_singleton() {
        return Ok(vec![p.vertices[0].clone(); count]);
    }
    let h = p.to_hpolytope()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(HitAndRun::default().sample(&h, &p.centroid(), count, &mut rng))
}

/// Uniform draw from an axis-aligned box; `Unsupported` for general polytopes.
pub fn sample_box<R: Rng + ?Sized>(set: &HPolytope, rng: &mut R) -> Result<DVector<f64>> {
    let (lo, hi) = set.box_bounds().ok_or_else(|| GeometryError::Unsupported("set is not an axis-aligned box".into()))?;
    Ok(DVector::from_fn(lo.len(), |i, _| {
        if hi[i] > lo[i] {
            rng.random_range(lo[i]..=hi[i])
        } else {
            lo[i]
        }
    }))
}

/// Either representation, as read from a JSON document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Polytope {
    H(HPolytope),
    V(VPolytope),
}
