//! Convex program description (LP / QP / SDP with small PSD blocks) and the
//! solver boundary.
//!
//! Programs are built as named variable blocks plus affine constraints:
//!
//! ```text
//!   minimize    ½ xᵀ P x + qᵀ x + c
//!   subject to  a_iᵀ x + b_i  = 0        (equalities)
//!               a_jᵀ x + b_j ≤ 0         (inequalities)
//!               C_k + Σ_l x_l M_{k,l} ⪰ 0  (PSD blocks, symmetric by construction)
//! ```
//!
//! The backend is the Clarabel interior-point solver. Every reported optimum
//! is re-checked here against the original program so that `Optimal` never
//! depends on the backend's own residual bookkeeping.

use std::time::{Duration, Instant};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

/// Residual threshold behind the `Optimal` status.
pub const RESIDUAL_TOL: f64 = 1e-6;

/// Hessian eigenvalues below this are rejected as non-convex.
pub const HESSIAN_EIG_TOL: f64 = -1e-9;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("objective Hessian is not PSD (min eigenvalue {0:.3e})")]
    NonConvexObjective(f64),
    #[error("matrix term is not symmetric (max asymmetry {0:.3e})")]
    AsymmetricTerm(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("variable index {0} out of range ({1} variables)")]
    UnknownVariable(usize, usize),
    #[error("backend rejected program: {0}")]
    Backend(String),
}

/// Flat index of a scalar decision variable.
pub type VarId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BlockShape {
    Scalar,
    Vector(usize),
    /// Symmetric `n × n` matrix stored as its upper triangle (column-major).
    Symmetric(usize),
}

impl BlockShape {
    pub fn len(&self) -> usize {
        match *self {
            BlockShape::Scalar => 1,
            BlockShape::Vector(n) => n,
            BlockShape::Symmetric(n) => n * (n + 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VarBlock {
    pub name: String,
    pub shape: BlockShape,
    pub offset: usize,
}

impl VarBlock {
    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    /// `i`-th scalar of the block.
    pub fn var(&self, i: usize) -> VarId {
        assert!(i < self.len(), "index {i} outside block {}", self.name);
        self.offset + i
    }

    /// Entry `(i, j)` of a symmetric block; `(i, j)` and `(j, i)` share a variable.
    pub fn sym(&self, i: usize, j: usize) -> VarId {
        let BlockShape::Symmetric(n) = self.shape else {
            panic!("block {} is not symmetric", self.name);
        };
        assert!(i < n && j < n);
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.offset + triu_index(r, c)
    }
}

/// Position of `(r, c)`, `r ≤ c`, in column-major upper-triangle order.
fn triu_index(r: usize, c: usize) -> usize {
    c * (c + 1) / 2 + r
}

/// Affine scalar expression `Σ coef·x_var + constant`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: VarId) -> Self {
        Self {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(mut self, v: VarId, coef: f64) -> Self {
        self.add_term(v, coef);
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn add_term(&mut self, v: VarId, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) {
        for &(v, c) in &other.terms {
            self.add_term(v, scale * c);
        }
        self.constant += scale * other.constant;
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        LinExpr {
            terms: self.terms.iter().map(|&(v, c)| (v, c * s)).collect(),
            constant: self.constant * s,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }
}

/// Affine symmetric matrix expression, stored as upper-triangle entries.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SymExpr {
    dim: usize,
    entries: Vec<LinExpr>,
}

impl SymExpr {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![LinExpr::new(); dim * (dim + 1) / 2],
        }
    }

    pub fn from_constant(c: &DMatrix<f64>) -> Result<Self, ConicError> {
        let mut e = Self::zeros(c.nrows());
        e.add_constant(c)?;
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> &LinExpr {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        &self.entries[triu_index(r, c)]
    }

    fn entry_mut(&mut self, r: usize, c: usize) -> &mut LinExpr {
        &mut self.entries[triu_index(r, c)]
    }

    fn check_term(&self, m: &DMatrix<f64>) -> Result<(), ConicError> {
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(ConicError::Dimension(format!(
                "{}x{} term for {}x{} expression",
                m.nrows(),
                m.ncols(),
                self.dim,
                self.dim
            )));
        }
        let asym = (m - m.transpose()).abs().max();
        let scale = m.abs().max().max(1.0);
        if asym > SYMMETRY_TOL * scale {
            return Err(ConicError::AsymmetricTerm(asym));
        }
        Ok(())
    }

    pub fn add_constant(&mut self, m: &DMatrix<f64>) -> Result<(), ConicError> {
        self.check_term(m)?;
        for c in 0..self.dim {
            for r in 0..=c {
                self.entry_mut(r, c).constant += m[(r, c)];
            }
        }
        Ok(())
    }

    /// Adds `x_v · m`.
    pub fn add_matrix_term(&mut self, v: VarId, m: &DMatrix<f64>) -> Result<(), ConicError> {
        self.check_term(m)?;
        for c in 0..self.dim {
            for r in 0..=c {
                self.entry_mut(r, c).add_term(v, m[(r, c)]);
            }
        }
        Ok(())
    }

    /// Adds `expr · m` for an affine scalar `expr`.
    pub fn add_affine_term(&mut self, expr: &LinExpr, m: &DMatrix<f64>) -> Result<(), ConicError> {
        self.check_term(m)?;
        for c in 0..self.dim {
            for r in 0..=c {
                let entry = self.entry_mut(r, c);
                let mrc = m[(r, c)];
                if mrc != 0.0 {
                    for &(v, coef) in &expr.terms {
                        entry.add_term(v, coef * mrc);
                    }
                    entry.constant += expr.constant * mrc;
                }
            }
        }
        Ok(())
    }

    /// Adds `coef · x_v · I`.
    pub fn add_identity_term(&mut self, v: VarId, coef: f64) {
        for i in 0..self.dim {
            self.entry_mut(i, i).add_term(v, coef);
        }
    }

    /// Adds `coef · X` where `X` is a symmetric variable block.
    pub fn add_symmetric_block(&mut self, block: &VarBlock, coef: f64) {
        assert_eq!(block.shape, BlockShape::Symmetric(self.dim));
        for c in 0..self.dim {
            for r in 0..=c {
                let v = block.sym(r, c);
                self.entry_mut(r, c).add_term(v, coef);
            }
        }
    }

    pub fn add_expr(&mut self, other: &SymExpr, scale: f64) {
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.add_expr(b, scale);
        }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for c in 0..self.dim {
            for r in 0..=c {
                let v = self.entry(r, c).eval(x);
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Constraint {
    /// `expr = 0`
    Eq(LinExpr),
    /// `expr ≤ 0`
    Le(LinExpr),
    /// `expr ⪰ 0`
    Psd(SymExpr),
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ConicProgram {
    blocks: Vec<VarBlock>,
    n_vars: usize,
    /// Hessian entries `(i, j, value)` with `i ≤ j`; the objective is `½ xᵀPx`.
    hessian: Vec<(VarId, VarId, f64)>,
    linear: Vec<(VarId, f64)>,
    objective_constant: f64,
    constraints: Vec<Constraint>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_block(&mut self, name: &str, shape: BlockShape) -> VarBlock {
        let block = VarBlock {
            name: name.to_string(),
            shape,
            offset: self.n_vars,
        };
        self.n_vars += shape.len();
        self.blocks.push(block.clone());
        block
    }

    pub fn add_scalar(&mut self, name: &str) -> VarBlock {
        self.add_block(name, BlockShape::Scalar)
    }

    pub fn add_vector(&mut self, name: &str, n: usize) -> VarBlock {
        self.add_block(name, BlockShape::Vector(n))
    }

    pub fn add_symmetric(&mut self, name: &str, n: usize) -> VarBlock {
        self.add_block(name, BlockShape::Symmetric(n))
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn blocks(&self) -> &[VarBlock] {
        &self.blocks
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    /// Adds `value` to `P[i][j]` (and to `P[j][i]`), with objective `½ xᵀPx`.
    pub fn add_hessian(&mut self, i: VarId, j: VarId, value: f64) {
        if value == 0.0 {
            return;
        }
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.hessian.push((a, b, value));
    }

    pub fn add_linear_cost(&mut self, v: VarId, coef: f64) {
        if coef != 0.0 {
            self.linear.push((v, coef));
        }
    }

    pub fn add_objective_constant(&mut self, c: f64) {
        self.objective_constant += c;
    }

    pub fn add_eq(&mut self, expr: LinExpr) {
        self.constraints.push(Constraint::Eq(expr));
    }

    /// `expr ≤ 0`
    pub fn add_le(&mut self, expr: LinExpr) {
        self.constraints.push(Constraint::Le(expr));
    }

    /// `expr ≥ 0`
    pub fn add_ge(&mut self, expr: LinExpr) {
        self.constraints.push(Constraint::Le(expr.scaled(-1.0)));
    }

    pub fn add_psd(&mut self, expr: SymExpr) {
        self.constraints.push(Constraint::Psd(expr));
    }

    pub fn hessian_dense(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.n_vars, self.n_vars);
        for &(i, j, v) in &self.hessian {
            p[(i, j)] += v;
            if i != j {
                p[(j, i)] += v;
            }
        }
        p
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut val = self.objective_constant;
        for &(v, c) in &self.linear {
            val += c * x[v];
        }
        for &(i, j, p) in &self.hessian {
            let w = if i == j { 0.5 } else { 1.0 };
            val += w * p * x[i] * x[j];
        }
        val
    }

    /// Checks variable indices and objective convexity.
    pub fn validate(&self) -> Result<(), ConicError> {
        let n = self.n_vars;
        let check = |v: VarId| {
            if v >= n {
                Err(ConicError::UnknownVariable(v, n))
            } else {
                Ok(())
            }
        };
        for &(i, j, _) in &self.hessian {
            check(i)?;
            check(j)?;
        }
        for &(v, _) in &self.linear {
            check(v)?;
        }
        for con in &self.constraints {
            match con {
                Constraint::Eq(e) | Constraint::Le(e) => {
                    for &(v, _) in &e.terms {
                        check(v)?;
                    }
                }
                Constraint::Psd(s) => {
                    for e in &s.entries {
                        for &(v, _) in &e.terms {
                            check(v)?;
                        }
                    }
                }
            }
        }
        if !self.hessian.is_empty() {
            let p = self.hessian_dense();
            let scale = p.abs().max().max(1.0);
            let min_eig = SymmetricEigen::new(p).eigenvalues.min();
            if min_eig < HESSIAN_EIG_TOL * scale {
                return Err(ConicError::NonConvexObjective(min_eig));
            }
        }
        Ok(())
    }

    /// JSON debug dump, used to reproduce solver failures offline.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("program serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SolverSettings {
    pub feasibility_tol: f64,
    pub gap_tol: f64,
    pub max_iter: u32,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-8,
            gap_tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl SolverSettings {
    /// Reduced accuracy profile for long Monte-Carlo runs.
    pub fn loose() -> Self {
        Self {
            feasibility_tol: 1e-6,
            gap_tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveStats {
    pub iterations: u32,
    pub solve_time: Duration,
    pub backend_status: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ResidualReport {
    pub max_eq_residual: f64,
    pub max_ineq_violation: f64,
    /// `+∞` when the program has no PSD blocks.
    pub min_psd_eigenvalue: f64,
    /// Largest violation divided by `max(1, magnitude)` of the offending constraint,
    /// where the magnitude sums the absolute values of its terms at `x`.
    pub max_relative_violation: f64,
}

impl ResidualReport {
    /// Every constraint holds within `tol` relative to its own magnitude.
    pub fn within(&self, tol: f64) -> bool {
        self.max_relative_violation <= tol
    }

    pub fn worst(&self) -> f64 {
        self.max_eq_residual
            .max(self.max_ineq_violation)
            .max(-self.min_psd_eigenvalue.min(0.0))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub stats: SolveStats,
    pub residuals: ResidualReport,
}

impl SolveOutcome {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.x[v]
    }

    pub fn block_values(&self, block: &VarBlock) -> Vec<f64> {
        self.x[block.offset..block.offset + block.len()].to_vec()
    }

    pub fn symmetric_value(&self, block: &VarBlock) -> DMatrix<f64> {
        let BlockShape::Symmetric(n) = block.shape else {
            panic!("block {} is not symmetric", block.name);
        };
        DMatrix::from_fn(n, n, |i, j| self.x[block.sym(i, j)])
    }
}

pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => f64::INFINITY,
        1 => m[(0, 0)],
        _ => SymmetricEigen::new(m.clone()).eigenvalues.min(),
    }
}

/// Residuals of `x` against every constraint of `program`.
pub fn verify_solution(program: &ConicProgram, x: &[f64]) -> ResidualReport {
    let mut report = ResidualReport {
        min_psd_eigenvalue: f64::INFINITY,
        ..Default::default()
    };
    let magnitude = |e: &LinExpr| e.constant.abs() + e.terms.iter().map(|&(v, c)| (c * x[v]).abs()).sum::<f64>();
    let mut relative = |violation: f64, scale: f64| {
        report.max_relative_violation = report.max_relative_violation.max(violation / scale.max(1.0));
    };
    let mut eq = 0.0f64;
    let mut ineq = 0.0f64;
    let mut psd = f64::INFINITY;
    for con in &program.constraints {
        match con {
            Constraint::Eq(e) => {
                let r = e.eval(x).abs();
                eq = eq.max(r);
                relative(r, magnitude(e));
            }
            Constraint::Le(e) => {
                let r = e.eval(x).max(0.0);
                ineq = ineq.max(r);
                relative(r, magnitude(e));
            }
            Constraint::Psd(s) => {
                let lam = smallest_eigenvalue(&s.eval(x));
                psd = psd.min(lam);
                let n = s.dim();
                let scale = (0..n)
                    .flat_map(|i| (i..n).map(move |j| (i, j)))
                    .map(|(i, j)| magnitude(s.entry(i, j)))
                    .fold(0.0, f64::max);
                relative((-lam).max(0.0), scale);
            }
        }
    }
    report.max_eq_residual = eq;
    report.max_ineq_violation = ineq;
    report.min_psd_eigenvalue = psd;
    report
}

/// Backend problem data in Clarabel's `Ax + s = b, s ∈ K` form.
struct BackendData {
    p: CscMatrix<f64>,
    q: Vec<f64>,
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

fn lower_program(program: &ConicProgram) -> BackendData {
    let n = program.n_vars;
    let mut q = vec![0.0; n];
    for &(v, c) in &program.linear {
        q[v] += c;
    }
    // Clarabel expects the upper triangle only.
    let (pi, pj, pv): (Vec<_>, Vec<_>, Vec<_>) = {
        let mut pi = Vec::new();
        let mut pj = Vec::new();
        let mut pv = Vec::new();
        for &(i, j, v) in &program.hessian {
            pi.push(i);
            pj.push(j);
            pv.push(v);
        }
        (pi, pj, pv)
    };
    let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

    let mut ai = Vec::new();
    let mut aj = Vec::new();
    let mut av = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut row = 0usize;

    // a·x + c = 0   →   (a)x + s = -c, s ∈ {0}
    // a·x + c ≤ 0   →   (a)x + s = -c, s ≥ 0
    let mut push_row = |e: &LinExpr, row: &mut usize, b: &mut Vec<f64>| {
        for &(v, c) in &e.terms {
            ai.push(*row);
            aj.push(v);
            av.push(c);
        }
        b.push(-e.constant);
        *row += 1;
    };

    let eqs: Vec<&LinExpr> = program
        .constraints
        .iter()
        .filter_map(|c| match c {
            Constraint::Eq(e) => Some(e),
            _ => None,
        })
        .collect();
    for e in &eqs {
        push_row(e, &mut row, &mut b);
    }
    if !eqs.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(eqs.len()));
    }

    // Scalar PSD blocks are ordinary inequalities: m(x) ≥ 0  ⇔  -m(x) ≤ 0.
    let mut n_le = 0;
    for con in &program.constraints {
        match con {
            Constraint::Le(e) => {
                push_row(e, &mut row, &mut b);
                n_le += 1;
            }
            Constraint::Psd(s) if s.dim == 1 => {
                push_row(&s.entries[0].scaled(-1.0), &mut row, &mut b);
                n_le += 1;
            }
            _ => {}
        }
    }
    if n_le > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_le));
    }

    // s = svec(M(x)) = svec(C) + Σ x_l svec(M_l), so b = svec(C), A = -svec(M_l).
    for con in &program.constraints {
        if let Constraint::Psd(s) = con {
            if s.dim < 2 {
                continue;
            }
            for c in 0..s.dim {
                for r in 0..=c {
                    let scale = if r == c { 1.0 } else { std::f64::consts::SQRT_2 };
                    let e = s.entry(r, c);
                    for &(v, coef) in &e.terms {
                        ai.push(row);
                        aj.push(v);
                        av.push(-scale * coef);
                    }
                    b.push(scale * e.constant);
                    row += 1;
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(s.dim));
        }
    }

    let a = CscMatrix::new_from_triplets(row, n, ai, aj, av);
    BackendData { p, q, a, b, cones }
}

/// Solves `program`. Backend failures are reported through the outcome status,
/// never by panicking; only malformed programs produce an `Err`.
pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> Result<SolveOutcome, ConicError> {
    program.validate()?;
    let start = Instant::now();
    let n = program.n_vars;

    if program.constraints.is_empty() && program.hessian.is_empty() {
        // Pure linear objective without constraints.
        let bounded = program.linear.iter().all(|&(_, c)| c == 0.0);
        let x = vec![0.0; n];
        return Ok(SolveOutcome {
            status: if bounded {
                SolveStatus::Optimal
            } else {
                SolveStatus::Unbounded
            },
            objective: program.objective(&x),
            residuals: verify_solution(program, &x),
            x,
            stats: SolveStats {
                iterations: 0,
                solve_time: start.elapsed(),
                backend_status: "trivial".into(),
            },
        });
    }

    let data = lower_program(program);
    let backend_settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_feas(settings.feasibility_tol)
        .tol_gap_abs(settings.gap_tol)
        .tol_gap_rel(settings.gap_tol)
        .max_iter(settings.max_iter)
        .presolve_enable(false)
        .build()
        .map_err(|e| ConicError::Backend(e.to_string()))?;
    let mut solver = DefaultSolver::new(&data.p, &data.q, &data.a, &data.b, &data.cones, backend_settings)
        .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
    solver.solve();

    let sol = &solver.solution;
    let x = sol.x.clone();
    let residuals = verify_solution(program, &x);
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            if residuals.within(RESIDUAL_TOL) {
                SolveStatus::Optimal
            } else {
                SolveStatus::NumericalFailure
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::NumericalFailure,
    };
    Ok(SolveOutcome {
        status,
        objective: program.objective(&x),
        x,
        residuals,
        stats: SolveStats {
            iterations: sol.iterations,
            solve_time: start.elapsed(),
            backend_status: format!("{:?}", sol.status),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn one_dimensional_lp() {
        // min x s.t. x ≥ 3
        let mut prog = ConicProgram::new();
        let x = prog.add_scalar("x").var(0);
        prog.add_linear_cost(x, 1.0);
        prog.add_ge(LinExpr::var(x).plus(-3.0));
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!(close(out.value(x), 3.0, 1e-7));
        assert!(out.residuals.within(1e-6));
    }

    fn projection_qp() -> (ConicProgram, VarBlock) {
        // min ‖x − (2,0)‖² over the unit box
        let mut prog = ConicProgram::new();
        let xb = prog.add_vector("x", 2);
        let c = [2.0, 0.0];
        for i in 0..2 {
            let v = xb.var(i);
            prog.add_hessian(v, v, 2.0);
            prog.add_linear_cost(v, -2.0 * c[i]);
            prog.add_objective_constant(c[i] * c[i]);
            prog.add_le(LinExpr::var(v).plus(-1.0));
            prog.add_ge(LinExpr::var(v).plus(1.0));
        }
        (prog, xb)
    }

    #[test]
    fn projection_onto_box() {
        let (prog, xb) = projection_qp();
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        let x = out.block_values(&xb);
        assert!(close(x[0], 1.0, 1e-6) && close(x[1], 0.0, 1e-6), "{x:?}");
        assert!(close(out.objective, 1.0, 1e-6));
    }

    #[test]
    fn perturbed_primal_reports_violation() {
        let (prog, xb) = projection_qp();
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        let mut x = out.x.clone();
        x[xb.var(0)] += 0.1;
        let rep = verify_solution(&prog, &x);
        assert!(close(rep.max_ineq_violation, 0.1, 1e-6), "{rep:?}");
    }

    fn eigen_sdp() -> (ConicProgram, VarId) {
        // max β s.t. diag(1,2) − βI ⪰ 0
        let mut prog = ConicProgram::new();
        let beta = prog.add_scalar("beta").var(0);
        prog.add_linear_cost(beta, -1.0);
        let mut lmi = SymExpr::from_constant(&DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0])).unwrap();
        lmi.add_identity_term(beta, -1.0);
        prog.add_psd(lmi);
        (prog, beta)
    }

    #[test]
    fn eigenvalue_sdp() {
        let (prog, beta) = eigen_sdp();
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!(close(out.value(beta), 1.0, 1e-6));
        assert!(out.residuals.min_psd_eigenvalue >= -1e-6);
    }

    #[test]
    fn psd_block_violation_reported() {
        let (prog, beta) = eigen_sdp();
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        let mut x = out.x.clone();
        x[beta] += 0.5;
        let rep = verify_solution(&prog, &x);
        assert!(close(rep.min_psd_eigenvalue, -0.5, 1e-6), "{rep:?}");
    }

    #[test]
    fn off_diagonal_entries_use_correct_scaling() {
        // max β s.t. [[2, 1], [1, 2]] − βI ⪰ 0  →  β* = 1
        let mut prog = ConicProgram::new();
        let beta = prog.add_scalar("beta").var(0);
        prog.add_linear_cost(beta, -1.0);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let mut lmi = SymExpr::from_constant(&c).unwrap();
        lmi.add_identity_term(beta, -1.0);
        prog.add_psd(lmi);
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        assert!(close(out.value(beta), 1.0, 1e-6), "{}", out.value(beta));
    }

    #[test]
    fn symmetric_block_variable() {
        // max tr(X) s.t. X ⪯ [[1, .5], [.5, 1]]  →  tr = 2
        let mut prog = ConicProgram::new();
        let xb = prog.add_symmetric("X", 2);
        prog.add_linear_cost(xb.sym(0, 0), -1.0);
        prog.add_linear_cost(xb.sym(1, 1), -1.0);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let mut lmi = SymExpr::from_constant(&c).unwrap();
        lmi.add_symmetric_block(&xb, -1.0);
        prog.add_psd(lmi);
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!(close(-out.objective, 2.0, 1e-6));
        let x = out.symmetric_value(&xb);
        assert!((x - c).abs().max() < 1e-4);
    }

    #[test]
    fn asymmetric_term_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(SymExpr::from_constant(&m), Err(ConicError::AsymmetricTerm(_))));
    }

    #[test]
    fn non_convex_objective_rejected() {
        let mut prog = ConicProgram::new();
        let x = prog.add_scalar("x").var(0);
        prog.add_hessian(x, x, -1.0);
        assert!(matches!(solve(&prog, &SolverSettings::default()), Err(ConicError::NonConvexObjective(_))));
    }

    #[test]
    fn infeasible_and_unbounded_statuses() {
        let mut prog = ConicProgram::new();
        let x = prog.add_scalar("x").var(0);
        prog.add_le(LinExpr::var(x).plus(-1.0));
        prog.add_ge(LinExpr::var(x).plus(-2.0));
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Infeasible);

        let mut prog = ConicProgram::new();
        let x = prog.add_scalar("x").var(0);
        prog.add_linear_cost(x, -1.0);
        prog.add_ge(LinExpr::var(x));
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Unbounded);
    }

    #[test]
    fn equality_constraints() {
        // min x² + y² s.t. x + y = 1
        let mut prog = ConicProgram::new();
        let b = prog.add_vector("xy", 2);
        prog.add_hessian(b.var(0), b.var(0), 2.0);
        prog.add_hessian(b.var(1), b.var(1), 2.0);
        prog.add_eq(LinExpr::var(b.var(0)).term(b.var(1), 1.0).plus(-1.0));
        let out = solve(&prog, &SolverSettings::default()).unwrap();
        assert!(close(out.value(b.var(0)), 0.5, 1e-6));
        assert!(out.residuals.max_eq_residual < 1e-7);
    }

    #[test]
    fn program_dump_is_json() {
        let (prog, _) = eigen_sdp();
        let v: serde_json::Value = serde_json::from_str(&prog.to_json()).unwrap();
        assert!(v["constraints"].is_array());
    }
}
