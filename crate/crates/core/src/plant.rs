//! Uncertain linear plant `x⁺ = A(θ)x + B(θ)u + Fw` with affine parameter dependence.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, SolveStatus, SolverSettings, SymExpr};
use crate::geometry::{self, GeometryError, HPolytope, VPolytope};

/// Singular-value threshold for rank certificates.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("disturbance outside W (residual {0:.3e})")]
    DisturbanceOutsideSet(f64),
    #[error("parameter vector has non-finite entries")]
    NonFiniteParameter,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

pub type Result<T> = std::result::Result<T, PlantError>;

/// A point in parameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(DVector<f64>);

impl ParamVector {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if theta.iter().all(|v| v.is_finite()) {
            Ok(Self(theta))
        } else {
            Err(PlantError::NonFiniteParameter)
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = PlantError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ParamVector::new(DVector::from_vec(v))
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0.iter().copied().collect()
    }
}

/// Row-major matrix as written in config files.
pub type MatrixRows = Vec<Vec<f64>>;

pub fn matrix_from_rows(rows: &MatrixRows) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PlantError::Dimension("ragged matrix".into()));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> MatrixRows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Serializable description of an [`UncertainModel`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub a: Vec<MatrixRows>,
    pub b: Vec<MatrixRows>,
    pub f: MatrixRows,
    pub w: HPolytope,
    pub s: HPolytope,
    pub k: MatrixRows,
}

impl ModelSpec {
    /// Second-order system with three uncertain parameters used in the numerical study.
    pub fn second_order_example() -> Self {
        let m = |rows: &[&[f64]]| rows.iter().map(|r| r.to_vec()).collect::<MatrixRows>();
        ModelSpec {
            a: vec![
                m(&[&[0.5, 0.2], &[-0.1, 0.6]]),
                m(&[&[0.042, 0.0], &[0.072, 0.03]]),
                m(&[&[0.015, 0.019], &[0.009, 0.035]]),
                m(&[&[0.0, 0.0], &[0.0, 0.0]]),
            ],
            b: vec![
                m(&[&[0.0], &[0.5]]),
                m(&[&[0.0], &[0.0]]),
                m(&[&[0.0], &[0.0]]),
                m(&[&[0.040], &[0.054]]),
            ],
            f: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            w: HPolytope::inf_ball(2, 0.05),
            s: HPolytope::inf_ball(1, 0.005),
            k: m(&[&[0.017, -0.41]]),
        }
    }
}

/// `(A_i, B_i)_{i=0..p}`, disturbance map `F`, sets `W` and `S`, and feedback gain `K`.
#[derive(Clone, Debug)]
pub struct UncertainModel {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    f: DMatrix<f64>,
    w: HPolytope,
    s: HPolytope,
    k: DMatrix<f64>,
    w_vertices: VPolytope,
    s_vertices: VPolytope,
    fw: HPolytope,
}

impl UncertainModel {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        f: DMatrix<f64>,
        w: HPolytope,
        s: HPolytope,
        k: DMatrix<f64>,
    ) -> Result<Self> {
        let dim = |msg: &str| PlantError::Dimension(msg.to_string());
        if a.is_empty() || a.len() != b.len() {
            return Err(dim("need p+1 matrices A_i and B_i"));
        }
        let nx = a[0].nrows();
        let nu = b[0].ncols();
        if a.iter().any(|m| m.shape() != (nx, nx)) {
            return Err(dim("A_i must be n_x × n_x"));
        }
        if b.iter().any(|m| m.shape() != (nx, nu)) {
            return Err(dim("B_i must be n_x × n_u"));
        }
        if f.nrows() != nx || w.dim() != f.ncols() {
            return Err(dim("F must be n_x × n_w with W in R^{n_w}"));
        }
        if k.shape() != (nu, nx) || s.dim() != nu {
            return Err(dim("K must be n_u × n_x with S in R^{n_u}"));
        }
        let w_vertices = w.vertices()?;
        let s_vertices = s.vertices()?;
        let fw = image_hpolytope(&f, &w, &w_vertices)?;
        Ok(Self {
            a,
            b,
            f,
            w,
            s,
            k,
            w_vertices,
            s_vertices,
            fw,
        })
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let a = spec.a.iter().map(matrix_from_rows).collect::<Result<Vec<_>>>()?;
        let b = spec.b.iter().map(matrix_from_rows).collect::<Result<Vec<_>>>()?;
        Self::new(
            a,
            b,
            matrix_from_rows(&spec.f)?,
            spec.w.clone(),
            spec.s.clone(),
            matrix_from_rows(&spec.k)?,
        )
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            a: self.a.iter().map(matrix_to_rows).collect(),
            b: self.b.iter().map(matrix_to_rows).collect(),
            f: matrix_to_rows(&self.f),
            w: self.w.clone(),
            s: self.s.clone(),
            k: matrix_to_rows(&self.k),
        }
    }

    pub fn nx(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn nu(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn nw(&self) -> usize {
        self.f.ncols()
    }

    /// Number of uncertain parameters.
    pub fn np(&self) -> usize {
        self.a.len() - 1
    }

    pub fn a_terms(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b_terms(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn w_set(&self) -> &HPolytope {
        &self.w
    }

    pub fn s_set(&self) -> &HPolytope {
        &self.s
    }

    pub fn w_vertices(&self) -> &VPolytope {
        &self.w_vertices
    }

    pub fn s_vertices(&self) -> &VPolytope {
        &self.s_vertices
    }

    /// H-representation of `F W`.
    pub fn fw_set(&self) -> &HPolytope {
        &self.fw
    }

    fn check_theta(&self, theta: &DVector<f64>) {
        assert_eq!(theta.len(), self.np(), "parameter dimension");
    }

    /// `(A(θ), B(θ))`
    pub fn eval_ab(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        self.check_theta(theta);
        let mut a = self.a[0].clone();
        let mut b = self.b[0].clone();
        for i in 0..self.np() {
            a += &self.a[i + 1] * theta[i];
            b += &self.b[i + 1] * theta[i];
        }
        (a, b)
    }

    /// `A(θ) + B(θ)K`
    pub fn closed_loop(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let (a, b) = self.eval_ab(theta);
        a + b * &self.k
    }

    /// `Φ(x, u)`: column `i` is `A_i x + B_i u`.
    pub fn regressor(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(self.nx(), self.np());
        for i in 0..self.np() {
            phi.set_column(i, &(&self.a[i + 1] * x + &self.b[i + 1] * u));
        }
        phi
    }

    /// `φ(x, u) = A₀x + B₀u`
    pub fn regressor_offset(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a[0] * x + &self.b[0] * u
    }

    /// `x⁺ = A(θ)x + B(θ)u + Fw`; `w` must lie in `W`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let res = self.w.max_residual(w);
        if res > geometry::CONTAINMENT_TOL {
            return Err(PlantError::DisturbanceOutsideSet(res));
        }
        let (a, b) = self.eval_ab(theta);
        Ok(a * x + b * u + &self.f * w)
    }

    /// Quadratic-stabilizability certificate for `A_K(θ)` over the given parameter vertices:
    /// finds `P ⪰ I` with `P − A_Kᵀ P A_K ⪰ I` at every vertex.
    pub fn lyapunov_certificate(&self, vertices: &VPolytope) -> Result<LyapunovCertificate> {
        let n = self.nx();
        let mut prog = ConicProgram::new();
        let p = prog.add_symmetric("P", n);
        let mut lower = SymExpr::zeros(n);
        lower.add_symmetric_block(&p, 1.0);
        lower.add_constant(&(-DMatrix::<f64>::identity(n, n)))?;
        prog.add_psd(lower);
        let aks: Vec<DMatrix<f64>> = vertices.vertices().iter().map(|v| self.closed_loop(v)).collect();
        for ak in &aks {
            let mut e = SymExpr::zeros(n);
            e.add_symmetric_block(&p, 1.0);
            // − A_Kᵀ P A_K, expanded over the entries of P.
            for c in 0..n {
                for r in 0..=c {
                    let mut unit = DMatrix::zeros(n, n);
                    unit[(r, c)] = 1.0;
                    unit[(c, r)] = 1.0;
                    let term = ak.transpose() * unit * ak;
                    e.add_matrix_term(p.sym(r, c), &(-term))?;
                }
            }
            e.add_constant(&(-DMatrix::<f64>::identity(n, n)))?;
            prog.add_psd(e);
        }
        for i in 0..n {
            prog.add_linear_cost(p.sym(i, i), 1.0);
        }
        let radii: Vec<f64> = aks.iter().map(spectral_radius).collect();
        let out = conic::solve(&prog, &SolverSettings::default())?;
        let (holds, matrix) = match out.status {
            SolveStatus::Optimal => (true, Some(out.symmetric_value(&p))),
            _ => (false, None),
        };
        Ok(LyapunovCertificate {
            holds,
            matrix,
            spectral_radii: radii,
        })
    }

    /// Minimum singular value of the controllability matrix of `(A_K(θ), B(θ))`.
    pub fn reachability_margin(&self, theta: &DVector<f64>) -> f64 {
        let ak = self.closed_loop(theta);
        let (_, b) = self.eval_ab(theta);
        let n = self.nx();
        let m = self.nu();
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut blk = b.clone();
        for i in 0..n {
            ctrb.columns_mut(i * m, m).copy_from(&blk);
            blk = &ak * blk;
        }
        min_singular_value(&ctrb)
    }

    /// Minimum singular value of `[vec(A_i); vec(B_i)]_{i=1..p}` (parameter identifiability).
    pub fn identifiability_margin(&self) -> f64 {
        let rows = self.nx() * self.nx() + self.nx() * self.nu();
        let mut m = DMatrix::zeros(rows, self.np());
        for i in 0..self.np() {
            let col: Vec<f64> = self.a[i + 1].iter().chain(self.b[i + 1].iter()).copied().collect();
            m.set_column(i, &DVector::from_vec(col));
        }
        min_singular_value(&m)
    }
}

/// Result of [`UncertainModel::lyapunov_certificate`].
#[derive(Clone, Debug)]
pub struct LyapunovCertificate {
    pub holds: bool,
    pub matrix: Option<DMatrix<f64>>,
    /// Spectral radius of `A_K` at each vertex, in vertex order.
    pub spectral_radii: Vec<f64>,
}

impl LyapunovCertificate {
    /// Index of the first vertex whose closed loop is not Schur stable.
    pub fn unstable_vertex(&self) -> Option<usize> {
        self.spectral_radii.iter().position(|&r| r >= 1.0)
    }
}

/// Smallest singular value, or 0 when there are fewer columns than independent
/// directions to certify.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() < m.ncols() || m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn image_hpolytope(f: &DMatrix<f64>, w: &HPolytope, w_vertices: &VPolytope) -> Result<HPolytope> {
    if f.is_square() {
        if let Some(inv) = f.clone().try_inverse() {
            let zero = DVector::zeros(f.nrows());
            return Ok(w.preimage(&inv, &zero)?);
        }
    }
    Ok(w_vertices.affine_map(f, &DVector::zeros(f.nrows()))?.to_hpolytope()?)
}

/// Recorded closed-loop data. `states` has one more entry than the other series.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub noises: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(x0: DVector<f64>) -> Self {
        Self {
            states: vec![x0],
            ..Default::default()
        }
    }

    /// Number of recorded transitions.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn current_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has an initial state")
    }

    pub fn push(&mut self, u: DVector<f64>, w: DVector<f64>, s: DVector<f64>, x_next: DVector<f64>) {
        self.inputs.push(u);
        self.disturbances.push(w);
        self.noises.push(s);
        self.states.push(x_next);
    }

    /// Largest `‖x_{t+1} − φ_t − Φ_t θ − F w_t‖_∞` over the record.
    pub fn replay_residual(&self, model: &UncertainModel, theta: &DVector<f64>) -> f64 {
        (0..self.len())
            .map(|t| {
                let (x, u) = (&self.states[t], &self.inputs[t]);
                let pred = model.regressor_offset(x, u) + model.regressor(x, u) * theta + model.f() * &self.disturbances[t];
                (&self.states[t + 1] - pred).amax()
            })
            .fold(0.0, f64::max)
    }
}
