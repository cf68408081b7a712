//! Set-membership parameter identification with fixed facet normals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, LinExpr, SolveStatus, SolverSettings};
use crate::geometry::{GeometryError, HPolytope, Support};
use crate::plant::UncertainModel;

#[derive(Debug, Error)]
pub enum IdentifyError {
    #[error("model falsified: no parameter is consistent with the data at t = {t}")]
    ModelFalsified { t: usize },
    #[error("parameter set estimate is unbounded in row {0}")]
    Unbounded(usize),
    #[error("projection failed: {0}")]
    Projection(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

pub type Result<T> = std::result::Result<T, IdentifyError>;

/// `Θ(μ) = {θ : M_Θ θ ≤ μ}` at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSetEstimate {
    set: HPolytope,
    pub t: usize,
}

impl ParamSetEstimate {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>, t: usize) -> Result<Self> {
        Ok(Self {
            set: HPolytope::new(normals, offsets)?,
            t,
        })
    }

    pub fn from_polytope(set: HPolytope) -> Self {
        Self { set, t: 0 }
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        self.set.normals()
    }

    pub fn offsets(&self) -> &DVector<f64> {
        self.set.offsets()
    }

    pub fn as_polytope(&self) -> &HPolytope {
        &self.set
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    pub fn contains(&self, theta: &DVector<f64>, tol: f64) -> bool {
        self.set.contains_point(theta, tol)
    }
}

/// Parameters consistent with one observed transition.
#[derive(Clone, Debug, PartialEq)]
pub struct UnfalsifiedSet {
    set: HPolytope,
}

impl UnfalsifiedSet {
    /// `R^p`, used for windows reaching before the first transition.
    pub fn everything(p: usize) -> Self {
        Self {
            set: HPolytope::universe(p),
        }
    }

    pub fn as_polytope(&self) -> &HPolytope {
        &self.set
    }

    pub fn contains(&self, theta: &DVector<f64>, tol: f64) -> bool {
        self.set.contains_point(theta, tol)
    }
}

/// `{θ : x_next − A(θ)x_prev − B(θ)u_prev ∈ FW}` as `−HΦθ ≤ h − H(x_next − φ)`.
pub fn unfalsified(
    model: &UncertainModel,
    x_next: &DVector<f64>,
    x_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
) -> UnfalsifiedSet {
    let fw = model.fw_set();
    let phi = model.regressor(x_prev, u_prev);
    let resid = x_next - model.regressor_offset(x_prev, u_prev);
    let normals = -(fw.normals() * phi);
    let offsets = fw.offsets() - fw.normals() * resid;
    UnfalsifiedSet {
        set: HPolytope::new(normals, offsets).expect("conforming dimensions"),
    }
}

/// Tightens every offset of `prev` to the support of `⋂ window ∩ Θ(prev)` along its normal.
pub fn update_param_set(prev: &ParamSetEstimate, window: &[UnfalsifiedSet]) -> Result<ParamSetEstimate> {
    let t = prev.t + 1;
    let mut feasible = prev.set.clone();
    for delta in window {
        feasible = feasible.intersect(&delta.set)?;
    }
    let mut mu = prev.offsets().clone();
    for i in 0..prev.set.n_rows() {
        let d = prev.set.row(i);
        match feasible.support(&d) {
            Ok(Support::Finite(v)) => mu[i] = mu[i].min(v),
            Ok(Support::Unbounded) => {
                if !mu[i].is_finite() {
                    return Err(IdentifyError::Unbounded(i));
                }
            }
            Err(GeometryError::Empty) => return Err(IdentifyError::ModelFalsified { t }),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ParamSetEstimate {
        set: HPolytope::new(prev.normals().clone(), mu)?,
        t,
    })
}

/// Euclidean projection of `theta_prev` onto `Θ_t`.
pub fn project_nominal(theta_prev: &DVector<f64>, theta_set: &ParamSetEstimate) -> Result<DVector<f64>> {
    if theta_set.contains(theta_prev, 0.0) {
        return Ok(theta_prev.clone());
    }
    let p = theta_set.dim();
    let mut prog = ConicProgram::new();
    let th = prog.add_vector("theta", p);
    for j in 0..p {
        // ½·2‖θ − θ̄‖²
        prog.add_hessian(th.var(j), th.var(j), 2.0);
        prog.add_linear_cost(th.var(j), -2.0 * theta_prev[j]);
    }
    let m = theta_set.normals();
    let mu = theta_set.offsets();
    for i in 0..m.nrows() {
        let mut e = LinExpr::constant(-mu[i]);
        for j in 0..p {
            e.add_term(th.var(j), m[(i, j)]);
        }
        prog.add_le(e);
    }
    let out = conic::solve(&prog, &SolverSettings::default())?;
    match out.status {
        SolveStatus::Optimal => {
            let approx = DVector::from_vec(out.block_values(&th));
            Ok(polish_projection(theta_prev, m, mu, &approx).unwrap_or(approx))
        }
        SolveStatus::Infeasible => Err(IdentifyError::ModelFalsified { t: theta_set.t }),
        _ => Err(IdentifyError::Projection(out.stats.backend_status)),
    }
}

/// Active-set refinement of an approximate projection onto `{θ : Mθ ≤ μ}`:
/// solves the KKT system on a working set and repairs it until the
/// multipliers are nonnegative and the point is feasible.
fn polish_projection(
    target: &DVector<f64>,
    m: &DMatrix<f64>,
    mu: &DVector<f64>,
    approx: &DVector<f64>,
) -> Option<DVector<f64>> {
    let r = m.nrows();
    let scale = mu.amax().max(1.0);
    let slack = |x: &DVector<f64>, i: usize| mu[i] - m.row(i).transpose().dot(x);
    let mut work: Vec<usize> = (0..r).filter(|&i| slack(approx, i) <= 1e-3 * scale).collect();
    for _ in 0..2 * r + 2 {
        work = independent_rows(m, &work);
        let (x, lambda) = if work.is_empty() {
            (target.clone(), DVector::zeros(0))
        } else {
            let a = m.select_rows(&work);
            let b = mu.select_rows(&work);
            let chol = (&a * a.transpose()).cholesky()?;
            let lambda = chol.solve(&(&a * target - b));
            (target - a.transpose() * &lambda, lambda)
        };
        if let Some((k, _)) = lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < -1e-12)
            .min_by(|a, b| a.1.total_cmp(b.1))
        {
            work.remove(k);
            continue;
        }
        let worst = (0..r)
            .filter(|i| !work.contains(i))
            .map(|i| (i, -slack(&x, i)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, v)) if v > 1e-12 * scale => work.push(i),
            _ => return Some(x),
        }
    }
    None
}

fn independent_rows(m: &DMatrix<f64>, rows: &[usize]) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for &i in rows {
        let mut v = m.row(i).transpose();
        let n0 = v.norm();
        for q in &basis {
            let c = q.dot(&v);
            v -= q * c;
        }
        if v.norm() > 1e-9 * n0 {
            basis.push(v.normalize());
            keep.push(i);
        }
    }
    keep
}

/// `vol(current) / vol(initial)` for axis-aligned boxes.
pub fn volume_ratio(current: &ParamSetEstimate, initial: &ParamSetEstimate) -> Result<f64> {
    Ok(current.set.box_volume()? / initial.set.box_volume()?)
}

/// Rolling window of the most recent unfalsified sets.
#[derive(Clone, Debug)]
pub struct Identifier {
    initial: ParamSetEstimate,
    current: ParamSetEstimate,
    window: std::collections::VecDeque<UnfalsifiedSet>,
    window_len: usize,
}

impl Identifier {
    pub fn new(initial: ParamSetEstimate, window_len: usize) -> Self {
        Self {
            current: initial.clone(),
            initial,
            window: Default::default(),
            window_len: window_len.max(1),
        }
    }

    pub fn current(&self) -> &ParamSetEstimate {
        &self.current
    }

    pub fn initial(&self) -> &ParamSetEstimate {
        &self.initial
    }

    /// Folds in the transition `(x_prev, u_prev) → x_next`.
    pub fn observe(
        &mut self,
        model: &UncertainModel,
        x_next: &DVector<f64>,
        x_prev: &DVector<f64>,
        u_prev: &DVector<f64>,
    ) -> Result<&ParamSetEstimate> {
        self.window.push_back(unfalsified(model, x_next, x_prev, u_prev));
        while self.window.len() > self.window_len {
            self.window.pop_front();
        }
        let window: Vec<UnfalsifiedSet> = self.window.iter().cloned().collect();
        self.current = update_param_set(&self.current, &window)?;
        Ok(&self.current)
    }

    pub fn volume_ratio(&self) -> Result<f64> {
        volume_ratio(&self.current, &self.initial)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{ModelSpec, UncertainModel};
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn scalar_toy() -> UncertainModel {
        UncertainModel::new(
            vec![DMatrix::zeros(1, 1), DMatrix::identity(1, 1)],
            vec![DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)],
            DMatrix::identity(1, 1),
            HPolytope::inf_ball(1, 0.1),
            HPolytope::inf_ball(1, 0.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap()
    }

    fn interval(p: &HPolytope) -> (f64, f64) {
        let lo = -p.support(&dvector![-1.0]).unwrap().value();
        let hi = p.support(&dvector![1.0]).unwrap().value();
        (lo, hi)
    }

    #[test]
    fn zero_data_falsifies_nothing() {
        let m = UncertainModel::from_spec(&ModelSpec::second_order_example()).unwrap();
        let z = DVector::zeros(2);
        let d = unfalsified(&m, &z, &z, &dvector![0.0]);
        assert!(d.contains(&dvector![100.0, -50.0, 3.0], 0.0));
        assert!(!d.as_polytope().is_bounded().unwrap());
    }

    #[test]
    fn noiseless_step_keeps_truth_inside() {
        let m = UncertainModel::from_spec(&ModelSpec::second_order_example()).unwrap();
        let th = dvector![0.8, 0.2, -0.5];
        let (x, u) = (dvector![0.7, -0.2], dvector![0.3]);
        let xn = m.step(&x, &u, &DVector::zeros(2), &th).unwrap();
        let d = unfalsified(&m, &xn, &x, &u);
        // With w = 0 every halfspace has slack equal to the W bound.
        assert!(d.as_polytope().max_residual(&th) < -0.05 + 1e-12);
    }

    #[test]
    fn scalar_interval() {
        let d = unfalsified(&scalar_toy(), &dvector![0.85], &dvector![1.0], &dvector![0.0]);
        let (lo, hi) = interval(d.as_polytope());
        assert!((lo - 0.75).abs() < 1e-12 && (hi - 0.95).abs() < 1e-12, "{lo} {hi}");

        let prior = ParamSetEstimate::from_polytope(HPolytope::inf_ball(1, 1.0));
        let next = update_param_set(&prior, &[d]).unwrap();
        assert!((next.offsets()[0] - 0.95).abs() < 1e-12);
        assert!((next.offsets()[1] + 0.75).abs() < 1e-12);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn vacuous_window_keeps_offsets() {
        let prior = ParamSetEstimate::from_polytope(HPolytope::inf_ball(3, 1.0));
        let next = update_param_set(&prior, &[UnfalsifiedSet::everything(3), UnfalsifiedSet::everything(3)]).unwrap();
        assert_eq!(next.offsets(), prior.offsets());
    }

    #[test]
    fn contradictory_data_falsifies_model() {
        let m = scalar_toy();
        let prior = ParamSetEstimate::from_polytope(HPolytope::inf_ball(1, 1.0));
        let a = unfalsified(&m, &dvector![0.85], &dvector![1.0], &dvector![0.0]);
        let b = unfalsified(&m, &dvector![-0.85], &dvector![1.0], &dvector![0.0]);
        assert!(matches!(update_param_set(&prior, &[a, b]), Err(IdentifyError::ModelFalsified { t: 1 })));
    }

    #[test]
    fn projection_cases() {
        let set = ParamSetEstimate::from_polytope(HPolytope::inf_ball(3, 1.0));
        let inside = dvector![0.2, -0.3, 0.1];
        assert_eq!(project_nominal(&inside, &set).unwrap(), inside);
        let p = project_nominal(&dvector![2.0, 0.0, 0.0], &set).unwrap();
        assert!((p - dvector![1.0, 0.0, 0.0]).amax() < 1e-7);
    }

    #[test]
    fn volume_ratios() {
        let init = ParamSetEstimate::from_polytope(HPolytope::inf_ball(3, 1.0));
        assert_eq!(volume_ratio(&init, &init).unwrap(), 1.0);
        let half = ParamSetEstimate::from_polytope(HPolytope::inf_ball(3, 0.5));
        assert!((volume_ratio(&half, &init).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn faces_are_tight_after_update() {
        let m = UncertainModel::from_spec(&ModelSpec::second_order_example()).unwrap();
        let th = dvector![0.8, 0.2, -0.5];
        let prior = ParamSetEstimate::from_polytope(HPolytope::inf_ball(3, 1.0));
        let (x, u, w) = (dvector![1.0, 0.3], dvector![-0.5], dvector![0.03, -0.04]);
        let xn = m.step(&x, &u, &w, &th).unwrap();
        let d = unfalsified(&m, &xn, &x, &u);
        let next = update_param_set(&prior, std::slice::from_ref(&d)).unwrap();
        let feasible = prior.as_polytope().intersect(d.as_polytope()).unwrap();
        for i in 0..next.normals().nrows() {
            let (s, pt) = feasible.support_with_point(&next.as_polytope().row(i)).unwrap();
            let pt = pt.unwrap();
            assert!((s.value() - next.offsets()[i]).abs() < 1e-6);
            assert!(feasible.contains_point(&pt, 1e-9));
        }
        assert!(next.contains(&th, -1e-9) || next.contains(&th, 1e-9));
    }

    proptest! {
        #[test]
        fn projection_onto_box_is_clamp(
            th in proptest::collection::vec(-3.0f64..3.0, 3),
            lo in proptest::collection::vec(-1.0f64..0.0, 3),
            width in proptest::collection::vec(0.05f64..1.5, 3),
        ) {
            let lo = DVector::from_vec(lo);
            let hi = &lo + DVector::from_vec(width);
            let set = ParamSetEstimate::from_polytope(HPolytope::from_box(&lo, &hi).unwrap());
            let th = DVector::from_vec(th);
            let p = project_nominal(&th, &set).unwrap();
            let clamp = DVector::from_fn(3, |i, _| th[i].clamp(lo[i], hi[i]));
            prop_assert!((&p - &clamp).amax() < 1e-10, "{} vs {}", p, clamp);
            prop_assert!(set.contains(&p, 1e-8));
        }
    }
}
