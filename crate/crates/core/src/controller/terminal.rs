//! Terminal set and terminal cost.

use nalgebra::{DMatrix, DVector};

use super::{ControllerError, Result};
use crate::geometry::{HPolytope, Support, VPolytope};
use crate::plant::{spectral_radius, UncertainModel};

/// Options for the robust invariant set iteration.
#[derive(Clone, Copy, Debug)]
pub struct TerminalSetOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for TerminalSetOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-8 }
    }
}

/// Terminal set together with the stage weights.
#[derive(Clone, Debug)]
pub struct TerminalIngredients {
    pub set: HPolytope,
    pub vertices: VPolytope,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Iterations used by the invariant-set computation.
    pub iterations: usize,
}

/// `max_{s ∈ vertices} a·(B s)`
fn support_of_image(a: &DVector<f64>, b: &DMatrix<f64>, vertices: &VPolytope) -> f64 {
    vertices
        .vertices()
        .iter()
        .map(|s| a.dot(&(b * s)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `X ∩ {x : Kx ⊕ S ⊆ U}`
pub fn admissible_set(model: &UncertainModel, x_set: &HPolytope, u_set: &HPolytope) -> Result<HPolytope> {
    let hu = u_set.normals();
    let mut offsets = u_set.offsets().clone();
    for i in 0..u_set.n_rows() {
        offsets[i] -= model.s_vertices().support(&u_set.row(i));
    }
    let input_rows = HPolytope::new(hu * model.gain(), offsets)?;
    Ok(x_set.intersect(&input_rows)?)
}

/// One-step robust preimage of `target` under `A_K(θ)x + B(θ)s + Fw` at every parameter vertex.
pub fn robust_preimage(model: &UncertainModel, target: &HPolytope, theta_vertices: &VPolytope) -> Result<HPolytope> {
    let nx = model.nx();
    let f = model.f().clone();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for th in theta_vertices.vertices() {
        let ak = model.closed_loop(th);
        let (_, b) = model.eval_ab(th);
        for i in 0..target.n_rows() {
            let a = target.row(i);
            let offset = target.offsets()[i]
                - support_of_image(&a, &b, model.s_vertices())
                - support_of_image(&a, &f, model.w_vertices());
            rows.push((ak.transpose() * a, offset));
        }
    }
    let mut normals = DMatrix::zeros(rows.len(), nx);
    let mut offsets = DVector::zeros(rows.len());
    for (i, (a, b)) in rows.into_iter().enumerate() {
        normals.set_row(i, &a.transpose());
        offsets[i] = b;
    }
    Ok(HPolytope::new(normals, offsets)?)
}

/// Largest robust invariant subset of `X ∩ {x : Kx ⊕ S ⊆ U}`, by fixed-point iteration.
pub fn synth_terminal_set(
    model: &UncertainModel,
    x_set: &HPolytope,
    u_set: &HPolytope,
    theta_vertices: &VPolytope,
    opts: TerminalSetOptions,
) -> Result<(HPolytope, usize)> {
    let mut omega = admissible_set(model, x_set, u_set)?
        .remove_redundant()
        .map_err(|_| ControllerError::TerminalSynthesis("admissible set is empty".into()))?;
    for iter in 1..=opts.max_iter {
        let pre = robust_preimage(model, &omega, theta_vertices)?;
        let mut fresh = Vec::new();
        for i in 0..pre.n_rows() {
            let a = pre.row(i);
            let b = pre.offsets()[i];
            let tight = match omega.support(&a)? {
                Support::Finite(v) => v > b + opts.tol * b.abs().max(1.0),
                Support::Unbounded => true,
            };
            if tight {
                fresh.push(i);
            }
        }
        if fresh.is_empty() {
            return Ok((omega, iter));
        }
        let extra = HPolytope::new(pre.normals().select_rows(&fresh), pre.offsets().select_rows(&fresh))?;
        omega = omega
            .intersect(&extra)?
            .remove_redundant()
            .map_err(|_| ControllerError::TerminalSynthesis(format!("set became empty at iteration {iter}")))?;
    }
    Err(ControllerError::TerminalSynthesis(format!(
        "no fixed point within {} iterations",
        opts.max_iter
    )))
}

/// Solves `P = A_Kᵀ P A_K + Q + KᵀRK` for `A_K = A_K(θ̄)`.
pub fn synth_terminal_cost(
    model: &UncertainModel,
    theta_bar: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let ak = model.closed_loop(theta_bar);
    let rho = spectral_radius(&ak);
    if rho >= 1.0 {
        return Err(ControllerError::Unstable(rho));
    }
    let k = model.gain();
    let stage = q + k.transpose() * r * k;
    discrete_lyapunov(&ak, &stage)
}

/// `P = AᵀPA + C` via the Kronecker form `(I − Aᵀ⊗Aᵀ) vec(P) = vec(C)`.
pub fn discrete_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| ControllerError::Unstable(spectral_radius(a)))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

impl TerminalIngredients {
    pub fn synthesize(
        model: &UncertainModel,
        x_set: &HPolytope,
        u_set: &HPolytope,
        theta_vertices: &VPolytope,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        opts: TerminalSetOptions,
    ) -> Result<Self> {
        let (set, iterations) = synth_terminal_set(model, x_set, u_set, theta_vertices, opts)?;
        if !set.is_bounded()? {
            return Err(ControllerError::TerminalSynthesis(
                "terminal set is unbounded; add bounds to the state constraints".into(),
            ));
        }
        let vertices = set.vertices()?;
        Ok(Self {
            set,
            vertices,
            q,
            r,
            iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::contains;
    use crate::plant::ModelSpec;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example() -> UncertainModel {
        UncertainModel::from_spec(&ModelSpec::second_order_example()).unwrap()
    }

    fn scalar(a: f64, k: f64, w: f64, s: f64) -> UncertainModel {
        UncertainModel::new(
            vec![DMatrix::from_element(1, 1, a), DMatrix::zeros(1, 1)],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)],
            DMatrix::identity(1, 1),
            HPolytope::inf_ball(1, w),
            HPolytope::inf_ball(1, s),
            DMatrix::from_element(1, 1, k),
        )
        .unwrap()
    }

    #[test]
    fn lyapunov_cases() {
        let z = DMatrix::zeros(2, 2);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((discrete_lyapunov(&z, &c).unwrap() - &c).amax() < 1e-15);
        let p = discrete_lyapunov(&DMatrix::from_element(1, 1, 0.5), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn terminal_cost_identity_at_box_center() {
        let m = example();
        let th = DVector::zeros(3);
        let (q, r) = (DMatrix::identity(2, 2), DMatrix::identity(1, 1));
        let p = synth_terminal_cost(&m, &th, &q, &r).unwrap();
        let ak = m.closed_loop(&th);
        let k = m.gain();
        let resid = &p - ak.transpose() * &p * &ak - &q - k.transpose() * &r * k;
        assert!(resid.amax() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let v = |x: &DVector<f64>| (x.transpose() * &p * x)[(0, 0)];
            let u = k * &x;
            let l = (x.transpose() * &q * &x)[(0, 0)] + (u.transpose() * &r * &u)[(0, 0)];
            assert!((v(&x) - v(&(&ak * &x)) - l).abs() < 1e-8);
        }
    }

    #[test]
    fn unstable_closed_loop_rejected() {
        let m = scalar(1.5, 0.0, 0.0, 0.0);
        let err = synth_terminal_cost(&m, &DVector::zeros(1), &DMatrix::identity(1, 1), &DMatrix::identity(1, 1));
        assert!(matches!(err, Err(ControllerError::Unstable(_))));
    }

    #[test]
    fn noiseless_scalar_toy_keeps_admissible_set() {
        let m = scalar(0.5, 0.0, 0.0, 0.0);
        let th = HPolytope::inf_ball(1, 1.0).vertices().unwrap();
        let xs = HPolytope::inf_ball(1, 10.0);
        let us = HPolytope::inf_ball(1, 100.0);
        let (set, _) = synth_terminal_set(&m, &xs, &us, &th, TerminalSetOptions::default()).unwrap();
        let expected = admissible_set(&m, &xs, &us).unwrap();
        let (v1, v2) = (set.vertices().unwrap(), expected.vertices().unwrap());
        assert!(contains(&set, &v2) && contains(&expected, &v1));
    }

    #[test]
    fn disturbed_scalar_toy_hand_iteration() {
        // x⁺ = 0.5x + w, |w| ≤ 1, |x| ≤ 10: the invariant set is the whole interval
        // because 0.5·10 + 1 ≤ 10.
        let m = scalar(0.5, 0.0, 1.0, 0.0);
        let th = HPolytope::inf_ball(1, 1.0).vertices().unwrap();
        let (set, _) = synth_terminal_set(
            &m,
            &HPolytope::inf_ball(1, 10.0),
            &HPolytope::inf_ball(1, 1.0),
            &th,
            TerminalSetOptions::default(),
        )
        .unwrap();
        assert!((set.support(&dvector![1.0]).unwrap().value() - 10.0).abs() < 1e-9);
        // With |x| ≤ 1.5: 0.5·1.5 + 1 = 1.75 > 1.5, the fixed point is empty of invariance.
        let err = synth_terminal_set(
            &m,
            &HPolytope::inf_ball(1, 1.5),
            &HPolytope::inf_ball(1, 1.0),
            &th,
            TerminalSetOptions::default(),
        );
        assert!(err.is_err());
    }

    fn example_sets() -> (HPolytope, HPolytope, VPolytope) {
        let xs = HPolytope::new(DMatrix::from_row_slice(1, 2, &[0.0, -1.0]), dvector![0.3]).unwrap();
        let us = HPolytope::new(DMatrix::from_row_slice(1, 1, &[1.0]), dvector![1.0]).unwrap();
        (xs, us, HPolytope::inf_ball(3, 1.0).vertices().unwrap())
    }

    #[test]
    fn example_terminal_set_is_admissible_and_invariant() {
        let m = example();
        let (xs, us, th) = example_sets();
        let ing = TerminalIngredients::synthesize(
            &m,
            &xs,
            &us,
            &th,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            TerminalSetOptions::default(),
        )
        .unwrap();
        let s_max = m.s_vertices().support(&dvector![1.0]);
        for v in ing.vertices.vertices() {
            assert!(v[1] >= -0.3 - 1e-9);
            assert!((m.gain() * v)[0] + s_max <= 1.0 + 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs_samples = crate::geometry::sample_uniform(&ing.vertices, 1000, 5).unwrap();
        for x in &xs_samples {
            let theta = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let s = DVector::from_fn(1, |_, _| rng.random_range(-0.005..0.005));
            let w = DVector::from_fn(2, |_, _| rng.random_range(-0.05..0.05));
            let (_, b) = m.eval_ab(&theta);
            let next = m.closed_loop(&theta) * x + b * s + m.f() * w;
            assert!(ing.set.contains_point(&next, 1e-7));
        }
    }

    #[test]
    fn removing_disturbance_enlarges_terminal_set() {
        let m = example();
        let (xs, us, th) = example_sets();
        let (with_w, _) = synth_terminal_set(&m, &xs, &us, &th, TerminalSetOptions::default()).unwrap();
        let mut spec = ModelSpec::second_order_example();
        spec.w = HPolytope::inf_ball(2, 0.0);
        let calm = UncertainModel::from_spec(&spec).unwrap();
        let (without_w, _) = synth_terminal_set(&calm, &xs, &us, &th, TerminalSetOptions::default()).unwrap();
        assert!(contains(&without_w, &with_w.vertices().unwrap()));
    }
}
