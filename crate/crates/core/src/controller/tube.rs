//! Homothetic tube parameterization, tube constraints and the nominal cost.

use nalgebra::{DMatrix, DVector};

use crate::conic::{ConicProgram, LinExpr, VarBlock};
use crate::geometry::{HPolytope, VPolytope};
use crate::plant::UncertainModel;

/// Fixed cross-section shape `X⁰` with precomputed facet data.
#[derive(Clone, Debug)]
pub struct TubeShape {
    pub set: HPolytope,
    pub vertices: VPolytope,
}

impl TubeShape {
    pub fn new(set: HPolytope, vertices: VPolytope) -> Self {
        Self { set, vertices }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// `max_j dᵀx⁰_j`.
    pub fn support(&self, d: &DVector<f64>) -> f64 {
        self.vertices.support(d)
    }
}

/// Tube and perturbation sequence of one horizon.
///
/// `z[k]`, `alpha[k]` for `k = 0..=N`; `k = N` is the terminal set (`z = 0`, `α = 1`),
/// and every `k > N` reuses it.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeSolution {
    pub z: Vec<DVector<f64>>,
    pub alpha: Vec<f64>,
    pub v: Vec<DVector<f64>>,
    pub beta_prime: Vec<f64>,
    pub objective: f64,
}

impl TubeSolution {
    pub fn horizon(&self) -> usize {
        self.v.len()
    }

    pub fn center(&self, k: usize) -> &DVector<f64> {
        &self.z[k.min(self.horizon())]
    }

    pub fn scale(&self, k: usize) -> f64 {
        self.alpha[k.min(self.horizon())]
    }

    /// `x^{(j)}_k = z_k + α_k x⁰_j`; the singleton `{x_t}` at `k = 0`.
    pub fn vertices(&self, k: usize, shape: &TubeShape) -> Vec<DVector<f64>> {
        let (z, a) = (self.center(k), self.scale(k));
        if a == 0.0 {
            return vec![z.clone()];
        }
        shape.vertices.vertices().iter().map(|x0| z + x0 * a).collect()
    }

    /// Candidate at `t + 1`: `{x_{t+1}}, X_{2|t}, …, X_{N−1|t}, X_T` with `v̂`.
    pub fn shifted(&self, x_next: &DVector<f64>, v_hat: Vec<DVector<f64>>) -> TubeSolution {
        let n = self.horizon();
        let nx = x_next.len();
        let mut z = Vec::with_capacity(n + 1);
        let mut alpha = Vec::with_capacity(n + 1);
        z.push(x_next.clone());
        alpha.push(0.0);
        for k in 1..n {
            if k + 1 < n {
                z.push(self.z[k + 1].clone());
                alpha.push(self.alpha[k + 1]);
            } else {
                z.push(DVector::zeros(nx));
                alpha.push(1.0);
            }
        }
        z.push(DVector::zeros(nx));
        alpha.push(1.0);
        TubeSolution {
            z,
            alpha,
            v: v_hat,
            beta_prime: Vec::new(),
            objective: f64::NAN,
        }
    }
}

/// Nominal prediction `x̂_{k+1} = A(θ̄)x̂_k + B(θ̄)û_k` with `û_k = Kx̂_k + v̂_k` for
/// `k < N` and `û_k = Kx̂_k + s_k` afterwards.
#[derive(Clone, Debug)]
pub struct ReferenceTrajectory {
    pub x_hat: Vec<DVector<f64>>,
    pub u_hat: Vec<DVector<f64>>,
    pub v_hat: Vec<DVector<f64>>,
    /// Noise for steps `N−1, …, N+N_u−2`; the first entry is also `v̂_{N−1}`.
    pub noise: Vec<DVector<f64>>,
}

impl ReferenceTrajectory {
    /// `prev_v` holds `v°_{1..N−1|t−1}`; `noise[0]` fills the last slot.
    pub fn build(
        model: &UncertainModel,
        theta_bar: &DVector<f64>,
        x_t: &DVector<f64>,
        prev_v: &[DVector<f64>],
        noise: Vec<DVector<f64>>,
        n_steps: usize,
    ) -> Self {
        assert!(!noise.is_empty(), "at least one noise sample is required");
        let n = prev_v.len() + 1;
        let mut v_hat: Vec<DVector<f64>> = prev_v.to_vec();
        v_hat.push(noise[0].clone());
        let (a, b) = model.eval_ab(theta_bar);
        let k_gain = model.gain();
        let mut x_hat = vec![x_t.clone()];
        let mut u_hat = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let q = if k < n {
                v_hat[k].clone()
            } else {
                noise[(k + 1 - n).min(noise.len() - 1)].clone()
            };
            let u = k_gain * &x_hat[k] + q;
            x_hat.push(&a * &x_hat[k] + &b * &u);
            u_hat.push(u);
        }
        x_hat.truncate(n_steps);
        Self {
            x_hat,
            u_hat,
            v_hat,
            noise,
        }
    }

    /// Decision-free input perturbation at step `k ≥ N`.
    pub fn noise_at(&self, k: usize) -> &DVector<f64> {
        let n = self.v_hat.len();
        &self.noise[(k + 1 - n).min(self.noise.len() - 1)]
    }
}

/// Decision variables `(z_k, α_k)` for `k = 1..N−1` and `v_k` for `k = 0..N−1`.
#[derive(Clone, Debug)]
pub struct TubeVariables {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    v: VarBlock,
    z: VarBlock,
    alpha: VarBlock,
    x_t: DVector<f64>,
}

impl TubeVariables {
    pub fn add_to(prog: &mut ConicProgram, horizon: usize, nx: usize, nu: usize, x_t: &DVector<f64>) -> Self {
        let v = prog.add_vector("v", horizon * nu);
        let z = prog.add_vector("z", (horizon - 1) * nx);
        let alpha = prog.add_vector("alpha", horizon - 1);
        Self {
            horizon,
            nx,
            nu,
            v,
            z,
            alpha,
            x_t: x_t.clone(),
        }
    }

    pub fn v_var(&self, k: usize, i: usize) -> usize {
        self.v.var(k * self.nu + i)
    }

    pub fn v_expr(&self, k: usize) -> Vec<LinExpr> {
        (0..self.nu).map(|i| LinExpr::var(self.v_var(k, i))).collect()
    }

    /// `z_k` as affine expressions (constant for `k = 0` and `k ≥ N`).
    pub fn z_expr(&self, k: usize) -> Vec<LinExpr> {
        (0..self.nx)
            .map(|i| {
                if k == 0 {
                    LinExpr::constant(self.x_t[i])
                } else if k >= self.horizon {
                    LinExpr::constant(0.0)
                } else {
                    LinExpr::var(self.z.var((k - 1) * self.nx + i))
                }
            })
            .collect()
    }

    pub fn alpha_expr(&self, k: usize) -> LinExpr {
        if k == 0 {
            LinExpr::constant(0.0)
        } else if k >= self.horizon {
            LinExpr::constant(1.0)
        } else {
            LinExpr::var(self.alpha.var(k - 1))
        }
    }

    /// `z_k + α_k x⁰`.
    pub fn point_expr(&self, k: usize, x0: &DVector<f64>) -> Vec<LinExpr> {
        let alpha = self.alpha_expr(k);
        self.z_expr(k)
            .into_iter()
            .enumerate()
            .map(|(i, mut e)| {
                e.add_expr(&alpha, x0[i]);
                e
            })
            .collect()
    }

    /// Writes a tube into the decision vector layout.
    pub fn pack(&self, sol: &TubeSolution, x: &mut [f64]) {
        for k in 0..self.horizon {
            for i in 0..self.nu {
                x[self.v_var(k, i)] = sol.v[k][i];
            }
        }
        for k in 1..self.horizon {
            for i in 0..self.nx {
                x[self.z.var((k - 1) * self.nx + i)] = sol.z[k][i];
            }
            x[self.alpha.var(k - 1)] = sol.alpha[k];
        }
    }

    pub fn unpack(&self, x: &[f64], objective: f64) -> TubeSolution {
        let mut z = vec![self.x_t.clone()];
        let mut alpha = vec![0.0];
        for k in 1..self.horizon {
            z.push(DVector::from_fn(self.nx, |i, _| x[self.z.var((k - 1) * self.nx + i)]));
            alpha.push(x[self.alpha.var(k - 1)]);
        }
        z.push(DVector::zeros(self.nx));
        alpha.push(1.0);
        let v = (0..self.horizon)
            .map(|k| DVector::from_fn(self.nu, |i, _| x[self.v_var(k, i)]))
            .collect();
        TubeSolution {
            z,
            alpha,
            v,
            beta_prime: Vec::new(),
            objective,
        }
    }
}

fn row_expr(row: &DVector<f64>, exprs: &[LinExpr]) -> LinExpr {
    let mut out = LinExpr::new();
    for (c, e) in row.iter().zip(exprs) {
        if *c != 0.0 {
            out.add_expr(e, *c);
        }
    }
    out
}

/// Number of linear inequalities produced by [`add_tube_constraints`].
///
/// The maximum over shape vertices is folded into a support value because `α ≥ 0`.
pub fn tube_constraint_count(horizon: usize, n_theta_vertices: usize, shape_rows: usize, x_rows: usize, u_rows: usize) -> usize {
    horizon * (x_rows + u_rows + n_theta_vertices * shape_rows) + (horizon - 1)
}

/// State, input and containment constraints of the homothetic tube for every
/// parameter vertex `θ^(l)`:
///
/// - `H_X z_k + α_k σ_{X⁰}(H_X) ≤ h_X`
/// - `H_U(K z_k + v_k) + α_k σ_{X⁰}(Kᵀ H_U) ≤ h_U`
/// - `H⁰(A_K z_k + B v_k − z_{k+1}) + α_k σ_{X⁰}(A_Kᵀ H⁰) + σ_{FW}(H⁰) ≤ α_{k+1} h⁰`
/// - `α_k ≥ 0`
///
/// Returns the number of inequalities added.
pub fn add_tube_constraints(
    prog: &mut ConicProgram,
    vars: &TubeVariables,
    model: &UncertainModel,
    theta_vertices: &VPolytope,
    x_set: &HPolytope,
    u_set: &HPolytope,
    shape: &TubeShape,
) -> usize {
    let n = vars.horizon;
    let k_gain = model.gain();
    let h0 = &shape.set;
    let fw_support: Vec<f64> = (0..h0.n_rows())
        .map(|r| {
            let row = h0.row(r);
            model.w_vertices().support(&(model.f().transpose() * &row))
        })
        .collect();
    let ab: Vec<(DMatrix<f64>, DMatrix<f64>)> = theta_vertices
        .vertices()
        .iter()
        .map(|th| (model.closed_loop(th), model.eval_ab(th).1))
        .collect();
    let mut count = 0;
    for k in 0..n {
        let z = vars.z_expr(k);
        let alpha = vars.alpha_expr(k);
        let v = vars.v_expr(k);
        for r in 0..x_set.n_rows() {
            let row = x_set.row(r);
            let mut e = row_expr(&row, &z);
            e.add_expr(&alpha, shape.support(&row));
            prog.add_le(e.plus(-x_set.offsets()[r]));
            count += 1;
        }
        let kz: Vec<LinExpr> = (0..vars.nu)
            .map(|i| {
                let mut e = row_expr(&k_gain.row(i).transpose(), &z);
                e.add_expr(&v[i], 1.0);
                e
            })
            .collect();
        for r in 0..u_set.n_rows() {
            let row = u_set.row(r);
            let mut e = row_expr(&row, &kz);
            e.add_expr(&alpha, shape.support(&(k_gain.transpose() * &row)));
            prog.add_le(e.plus(-u_set.offsets()[r]));
            count += 1;
        }
        let z_next = vars.z_expr(k + 1);
        let alpha_next = vars.alpha_expr(k + 1);
        for (ak, b) in &ab {
            for r in 0..h0.n_rows() {
                let row = h0.row(r);
                let row_a = ak.transpose() * &row;
                let row_b = b.transpose() * &row;
                let mut e = row_expr(&row_a, &z);
                e.add_expr(&row_expr(&row_b, &v), 1.0);
                e.add_expr(&row_expr(&row, &z_next), -1.0);
                e.add_expr(&alpha, shape.support(&row_a));
                e.add_expr(&alpha_next, -h0.offsets()[r]);
                prog.add_le(e.plus(fw_support[r]));
                count += 1;
            }
        }
        if k >= 1 {
            prog.add_ge(alpha);
            count += 1;
        }
    }
    count
}

/// `J(v) = ½ vᵀHv + gᵀv + c` in the stacked perturbation `v = (v_0, …, v_{N−1})`.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticCost {
    pub fn eval(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.hessian * v)) + self.linear.dot(v) + self.constant
    }

    pub fn eval_seq(&self, v: &[DVector<f64>]) -> f64 {
        self.eval(&stack(v))
    }

    /// Adds the cost to `prog` over the perturbation variables of `vars`.
    pub fn add_to(&self, prog: &mut ConicProgram, vars: &TubeVariables) {
        let nu = vars.nu;
        let var = |i: usize| vars.v_var(i / nu, i % nu);
        let m = self.hessian.nrows();
        for i in 0..m {
            for j in i..m {
                let h = self.hessian[(i, j)];
                if h != 0.0 {
                    prog.add_hessian(var(i), var(j), h);
                }
            }
            prog.add_linear_cost(var(i), self.linear[i]);
        }
        prog.add_objective_constant(self.constant);
    }
}

pub fn stack(v: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = v.iter().map(|x| x.len()).sum();
    let mut out = DVector::zeros(total);
    let mut i = 0;
    for x in v {
        out.rows_mut(i, x.len()).copy_from(x);
        i += x.len();
    }
    out
}

/// Condensed nominal cost `Σ_{k<N} (x̄ᵀQx̄ + ūᵀRū) + x̄_NᵀPx̄_N` with
/// `x̄_{k+1} = A_K(θ̄)x̄_k + B(θ̄)v_k` and `ū = Kx̄ + v`.
pub fn nominal_cost(
    model: &UncertainModel,
    theta_bar: &DVector<f64>,
    x_t: &DVector<f64>,
    horizon: usize,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> QuadraticCost {
    let (nx, nu) = (model.nx(), model.nu());
    let m = horizon * nu;
    let ak = model.closed_loop(theta_bar);
    let (_, b) = model.eval_ab(theta_bar);
    let k_gain = model.gain();
    // x̄_k = Ax_k x_t + Sx_k v, ū_k = Au_k x_t + Su_k v
    let mut ax = DMatrix::<f64>::identity(nx, nx);
    let mut sx = DMatrix::<f64>::zeros(nx, m);
    let mut hessian = DMatrix::zeros(m, m);
    let mut linear = DVector::zeros(m);
    let mut constant = 0.0;
    let mut add = |a: &DMatrix<f64>, s: &DMatrix<f64>, w: &DMatrix<f64>| {
        let free = a * x_t;
        hessian += s.transpose() * w * s * 2.0;
        linear += s.transpose() * w * &free * 2.0;
        constant += free.dot(&(w * &free));
    };
    for k in 0..horizon {
        add(&ax, &sx, q);
        let au = k_gain * &ax;
        let mut su = k_gain * &sx;
        for i in 0..nu {
            su[(i, k * nu + i)] += 1.0;
        }
        add(&au, &su, r);
        let mut sx_next = &ak * &sx;
        sx_next.columns_mut(k * nu, nu).copy_from(&b);
        sx = sx_next;
        ax = &ak * ax;
    }
    add(&ax, &sx, p);
    QuadraticCost {
        hessian: (&hessian + hessian.transpose()) * 0.5,
        linear,
        constant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{self, SolveStatus, SolverSettings};
    use crate::controller::terminal::{synth_terminal_cost, TerminalIngredients, TerminalSetOptions};
    use crate::plant::ModelSpec;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example() -> UncertainModel {
        UncertainModel::from_spec(&ModelSpec::second_order_example()).unwrap()
    }

    fn example_sets() -> (HPolytope, HPolytope) {
        (
            HPolytope::new(DMatrix::from_row_slice(1, 2, &[0.0, -1.0]), dvector![0.3]).unwrap(),
            HPolytope::new(DMatrix::from_row_slice(1, 1, &[1.0]), dvector![1.0]).unwrap(),
        )
    }

    fn scalar(a: f64, b: f64, k: f64) -> UncertainModel {
        UncertainModel::new(
            vec![DMatrix::from_element(1, 1, a), DMatrix::zeros(1, 1)],
            vec![DMatrix::from_element(1, 1, b), DMatrix::zeros(1, 1)],
            DMatrix::identity(1, 1),
            HPolytope::inf_ball(1, 0.0),
            HPolytope::inf_ball(1, 0.0),
            DMatrix::from_element(1, 1, k),
        )
        .unwrap()
    }

    /// Simulated `x̄` and `ū` evaluated directly.
    fn cost_by_simulation(
        model: &UncertainModel,
        theta: &DVector<f64>,
        x_t: &DVector<f64>,
        v: &[DVector<f64>],
        p: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> f64 {
        let (a, b) = model.eval_ab(theta);
        let mut x = x_t.clone();
        let mut j = 0.0;
        for vk in v {
            let u = model.gain() * &x + vk;
            j += x.dot(&(q * &x)) + u.dot(&(r * &u));
            x = &a * &x + &b * &u;
        }
        j + x.dot(&(p * &x))
    }

    #[test]
    fn cost_zero_at_origin() {
        let m = example();
        let p = DMatrix::identity(2, 2);
        let c = nominal_cost(&m, &DVector::zeros(3), &DVector::zeros(2), 10, &p, &p, &DMatrix::identity(1, 1));
        assert_eq!(c.eval(&DVector::zeros(10)), 0.0);
    }

    #[test]
    fn cost_scalar_hand_expansion() {
        let (a, b, k) = (0.7, 0.4, -0.3);
        let m = scalar(a, b, k);
        let (q, r, p) = (2.0, 0.5, 3.0);
        let c = nominal_cost(
            &m,
            &DVector::zeros(1),
            &dvector![1.3],
            1,
            &DMatrix::from_element(1, 1, p),
            &DMatrix::from_element(1, 1, q),
            &DMatrix::from_element(1, 1, r),
        );
        let (x, v) = (1.3, -0.8);
        let ak = a + b * k;
        let hand = q * x * x + r * (k * x + v).powi(2) + p * (ak * x + b * v).powi(2);
        assert!((c.eval(&dvector![v]) - hand).abs() < 1e-12);
    }

    #[test]
    fn cost_hessian_psd() {
        let m = example();
        let th = dvector![0.3, -0.2, 0.1];
        let (q, r) = (DMatrix::identity(2, 2), DMatrix::identity(1, 1));
        let p = synth_terminal_cost(&m, &th, &q, &r).unwrap();
        let c = nominal_cost(&m, &th, &dvector![1.0, 0.3], 10, &p, &q, &r);
        let eig = nalgebra::SymmetricEigen::new(c.hessian.clone()).eigenvalues.min();
        assert!(eig >= -1e-10);
    }

    proptest! {
        #[test]
        fn cost_matches_simulation(
            x in prop::collection::vec(-2.0f64..2.0, 2),
            v in prop::collection::vec(-1.0f64..1.0, 4),
            th in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let m = example();
            let th = DVector::from_vec(th);
            let x = DVector::from_vec(x);
            let (q, r) = (DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 0.7));
            let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
            let vs: Vec<DVector<f64>> = v.iter().map(|&s| dvector![s]).collect();
            let c = nominal_cost(&m, &th, &x, 4, &p, &q, &r);
            let direct = cost_by_simulation(&m, &th, &x, &vs, &p, &q, &r);
            prop_assert!((c.eval_seq(&vs) - direct).abs() < 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn reference_follows_nominal_dynamics() {
        let m = example();
        let th = dvector![0.2, 0.1, -0.3];
        let prev: Vec<DVector<f64>> = (0..9).map(|k| dvector![0.01 * k as f64]).collect();
        let noise = vec![dvector![0.003], dvector![-0.002], dvector![0.001]];
        let r = ReferenceTrajectory::build(&m, &th, &dvector![1.0, 0.3], &prev, noise, 12);
        assert_eq!(r.x_hat.len(), 12);
        assert_eq!(r.v_hat.len(), 10);
        assert_eq!(r.v_hat[9], dvector![0.003]);
        let (a, b) = m.eval_ab(&th);
        for k in 0..11 {
            let q = if k < 10 { r.v_hat[k].clone() } else { r.noise_at(k).clone() };
            assert_eq!(r.u_hat[k], m.gain() * &r.x_hat[k] + q);
            assert!((&r.x_hat[k + 1] - (&a * &r.x_hat[k] + &b * &r.u_hat[k])).amax() < 1e-15);
        }
        assert_eq!(r.noise_at(10), &dvector![-0.002]);
        assert_eq!(r.noise_at(11), &dvector![0.001]);
    }

    struct Fixture {
        model: UncertainModel,
        shape: TubeShape,
        theta: VPolytope,
        x_set: HPolytope,
        u_set: HPolytope,
    }

    fn fixture(theta_radius: f64) -> Fixture {
        let model = example();
        let (x_set, u_set) = example_sets();
        let theta0 = HPolytope::inf_ball(3, 1.0).vertices().unwrap();
        let ing = TerminalIngredients::synthesize(
            &model,
            &x_set,
            &u_set,
            &theta0,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            TerminalSetOptions::default(),
        )
        .unwrap();
        let theta = HPolytope::from_box(&dvector![0.8, 0.2, -0.5].add_scalar(-theta_radius), &dvector![0.8, 0.2, -0.5].add_scalar(theta_radius))
            .unwrap()
            .vertices()
            .unwrap();
        Fixture {
            model,
            shape: TubeShape::new(ing.set, ing.vertices),
            theta,
            x_set,
            u_set,
        }
    }

    fn solve_tube(f: &Fixture, x_t: &DVector<f64>, horizon: usize) -> (TubeSolution, usize) {
        let mut prog = ConicProgram::new();
        let vars = TubeVariables::add_to(&mut prog, horizon, 2, 1, x_t);
        let count = add_tube_constraints(&mut prog, &vars, &f.model, &f.theta, &f.x_set, &f.u_set, &f.shape);
        let th = dvector![0.8, 0.2, -0.5];
        let (q, r) = (DMatrix::identity(2, 2), DMatrix::identity(1, 1));
        let p = synth_terminal_cost(&f.model, &th, &q, &r).unwrap();
        nominal_cost(&f.model, &th, x_t, horizon, &p, &q, &r).add_to(&mut prog, &vars);
        let out = conic::solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        (vars.unpack(&out.x, out.objective), count)
    }

    #[test]
    fn constraint_count_matches_formula() {
        let f = fixture(0.3);
        let (_, count) = solve_tube(&f, &dvector![1.0, 0.3], 5);
        assert_eq!(
            count,
            tube_constraint_count(5, f.theta.len(), f.shape.set.n_rows(), f.x_set.n_rows(), f.u_set.n_rows())
        );
        assert_eq!(f.theta.len(), 8);
    }

    #[test]
    fn feasible_tube_survives_random_replay() {
        let f = fixture(0.3);
        let n = 6;
        let (sol, _) = solve_tube(&f, &dvector![1.0, 0.3], n);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lo = dvector![0.5, -0.1, -0.8];
        for _ in 0..1000 {
            let th = DVector::from_fn(3, |i, _| lo[i] + 0.6 * rng.random::<f64>());
            let k = rng.random_range(0..n);
            let verts = sol.vertices(k, &f.shape);
            let wts: Vec<f64> = (0..verts.len()).map(|_| rng.random::<f64>()).collect();
            let total: f64 = wts.iter().sum();
            let x = verts.iter().zip(&wts).fold(DVector::zeros(2), |acc, (v, w)| acc + v * (w / total));
            let w = DVector::from_fn(2, |_, _| rng.random_range(-0.05..0.05));
            let (a, b) = f.model.eval_ab(&th);
            let u = f.model.gain() * &x + &sol.v[k];
            assert!(f.x_set.contains_point(&x, 1e-6));
            assert!(f.u_set.contains_point(&u, 1e-6));
            let next = &a * &x + &b * &u + &w;
            let local = (&next - sol.center(k + 1)) / sol.scale(k + 1).max(1e-300);
            assert!(f.shape.set.contains_point(&local, 1e-5), "k = {k}");
        }
    }

    #[test]
    fn degenerate_tube_reduces_to_nominal_propagation() {
        // Singleton parameter set, W = {0}: with α fixed at 0 the tube is the nominal trajectory.
        let model = scalar(0.5, 1.0, 0.0);
        let shape_set = HPolytope::inf_ball(1, 1.0);
        let shape = TubeShape::new(shape_set.clone(), shape_set.vertices().unwrap());
        let theta = VPolytope::singleton(DVector::zeros(1));
        let x_set = HPolytope::inf_ball(1, 10.0);
        let u_set = HPolytope::inf_ball(1, 10.0);
        let mut prog = ConicProgram::new();
        let x_t = dvector![2.0];
        let vars = TubeVariables::add_to(&mut prog, 3, 1, 1, &x_t);
        add_tube_constraints(&mut prog, &vars, &model, &theta, &x_set, &u_set, &shape);
        for k in 1..3 {
            prog.add_eq(vars.alpha_expr(k));
        }
        for k in 0..3 {
            prog.add_eq(LinExpr::var(vars.v_var(k, 0)).plus(-0.1));
        }
        let out = conic::solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        let sol = vars.unpack(&out.x, out.objective);
        let mut x = 2.0;
        for k in 1..3 {
            x = 0.5 * x + 0.1;
            assert!((sol.z[k][0] - x).abs() < 1e-6, "k = {k}: {} vs {x}", sol.z[k][0]);
        }
    }

    #[test]
    fn shift_keeps_tail_and_appends_terminal_set() {
        let sol = TubeSolution {
            z: (0..5).map(|k| dvector![k as f64, 0.0]).collect(),
            alpha: vec![0.0, 0.1, 0.2, 0.3, 1.0],
            v: (0..4).map(|k| dvector![k as f64]).collect(),
            beta_prime: vec![],
            objective: 0.0,
        };
        let s = sol.shifted(&dvector![9.0, 9.0], vec![dvector![0.0]; 4]);
        assert_eq!(s.z[0], dvector![9.0, 9.0]);
        assert_eq!(s.alpha, vec![0.0, 0.2, 0.3, 1.0, 1.0]);
        assert_eq!(s.z[1], dvector![2.0, 0.0]);
        assert_eq!(s.z[3], dvector![0.0, 0.0]);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut prog = ConicProgram::new();
        let x_t = dvector![0.4, -0.1];
        let vars = TubeVariables::add_to(&mut prog, 4, 2, 1, &x_t);
        let sol = TubeSolution {
            z: vec![x_t.clone(), dvector![1.0, 2.0], dvector![3.0, 4.0], dvector![5.0, 6.0], dvector![0.0, 0.0]],
            alpha: vec![0.0, 0.5, 0.25, 0.125, 1.0],
            v: (0..4).map(|k| dvector![k as f64 - 1.5]).collect(),
            beta_prime: vec![],
            objective: 1.0,
        };
        let mut x = vec![0.0; prog.n_vars()];
        vars.pack(&sol, &mut x);
        assert_eq!(vars.unpack(&x, 1.0), sol);
    }
}
