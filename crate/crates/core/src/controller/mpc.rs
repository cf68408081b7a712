//! Per-step optimization problems and the adaptive MPC loop.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::terminal::{synth_terminal_cost, TerminalIngredients, TerminalSetOptions};
use super::tube::{add_tube_constraints, nominal_cost, ReferenceTrajectory, TubeShape, TubeSolution, TubeVariables};
use super::{ControllerError, Result};
use crate::conic::{self, ConicProgram, LinExpr, SolveOutcome, SolveStatus, SolverSettings, SymExpr, VarBlock, RESIDUAL_TOL};
use crate::excitation::{
    gram, min_eigenvalue, pe_scale, posterior_check, reference_beta_prime, sampled_betas, tighten_block, HistoryBuffer,
    Linearization, PEWindowLayout, PosteriorVerdict, ReferenceCoefficient, StepSamples, WindowData,
};
use crate::geometry::{sample_box, HPolytope, HitAndRun, VPolytope};
use crate::identify::{project_nominal, Identifier, ParamSetEstimate};
use crate::parallel;
use crate::plant::UncertainModel;

/// Controller variant applied in closed loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Tube MPC with linearized PE constraints and the sampled posterior check.
    #[serde(rename = "alg1")]
    PersistentlyExciting,
    /// Tube MPC without PE constraints.
    #[serde(rename = "alg2")]
    Plain,
    /// `u = Kx + s`.
    #[serde(rename = "noisyK")]
    NoisyFeedback,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::PersistentlyExciting => "alg1",
            Algorithm::Plain => "alg2",
            Algorithm::NoisyFeedback => "noisyK",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "alg1" => Some(Algorithm::PersistentlyExciting),
            "alg2" => Some(Algorithm::Plain),
            "noisyK" => Some(Algorithm::NoisyFeedback),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcSettings {
    /// Prediction horizon `N`.
    pub horizon: usize,
    /// PE window length `N_u`.
    pub window: usize,
    /// Identification window `N_μ`.
    pub id_window: usize,
    /// Samples per cross-section `N_s` in the posterior check.
    pub samples: usize,
}

/// Offline ingredients shared by every run.
#[derive(Clone, Debug)]
pub struct MpcProblem {
    pub model: UncertainModel,
    pub x_set: HPolytope,
    pub u_set: HPolytope,
    pub theta0: ParamSetEstimate,
    pub terminal: TerminalIngredients,
    pub shape: TubeShape,
    pub settings: MpcSettings,
    pub solver: SolverSettings,
}

impl MpcProblem {
    pub fn new(
        model: UncertainModel,
        x_set: HPolytope,
        u_set: HPolytope,
        theta0: ParamSetEstimate,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        settings: MpcSettings,
    ) -> Result<Self> {
        let theta_vertices = theta0.as_polytope().vertices()?;
        let terminal = TerminalIngredients::synthesize(
            &model,
            &x_set,
            &u_set,
            &theta_vertices,
            q,
            r,
            TerminalSetOptions::default(),
        )?;
        let shape = TubeShape::new(terminal.set.clone(), terminal.vertices.clone());
        Ok(Self {
            model,
            x_set,
            u_set,
            theta0,
            terminal,
            shape,
            settings,
            solver: SolverSettings::default(),
        })
    }

    /// Centre of the initial parameter box.
    pub fn initial_nominal(&self) -> Result<DVector<f64>> {
        let (lo, hi) = self
            .theta0
            .as_polytope()
            .box_bounds()
            .ok_or_else(|| ControllerError::InitialInfeasible("parameter set is not a box".into()))?;
        Ok((lo + hi) * 0.5)
    }

    pub fn terminal_cost(&self, theta_bar: &DVector<f64>) -> Result<DMatrix<f64>> {
        synth_terminal_cost(&self.model, theta_bar, &self.terminal.q, &self.terminal.r)
    }

    /// Number of predicted steps carrying PE blocks, `N + N_u − 1`.
    pub fn n_blocks(&self) -> usize {
        self.settings.horizon + self.settings.window - 1
    }

    /// `P₀`: the tube QP without PE constraints.
    pub fn solve_p0(&self, x0: &DVector<f64>, theta_bar: &DVector<f64>) -> Result<TubeSolution> {
        let theta_vertices = self.theta0.as_polytope().vertices()?;
        let p = self.terminal_cost(theta_bar)?;
        let built = self.build(x0, &theta_vertices, theta_bar, &p, None)?;
        let out = conic::solve(&built.prog, &self.solver)?;
        if out.status != SolveStatus::Optimal {
            return Err(ControllerError::InitialInfeasible(format!(
                "{:?} ({})",
                out.status, out.stats.backend_status
            )));
        }
        Ok(built.vars.unpack(&out.x, out.objective))
    }

    fn build_constraints(
        &self,
        x_t: &DVector<f64>,
        theta_vertices: &VPolytope,
        pe: Option<&PeData>,
    ) -> Result<(ConicProgram, TubeVariables, Option<PeVariables>)> {
        let mut prog = ConicProgram::new();
        let vars = TubeVariables::add_to(&mut prog, self.settings.horizon, self.model.nx(), self.model.nu(), x_t);
        add_tube_constraints(&mut prog, &vars, &self.model, theta_vertices, &self.x_set, &self.u_set, &self.shape);
        let pe_vars = match pe {
            Some(data) => Some(self.add_pe_constraints(&mut prog, &vars, data)?),
            None => None,
        };
        Ok((prog, vars, pe_vars))
    }

    fn build(
        &self,
        x_t: &DVector<f64>,
        theta_vertices: &VPolytope,
        theta_bar: &DVector<f64>,
        p: &DMatrix<f64>,
        pe: Option<&PeData>,
    ) -> Result<BuiltProgram> {
        let (mut prog, vars, pe_vars) = self.build_constraints(x_t, theta_vertices, pe)?;
        let n = self.settings.horizon;
        let cost = nominal_cost(&self.model, theta_bar, x_t, n, p, &self.terminal.q, &self.terminal.r);
        cost.add_to(&mut prog, &vars);
        Ok(BuiltProgram {
            prog,
            vars,
            pe_vars,
            cost,
        })
    }

    /// Window LMIs `scale·past + Σ M_k − β′I ⪰ 0`, `β′ ≥ β̂′` and vertex bounds `M_k ⪯ scale·L_k`.
    fn add_pe_constraints(&self, prog: &mut ConicProgram, vars: &TubeVariables, data: &PeData) -> Result<PeVariables> {
        let n = self.settings.horizon;
        let np = self.model.np();
        let k_gain = self.model.gain();
        let kappas: Vec<i64> = data.layout.kappas().collect();
        let beta = prog.add_vector("beta_prime", kappas.len());
        // Bound expressions per predicted step, shared by every window copy of M_k.
        let bounds: Vec<Vec<SymExpr>> = (0..self.n_blocks())
            .map(|k| {
                let lin = &data.linearizations[k];
                let x_hat = &data.reference.x_hat[k];
                let u_hat = &data.reference.u_hat[k];
                if k >= n {
                    let q = data.reference.noise_at(k);
                    self.shape
                        .vertices
                        .vertices()
                        .iter()
                        .map(|x| {
                            let m = lin.bound(&(x - x_hat), &(k_gain * x + q - u_hat)) * data.scale;
                            SymExpr::from_constant(&m).expect("symmetric")
                        })
                        .collect()
                } else {
                    let shape_points: Vec<DVector<f64>> = if k == 0 {
                        vec![DVector::zeros(self.model.nx())]
                    } else {
                        self.shape.vertices.vertices().to_vec()
                    };
                    let v = vars.v_expr(k);
                    shape_points
                        .iter()
                        .map(|x0| {
                            let point = vars.point_expr(k, x0);
                            let dx: Vec<LinExpr> =
                                point.iter().enumerate().map(|(i, e)| e.clone().plus(-x_hat[i])).collect();
                            let du: Vec<LinExpr> = (0..self.model.nu())
                                .map(|i| {
                                    let mut e = v[i].clone().plus(-u_hat[i]);
                                    for (c, pe) in k_gain.row(i).iter().zip(&point) {
                                        e.add_expr(pe, *c);
                                    }
                                    e
                                })
                                .collect();
                            lin.bound_expr(&dx, &du, data.scale)
                        })
                        .collect()
                }
            })
            .collect();
        let mut blocks = Vec::with_capacity(kappas.len());
        for (w, &kappa) in kappas.iter().enumerate() {
            let mut window = SymExpr::from_constant(&(&data.past[w] * data.scale))?;
            let mut ms = Vec::new();
            for k in data.layout.decision_steps(kappa) {
                let m = prog.add_symmetric(&format!("M[{kappa}][{k}]"), np);
                window.add_symmetric_block(&m, 1.0);
                for b in &bounds[k] {
                    let mut e = b.clone();
                    e.add_symmetric_block(&m, -1.0);
                    prog.add_psd(e);
                }
                ms.push((k, m));
            }
            window.add_identity_term(beta.var(w), -1.0);
            prog.add_psd(window);
            prog.add_ge(LinExpr::var(beta.var(w)).plus(-data.beta_hat[w]));
            blocks.push(ms);
        }
        Ok(PeVariables { beta, blocks })
    }

    /// `P₍₎₀`; with `pe = None` this is the plain tube QP used by the non-exciting variant.
    pub fn solve_pgt0(
        &self,
        t: usize,
        x_t: &DVector<f64>,
        theta_set: &ParamSetEstimate,
        theta_bar: &DVector<f64>,
        p: &DMatrix<f64>,
        candidate: &Candidate,
        pe: Option<&PeData>,
    ) -> Result<PgtSolution> {
        let theta_vertices = theta_set.as_polytope().vertices()?;
        let built = self.build(x_t, &theta_vertices, theta_bar, p, pe)?;
        let witness = built.check_witness(candidate, pe);
        let start = Instant::now();
        let out = conic::solve(&built.prog, &self.solver)?;
        let solve_time = start.elapsed();
        if out.status != SolveStatus::Optimal {
            return Err(ControllerError::RecursiveFeasibility {
                t,
                status: format!("{:?} ({})", out.status, out.stats.backend_status),
                program: built.prog.to_json(),
            });
        }
        let mut tube = built.vars.unpack(&out.x, out.objective);
        let blocks = match (&built.pe_vars, pe) {
            (Some(pv), Some(data)) => {
                let (blocks, betas) = pv.certified_blocks(&out, data, &tube, self);
                tube.beta_prime = betas;
                blocks
            }
            _ => Vec::new(),
        };
        Ok(PgtSolution {
            tube,
            blocks,
            witness,
            solve_time,
            iterations: out.stats.iterations,
        })
    }

    /// Unscaled `L_k(x − x̂_k, Kx + q − û_k)` at every vertex of the `k`-th cross-section.
    fn vertex_bounds(&self, data_lin: &[Linearization], reference: &ReferenceTrajectory, tube: &TubeSolution, k: usize) -> Vec<DMatrix<f64>> {
        let q = self.input_offset(reference, tube, k);
        tube.vertices(k, &self.shape)
            .iter()
            .map(|x| {
                data_lin[k].bound(
                    &(x - &reference.x_hat[k]),
                    &(self.model.gain() * x + &q - &reference.u_hat[k]),
                )
            })
            .collect()
    }

    /// `v_k` for `k < N`, `s_{k|t}` afterwards.
    fn input_offset(&self, reference: &ReferenceTrajectory, tube: &TubeSolution, k: usize) -> DVector<f64> {
        if k < self.settings.horizon {
            tube.v[k].clone()
        } else {
            reference.noise_at(k).clone()
        }
    }

    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        Ok(sample_box(self.model.s_set(), rng)?)
    }
}

/// Shifted previous solution together with the `M` blocks certifying `β̂′`.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub tube: TubeSolution,
    pub reference: Vec<ReferenceCoefficient>,
}

/// Inputs of the PE constraints at time `t`.
#[derive(Clone, Debug)]
pub struct PeData {
    pub layout: PEWindowLayout,
    pub reference: ReferenceTrajectory,
    pub linearizations: Vec<Linearization>,
    pub scale: f64,
    /// Unscaled past Gram sums per window.
    pub past: Vec<DMatrix<f64>>,
    /// Scaled reference coefficients per window.
    pub beta_hat: Vec<f64>,
}

struct PeVariables {
    beta: VarBlock,
    /// Per window: `(k, M^κ_k)`.
    blocks: Vec<Vec<(usize, VarBlock)>>,
}

impl PeVariables {
    /// Solver blocks shifted to satisfy every vertex bound exactly, with `β′` recomputed.
    fn certified_blocks(
        &self,
        out: &SolveOutcome,
        data: &PeData,
        tube: &TubeSolution,
        problem: &MpcProblem,
    ) -> (Vec<Vec<DMatrix<f64>>>, Vec<f64>) {
        let per_step: Vec<Vec<DMatrix<f64>>> = (0..problem.n_blocks())
            .map(|k| {
                problem
                    .vertex_bounds(&data.linearizations, &data.reference, tube, k)
                    .into_iter()
                    .map(|b| b * data.scale)
                    .collect()
            })
            .collect();
        let mut all = Vec::with_capacity(self.blocks.len());
        let mut betas = Vec::with_capacity(self.blocks.len());
        for (w, ms) in self.blocks.iter().enumerate() {
            let mut total = &data.past[w] * data.scale;
            let mut window = Vec::with_capacity(ms.len());
            for (k, m) in ms {
                let m = tighten_block(out.symmetric_value(m), &per_step[*k]);
                total += &m;
                window.push(m);
            }
            betas.push(min_eigenvalue(&total).min(out.value(self.beta.var(w))));
            all.push(window);
        }
        (all, betas)
    }
}

struct BuiltProgram {
    prog: ConicProgram,
    vars: TubeVariables,
    pe_vars: Option<PeVariables>,
    cost: super::tube::QuadraticCost,
}

/// Residuals of the shifted candidate in the freshly built program.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct WitnessReport {
    /// Largest relative constraint violation (0 when feasible).
    pub violation: f64,
    /// `J(v̂)`.
    pub cost: f64,
}

impl WitnessReport {
    pub fn feasible(&self) -> bool {
        self.violation <= RESIDUAL_TOL
    }
}

impl BuiltProgram {
    fn check_witness(&self, candidate: &Candidate, pe: Option<&PeData>) -> WitnessReport {
        let mut x = vec![0.0; self.prog.n_vars()];
        self.vars.pack(&candidate.tube, &mut x);
        if let (Some(pv), Some(data)) = (&self.pe_vars, pe) {
            for (w, ms) in pv.blocks.iter().enumerate() {
                x[pv.beta.var(w)] = data.beta_hat[w];
                for ((_, m), block) in ms.iter().zip(&candidate.reference[w].blocks) {
                    let n = block.nrows();
                    for i in 0..n {
                        for j in i..n {
                            x[m.sym(i, j)] = block[(i, j)];
                        }
                    }
                }
            }
        }
        let report = conic::verify_solution(&self.prog, &x);
        WitnessReport {
            violation: report.max_relative_violation,
            cost: self.cost.eval_seq(&candidate.tube.v),
        }
    }
}

/// Outcome of one `P₍₎₀` solve.
#[derive(Clone, Debug)]
pub struct PgtSolution {
    pub tube: TubeSolution,
    /// Certified `M` blocks per window (empty without PE constraints).
    pub blocks: Vec<Vec<DMatrix<f64>>>,
    pub witness: WitnessReport,
    pub solve_time: Duration,
    pub iterations: u32,
}

/// Per-run controller memory.
#[derive(Clone, Debug)]
pub struct ControllerState {
    pub t: usize,
    pub identifier: Identifier,
    pub theta_bar: DVector<f64>,
    pub terminal_cost: DMatrix<f64>,
    pub previous: Option<TubeSolution>,
    pub history: HistoryBuffer,
    last: Option<(DVector<f64>, DVector<f64>)>,
}

impl ControllerState {
    pub fn new(problem: &MpcProblem) -> Result<Self> {
        let theta_bar = problem.initial_nominal()?;
        Ok(Self {
            t: 0,
            identifier: Identifier::new(problem.theta0.clone(), problem.settings.id_window),
            terminal_cost: problem.terminal_cost(&theta_bar)?,
            theta_bar,
            previous: None,
            history: HistoryBuffer::new(),
            last: None,
        })
    }

    pub fn theta_set(&self) -> &ParamSetEstimate {
        self.identifier.current()
    }
}

/// Everything recorded about one closed-loop step.
#[derive(Clone, Debug, Default, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub u: Vec<f64>,
    /// `J` of the applied perturbation sequence (NaN for the feedback-only variant).
    pub objective: f64,
    pub beta_prime: Vec<f64>,
    pub beta_hat_prime: Vec<f64>,
    pub beta_sampled: Vec<f64>,
    pub beta_hat_sampled: Vec<f64>,
    pub fallback: bool,
    /// Shifted-candidate check; `None` at `t = 0` and for the feedback-only variant.
    pub witness: Option<WitnessReport>,
    /// `min λ_min(ΦᵀΦ − M_k / scale)` over blocks and tube vertices (PE variant only).
    pub linearization_gap: Option<f64>,
    pub pe_scale: f64,
    pub solver_status: String,
    pub solve_time: f64,
    pub step_time: f64,
}

impl MpcProblem {
    /// Runs one step of the selected variant at the measured state `x_t` and
    /// returns the input to apply together with the step record.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut ControllerState,
        algorithm: Algorithm,
        x_t: &DVector<f64>,
        rng: &mut R,
    ) -> Result<StepRecord> {
        let started = Instant::now();
        let t = state.t;
        self.absorb(state, x_t)?;
        let mut record = StepRecord {
            t,
            objective: f64::NAN,
            pe_scale: 1.0,
            solver_status: "none".into(),
            ..Default::default()
        };
        let u = match algorithm {
            Algorithm::NoisyFeedback => self.model.gain() * x_t + self.noise(rng)?,
            _ if state.previous.is_none() => {
                let sol = self.solve_p0(x_t, &state.theta_bar)?;
                record.objective = sol.objective;
                record.solver_status = "optimal".into();
                let u = self.model.gain() * x_t + &sol.v[0];
                state.previous = Some(sol);
                u
            }
            _ => self.mpc_step(state, algorithm, x_t, rng, &mut record)?,
        };
        record.u = u.iter().copied().collect();
        state.history.push(gram(&self.model, x_t, &u));
        state.last = Some((x_t.clone(), u.clone()));
        state.t += 1;
        record.step_time = started.elapsed().as_secs_f64();
        Ok(record)
    }

    /// Step (b): folds the transition into `x_t` into `Θ`, `θ̄` and the terminal cost.
    /// A no-op when already absorbed or at `t = 0`.
    pub fn absorb(&self, state: &mut ControllerState, x_t: &DVector<f64>) -> Result<()> {
        if let Some((x_prev, u_prev)) = state.last.take() {
            state.identifier.observe(&self.model, x_t, &x_prev, &u_prev)?;
            state.theta_bar = project_nominal(&state.theta_bar, state.identifier.current())?;
            state.terminal_cost = self.terminal_cost(&state.theta_bar)?;
        }
        Ok(())
    }

    fn mpc_step<R: Rng + ?Sized>(
        &self,
        state: &mut ControllerState,
        algorithm: Algorithm,
        x_t: &DVector<f64>,
        rng: &mut R,
        record: &mut StepRecord,
    ) -> Result<DVector<f64>> {
        let t = state.t;
        let n = self.settings.horizon;
        let prev = state.previous.as_ref().expect("previous solution");
        let noise: Vec<DVector<f64>> = (0..self.settings.window).map(|_| self.noise(rng)).collect::<Result<_>>()?;
        let reference =
            ReferenceTrajectory::build(&self.model, &state.theta_bar, x_t, &prev.v[1..], noise, self.n_blocks());
        let mut candidate_tube = prev.shifted(x_t, reference.v_hat.clone());
        let p = state.terminal_cost.clone();

        let (pe, candidate) = if algorithm == Algorithm::PersistentlyExciting {
            let linearizations: Vec<Linearization> = (0..self.n_blocks())
                .map(|k| Linearization::new(&self.model, &reference.x_hat[k], &reference.u_hat[k]))
                .collect();
            let scale = pe_scale(&linearizations);
            let layout = PEWindowLayout::new(n, self.settings.window, t);
            let kappas: Vec<i64> = layout.kappas().collect();
            let per_step: Vec<Vec<DMatrix<f64>>> = (0..self.n_blocks())
                .map(|k| self.vertex_bounds(&linearizations, &reference, &candidate_tube, k))
                .collect();
            let windows: Vec<WindowData> = kappas
                .iter()
                .map(|&kappa| -> Result<WindowData> {
                    Ok(WindowData {
                        kappa,
                        past: state.history.past_sum(t, kappa, self.model.np())?,
                        bounds: layout.decision_steps(kappa).map(|k| per_step[k].clone()).collect(),
                    })
                })
                .collect::<Result<_>>()?;
            let coefficients: Vec<ReferenceCoefficient> = parallel::map(&windows, |w| reference_beta_prime(w, scale))
                .into_iter()
                .collect::<std::result::Result<_, _>>()?;
            let data = PeData {
                layout,
                reference: reference.clone(),
                linearizations,
                scale,
                past: windows.into_iter().map(|w| w.past).collect(),
                beta_hat: coefficients.iter().map(|c| c.beta_scaled).collect(),
            };
            candidate_tube.beta_prime = data.beta_hat.clone();
            (
                Some(data),
                Candidate {
                    tube: candidate_tube,
                    reference: coefficients,
                },
            )
        } else {
            (
                None,
                Candidate {
                    tube: candidate_tube,
                    reference: Vec::new(),
                },
            )
        };

        let solved = self.solve_pgt0(t, x_t, state.theta_set(), &state.theta_bar, &p, &candidate, pe.as_ref())?;
        record.witness = Some(solved.witness);
        record.solve_time = solved.solve_time.as_secs_f64();
        record.solver_status = "optimal".into();
        let mut applied = solved.tube;
        let mut blocks = solved.blocks;

        if let Some(data) = &pe {
            record.pe_scale = data.scale;
            record.beta_hat_prime = data.beta_hat.clone();
            record.beta_prime = applied.beta_prime.clone();
            let (beta_s, beta_hat_s) = self.sampled_check(state, data, &applied, &candidate.tube, rng)?;
            let verdict = posterior_check(&beta_s, &beta_hat_s);
            record.beta_sampled = beta_s;
            record.beta_hat_sampled = beta_hat_s;
            if let PosteriorVerdict::Fallback { .. } = verdict {
                record.fallback = true;
                applied = candidate.tube.clone();
                applied.objective = solved.witness.cost;
                blocks = candidate.reference.iter().map(|c| c.blocks.clone()).collect();
            }
            record.linearization_gap = Some(self.linearization_gap(data, &applied, &blocks));
        }
        record.objective = applied.objective;
        let u = self.model.gain() * x_t + &applied.v[0];
        state.previous = Some(applied);
        Ok(u)
    }

    /// `(β^s, β̂^s)` from common shape samples mapped into the current and candidate tubes.
    fn sampled_check<R: Rng + ?Sized>(
        &self,
        state: &ControllerState,
        data: &PeData,
        current: &TubeSolution,
        candidate: &TubeSolution,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let centre = self.shape.vertices.centroid();
        let sampler = HitAndRun::default();
        let mut now = Vec::with_capacity(self.n_blocks());
        let mut before = Vec::with_capacity(self.n_blocks());
        for k in 0..self.n_blocks() {
            let shape_points = if k == 0 {
                vec![DVector::zeros(self.model.nx())]
            } else {
                sampler.sample(&self.shape.set, &centre, self.settings.samples, rng)
            };
            let grams = |tube: &TubeSolution| {
                let q = self.input_offset(&data.reference, tube, k);
                StepSamples::new(
                    shape_points
                        .iter()
                        .map(|xi| {
                            let x = tube.center(k) + xi * tube.scale(k);
                            gram(&self.model, &x, &(self.model.gain() * &x + &q))
                        })
                        .collect(),
                )
            };
            now.push(grams(current));
            before.push(grams(candidate));
        }
        let np = self.model.np();
        Ok((
            sampled_betas(&data.layout, &state.history, np, &now)?,
            sampled_betas(&data.layout, &state.history, np, &before)?,
        ))
    }

    /// `min λ_min(Φ(x_j)ᵀΦ(x_j) − M^κ_k / scale)` over windows, blocks and tube vertices,
    /// in the unscaled units of the regressor Gram.
    fn linearization_gap(&self, data: &PeData, tube: &TubeSolution, blocks: &[Vec<DMatrix<f64>>]) -> f64 {
        let mut worst = f64::INFINITY;
        for (w, &kappa) in data.layout.kappas().collect::<Vec<_>>().iter().enumerate() {
            for (m, k) in blocks[w].iter().zip(data.layout.decision_steps(kappa)) {
                let q = self.input_offset(&data.reference, tube, k);
                for x in tube.vertices(k, &self.shape) {
                    let g = gram(&self.model, &x, &(self.model.gain() * &x + &q)) * data.scale;
                    worst = worst.min(min_eigenvalue(&(g - m)));
                }
            }
        }
        worst / data.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::ModelSpec;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example_problem() -> MpcProblem {
        let model = UncertainModel::from_spec(&ModelSpec::second_order_example()).unwrap();
        let x_set = HPolytope::new(DMatrix::from_row_slice(1, 2, &[0.0, -1.0]), dvector![0.3]).unwrap();
        let u_set = HPolytope::new(DMatrix::from_row_slice(1, 1, &[1.0]), dvector![1.0]).unwrap();
        let theta0 = ParamSetEstimate::from_polytope(HPolytope::inf_ball(3, 1.0));
        MpcProblem::new(
            model,
            x_set,
            u_set,
            theta0,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            MpcSettings {
                horizon: 10,
                window: 3,
                id_window: 3,
                samples: 4,
            },
        )
        .unwrap()
    }

    #[test]
    fn p0_at_origin_is_trivial() {
        let pr = example_problem();
        let sol = pr.solve_p0(&DVector::zeros(2), &DVector::zeros(3)).unwrap();
        assert!(sol.objective.abs() < 1e-6);
        assert!(sol.v.iter().all(|v| v.amax() < 1e-4));
    }

    #[test]
    fn p0_rejects_state_violation() {
        let pr = example_problem();
        let err = pr.solve_p0(&dvector![0.0, -0.5], &DVector::zeros(3));
        assert!(matches!(err, Err(ControllerError::InitialInfeasible(_))));
    }

    #[test]
    fn p0_feasible_at_default_initial_state() {
        let pr = example_problem();
        let sol = pr.solve_p0(&dvector![1.0, 0.3], &DVector::zeros(3)).unwrap();
        assert!(sol.objective.is_finite());
        assert!(sol.alpha.iter().all(|&a| a >= -1e-9));
    }

    fn run(pr: &MpcProblem, algorithm: Algorithm, steps: usize, seed: u64) -> Vec<StepRecord> {
        let theta_star = dvector![0.8, 0.2, -0.5];
        let mut state = ControllerState::new(pr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = dvector![1.0, 0.3];
        let mut out = Vec::new();
        for _ in 0..steps {
            let rec = pr.step(&mut state, algorithm, &x, &mut rng).unwrap();
            let u = DVector::from_vec(rec.u.clone());
            let w = DVector::from_fn(2, |_, _| rng.random_range(-0.05..0.05));
            x = pr.model.step(&x, &u, &w, &theta_star).unwrap();
            out.push(rec);
        }
        out
    }

    #[test]
    fn short_pe_run_is_recursively_feasible() {
        let pr = example_problem();
        let recs = run(&pr, Algorithm::PersistentlyExciting, 6, 3);
        for r in &recs[1..] {
            let w = r.witness.unwrap();
            assert!(w.feasible(), "t = {}: {:?}", r.t, w);
            assert!(r.objective <= w.cost + 1e-6 * w.cost.abs().max(1.0));
            assert!(r.linearization_gap.unwrap() >= -1e-8, "t = {}: {:?}", r.t, r.linearization_gap);
            for (b, bh) in r.beta_prime.iter().zip(&r.beta_hat_prime) {
                assert!(b >= bh || r.fallback);
            }
            assert!(r.u[0] <= 1.0);
        }
    }

    #[test]
    fn short_plain_run_is_recursively_feasible() {
        let pr = example_problem();
        let recs = run(&pr, Algorithm::Plain, 6, 3);
        for r in &recs[1..] {
            assert!(r.witness.unwrap().feasible());
            assert!(r.beta_prime.is_empty() && !r.fallback);
        }
    }

    #[test]
    fn equilibrium_stays_at_rest_without_noise() {
        let mut pr = example_problem();
        let mut spec = pr.model.to_spec();
        spec.w = HPolytope::inf_ball(2, 0.0);
        spec.s = HPolytope::inf_ball(1, 0.0);
        pr = MpcProblem::new(
            UncertainModel::from_spec(&spec).unwrap(),
            pr.x_set.clone(),
            pr.u_set.clone(),
            pr.theta0.clone(),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            pr.settings,
        )
        .unwrap();
        let mut state = ControllerState::new(&pr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = DVector::zeros(2);
        let theta_star = dvector![0.8, 0.2, -0.5];
        for _ in 0..3 {
            let rec = pr.step(&mut state, Algorithm::PersistentlyExciting, &x, &mut rng).unwrap();
            assert!(rec.u[0].abs() < 1e-5, "{:?}", rec.u);
            let u = DVector::from_vec(rec.u);
            x = pr.model.step(&x, &u, &DVector::zeros(2), &theta_star).unwrap();
        }
    }
}
