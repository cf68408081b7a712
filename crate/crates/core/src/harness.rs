//! Closed-loop Monte-Carlo experiments and their on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Algorithm, ControllerError, ControllerState, MpcProblem, MpcSettings, StepRecord};
use crate::geometry::{sample_box, GeometryError, HPolytope};
use crate::identify::ParamSetEstimate;
use crate::parallel;
use crate::plant::{matrix_from_rows, MatrixRows, ModelSpec, PlantError, Trajectory, UncertainModel};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{controller} run {run}: {source}")]
    Run {
        controller: String,
        run: usize,
        #[source]
        source: ControllerError,
    },
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Profile::Desk),
            "paper" => Some(Profile::Paper),
            _ => None,
        }
    }
}

/// Truncated normal disturbance: per-coordinate `N(0, std²)` restricted to the box `W`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    pub std: f64,
}

/// Every input of an experiment; no hidden defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub theta_star: Vec<f64>,
    /// Initial parameter set (axis-aligned box).
    pub theta0: HPolytope,
    pub x_set: HPolytope,
    pub u_set: HPolytope,
    pub x0: Vec<f64>,
    pub q: MatrixRows,
    pub r: MatrixRows,
    pub horizon: usize,
    pub window: usize,
    pub id_window: usize,
    pub samples: usize,
    /// Closed-loop steps per run `N_av`.
    pub run_length: usize,
    /// Disturbance sequences `N_w`.
    pub runs: usize,
    pub disturbance: DisturbanceConfig,
    pub controllers: Vec<Algorithm>,
    pub master_seed: u64,
    /// Times at which mean volume ratios are reported.
    pub report_times: Vec<usize>,
}

impl ExperimentConfig {
    /// Second-order example at the given scale.
    pub fn example(profile: Profile) -> Self {
        let (run_length, runs, samples, name) = match profile {
            Profile::Desk => (100, 5, 10, "desk"),
            Profile::Paper => (500, 30, 30, "paper"),
        };
        Self {
            name: name.into(),
            model: ModelSpec::second_order_example(),
            theta_star: vec![0.8, 0.2, -0.5],
            theta0: HPolytope::inf_ball(3, 1.0),
            x_set: HPolytope::new(
                nalgebra::DMatrix::from_row_slice(1, 2, &[0.0, -1.0]),
                nalgebra::dvector![0.3],
            )
            .expect("static data"),
            u_set: HPolytope::new(nalgebra::DMatrix::from_row_slice(1, 1, &[1.0]), nalgebra::dvector![1.0])
                .expect("static data"),
            x0: vec![1.0, 0.3],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![1.0]],
            horizon: 10,
            window: 3,
            id_window: 3,
            samples,
            run_length,
            runs,
            disturbance: DisturbanceConfig { std: 0.06 },
            controllers: vec![Algorithm::PersistentlyExciting, Algorithm::Plain, Algorithm::NoisyFeedback],
            master_seed: 2024,
            report_times: vec![100, 200, 500].into_iter().filter(|&t| t <= run_length).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks; names the violated bound.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let model = UncertainModel::from_spec(&self.model).map_err(|e| HarnessError::Config(e.to_string()))?;
        let (nx, nu, np) = (model.nx(), model.nu(), model.np());
        if self.window <= nx {
            return bad(format!("window (N_u = {}) must exceed the state dimension n_x = {nx}", self.window));
        }
        if self.id_window < self.window {
            return bad(format!(
                "identification window (N_mu = {}) must be at least N_u = {}",
                self.id_window, self.window
            ));
        }
        if self.horizon < 2 {
            return bad("horizon must be at least 2".into());
        }
        if self.samples == 0 || self.runs == 0 || self.run_length == 0 {
            return bad("samples, runs and run_length must be positive".into());
        }
        if self.theta_star.len() != np || self.theta0.dim() != np {
            return bad(format!("parameter dimension must be {np}"));
        }
        if self.theta0.box_bounds().is_none() {
            return bad("theta0 must be an axis-aligned box".into());
        }
        if !self.theta0.contains_point(&DVector::from_vec(self.theta_star.clone()), 0.0) {
            return bad("theta_star must lie in theta0".into());
        }
        if self.x0.len() != nx || self.x_set.dim() != nx || self.u_set.dim() != nu {
            return bad("state/input dimensions do not match the model".into());
        }
        if self.model.w.box_bounds().is_none() || self.model.s.box_bounds().is_none() {
            return bad("W and S must be axis-aligned boxes".into());
        }
        if !(self.disturbance.std > 0.0) {
            return bad("disturbance std must be positive".into());
        }
        if self.controllers.is_empty() {
            return bad("at least one controller is required".into());
        }
        if self.report_times.iter().any(|&t| t > self.run_length) {
            return bad("report times must not exceed run_length".into());
        }
        for (name, m, n) in [("q", &self.q, nx), ("r", &self.r, nu)] {
            let m = matrix_from_rows(m).map_err(|e| HarnessError::Config(e.to_string()))?;
            if m.nrows() != n || m.ncols() != n {
                return bad(format!("{name} must be {n}x{n}"));
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> MpcSettings {
        MpcSettings {
            horizon: self.horizon,
            window: self.window,
            id_window: self.id_window,
            samples: self.samples,
        }
    }

    /// Offline synthesis shared by every run.
    pub fn problem(&self) -> Result<MpcProblem> {
        self.validate()?;
        let model = UncertainModel::from_spec(&self.model)?;
        Ok(MpcProblem::new(
            model,
            self.x_set.clone(),
            self.u_set.clone(),
            ParamSetEstimate::from_polytope(self.theta0.clone()),
            matrix_from_rows(&self.q)?,
            matrix_from_rows(&self.r)?,
            self.settings(),
        )?)
    }
}

/// Purpose tag of an RNG stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Disturbance = 1,
    Controller = 2,
}

/// Counter-based stream keyed by `(master, run, step, purpose)`.
pub fn stream_rng(master: u64, run: usize, step: usize, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((run as u64) << 8) | purpose as u64);
    rng.set_word_pos((step as u128) << 40);
    rng
}

/// Per-coordinate truncated normal on the box `w_set`, by rejection.
pub fn draw_disturbance<R: Rng + ?Sized>(w_set: &HPolytope, std: f64, rng: &mut R) -> Result<DVector<f64>> {
    let (lo, hi) = w_set
        .box_bounds()
        .ok_or_else(|| HarnessError::Config("W must be a box".into()))?;
    let normal = Normal::new(0.0, std).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(DVector::from_fn(lo.len(), |i, _| {
        if hi[i] <= lo[i] {
            return lo[i];
        }
        loop {
            let w: f64 = normal.sample(rng);
            if w >= lo[i] && w <= hi[i] {
                return w;
            }
        }
    }))
}

/// Uniform noise on the box `s_set`.
pub fn draw_noise<R: Rng + ?Sized>(s_set: &HPolytope, rng: &mut R) -> Result<DVector<f64>> {
    Ok(sample_box(s_set, rng)?)
}

/// Per-run series and scalar summaries.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunMetrics {
    /// `ε_t`, zero before a full window is available.
    pub epsilon: Vec<f64>,
    /// `|Θ_t| / |Θ_0|` for `t = 0..=N_av`.
    pub volume_ratio: Vec<f64>,
    /// `Σ_t x_tᵀQx_t + u_tᵀRu_t`.
    pub cost: f64,
    pub fallback_rate: f64,
    pub solve_times: Vec<f64>,
    pub step_times: Vec<f64>,
    pub state_violations: usize,
    pub input_violations: usize,
    pub max_state_norm: f64,
    /// Steps where `θ* ∉ Θ_t`.
    pub truth_violations: usize,
    /// Steps where some offset of `μ_t` increased.
    pub monotonicity_violations: usize,
    /// Steps where the shifted candidate was not feasible or beat the optimum.
    pub witness_failures: usize,
    /// Smallest linearization gap (PE variant) over the run.
    pub min_linearization_gap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub controller: Algorithm,
    pub run: usize,
    pub trajectory: Trajectory,
    pub records: Vec<StepRecord>,
    /// `μ_t` for `t = 0..=N_av`.
    pub offsets: Vec<Vec<f64>>,
    pub metrics: RunMetrics,
}

/// Relative slack allowed when comparing the solver optimum with the candidate cost.
pub const COST_TOL: f64 = 1e-6;

/// Simulates `N_av` steps of `controller` on disturbance sequence `run`.
pub fn run_closed_loop(
    problem: &MpcProblem,
    config: &ExperimentConfig,
    controller: Algorithm,
    run: usize,
) -> Result<RunResult> {
    let wrap = |source: ControllerError| HarnessError::Run {
        controller: controller.label().into(),
        run,
        source,
    };
    let model = &problem.model;
    let theta_star = DVector::from_vec(config.theta_star.clone());
    let q = matrix_from_rows(&config.q)?;
    let r = matrix_from_rows(&config.r)?;
    let mut state = ControllerState::new(problem).map_err(wrap)?;
    let mut x = DVector::from_vec(config.x0.clone());
    let mut trajectory = Trajectory::new(x.clone());
    let mut records = Vec::with_capacity(config.run_length);
    let mut metrics = RunMetrics::default();
    let mut offsets = vec![state.theta_set().offsets().iter().copied().collect::<Vec<_>>()];
    let initial_volume = state.identifier.volume_ratio().map_err(|e| wrap(e.into()))?;
    metrics.volume_ratio.push(initial_volume);
    let mut fallbacks = 0usize;
    let track = |state: &ControllerState, metrics: &mut RunMetrics, offsets: &mut Vec<Vec<f64>>| -> Result<()> {
        let mu: Vec<f64> = state.theta_set().offsets().iter().copied().collect();
        if let Some(prev) = offsets.last() {
            if mu.iter().zip(prev).any(|(a, b)| a > b) {
                metrics.monotonicity_violations += 1;
            }
        }
        if !state.theta_set().contains(&theta_star, 1e-9) {
            metrics.truth_violations += 1;
        }
        metrics
            .volume_ratio
            .push(state.identifier.volume_ratio().map_err(|e| wrap(e.into()))?);
        offsets.push(mu);
        Ok(())
    };
    for t in 0..config.run_length {
        let mut rng = stream_rng(config.master_seed, run, t, Stream::Controller);
        let rec = problem.step(&mut state, controller, &x, &mut rng).map_err(wrap)?;
        if t > 0 {
            track(&state, &mut metrics, &mut offsets)?;
        }
        let u = DVector::from_vec(rec.u.clone());
        if !problem.x_set.contains_point(&x, 0.0) {
            metrics.state_violations += 1;
        }
        if !problem.u_set.contains_point(&u, 0.0) {
            metrics.input_violations += 1;
        }
        metrics.max_state_norm = metrics.max_state_norm.max(x.norm());
        metrics.cost += x.dot(&(&q * &x)) + u.dot(&(&r * &u));
        metrics.epsilon.push(if t + 1 >= config.window {
            state.history.closed_loop_epsilon(t, config.window).map_err(|e| wrap(e.into()))?
        } else {
            0.0
        });
        if let Some(w) = &rec.witness {
            if !w.feasible() || rec.objective > w.cost + COST_TOL * w.cost.abs().max(1.0) {
                metrics.witness_failures += 1;
            }
        }
        if let Some(g) = rec.linearization_gap {
            metrics.min_linearization_gap = Some(metrics.min_linearization_gap.map_or(g, |m: f64| m.min(g)));
        }
        fallbacks += rec.fallback as usize;
        metrics.solve_times.push(rec.solve_time);
        metrics.step_times.push(rec.step_time);
        let mut drng = stream_rng(config.master_seed, run, t, Stream::Disturbance);
        let w = draw_disturbance(model.w_set(), config.disturbance.std, &mut drng)?;
        let x_next = model.step(&x, &u, &w, &theta_star)?;
        let s = &u - model.gain() * &x;
        trajectory.push(u, w, s, x_next.clone());
        records.push(rec);
        x = x_next;
    }
    problem.absorb(&mut state, &x).map_err(wrap)?;
    track(&state, &mut metrics, &mut offsets)?;
    metrics.fallback_rate = fallbacks as f64 / config.run_length.saturating_sub(1).max(1) as f64;
    Ok(RunResult {
        controller,
        run,
        trajectory,
        records,
        offsets,
        metrics,
    })
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:e}")
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

/// Per-step series of one run; timing columns are excluded so identical inputs give
/// identical bytes.
pub fn run_csv(result: &RunResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let nx = result.trajectory.states[0].len();
    let nu = result.trajectory.inputs.first().map_or(0, |u| u.len());
    let nw = result.trajectory.disturbances.first().map_or(0, |d| d.len());
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..nx).map(|i| format!("x{i}")));
    header.extend((0..nu).map(|i| format!("u{i}")));
    header.extend((0..nw).map(|i| format!("w{i}")));
    header.extend(
        [
            "epsilon",
            "volume_ratio",
            "mu",
            "objective",
            "fallback",
            "witness_violation",
            "witness_cost",
            "linearization_gap",
            "beta_prime",
            "beta_hat_prime",
            "beta_sampled",
            "beta_hat_sampled",
            "solver_status",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for (t, rec) in result.records.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(result.trajectory.states[t].iter().map(|v| fmt_f64(*v)));
        row.extend(result.trajectory.inputs[t].iter().map(|v| fmt_f64(*v)));
        row.extend(result.trajectory.disturbances[t].iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(result.metrics.epsilon[t]));
        row.push(fmt_f64(result.metrics.volume_ratio[t]));
        row.push(join(&result.offsets[t]));
        row.push(fmt_f64(rec.objective));
        row.push((rec.fallback as u8).to_string());
        row.push(rec.witness.map_or(String::new(), |w| fmt_f64(w.violation)));
        row.push(rec.witness.map_or(String::new(), |w| fmt_f64(w.cost)));
        row.push(rec.linearization_gap.map_or(String::new(), fmt_f64));
        row.push(join(&rec.beta_prime));
        row.push(join(&rec.beta_hat_prime));
        row.push(join(&rec.beta_sampled));
        row.push(join(&rec.beta_hat_sampled));
        row.push(rec.solver_status.clone());
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))
}

/// Aggregates of one controller over all completed runs.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ControllerSummary {
    pub controller: String,
    pub completed_runs: usize,
    pub failures: Vec<String>,
    /// `(1/(N_av N_w)) Σ ε_t`.
    pub epsilon_hat: f64,
    /// Mean volume ratio in percent at each report time.
    pub volume_percent: BTreeMap<usize, f64>,
    pub mean_cost: f64,
    pub fallback_rate: f64,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    pub state_violations: usize,
    pub input_violations: usize,
    pub truth_violations: usize,
    pub monotonicity_violations: usize,
    pub witness_failures: usize,
    pub max_state_norm: f64,
    pub min_linearization_gap: Option<f64>,
}

/// Table-shaped report with the resolved configuration embedded.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub controllers: Vec<ControllerSummary>,
    /// Relative cost improvement of the PE variant over the plain one, when both ran.
    pub cost_improvement: Option<f64>,
}

impl Summary {
    pub fn get(&self, controller: Algorithm) -> Option<&ControllerSummary> {
        self.controllers.iter().find(|c| c.controller == controller.label())
    }
}

/// Completed runs (ordered by run index) and failures per controller.
pub struct MonteCarlo {
    pub summary: Summary,
    pub results: BTreeMap<String, Vec<RunResult>>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn summarize(controller: Algorithm, config: &ExperimentConfig, runs: &[RunResult], failures: Vec<String>) -> ControllerSummary {
    let mut s = ControllerSummary {
        controller: controller.label().into(),
        completed_runs: runs.len(),
        failures,
        ..Default::default()
    };
    s.epsilon_hat = mean(runs.iter().flat_map(|r| r.metrics.epsilon.iter().copied()));
    for &t in &config.report_times {
        s.volume_percent
            .insert(t, 100.0 * mean(runs.iter().map(|r| r.metrics.volume_ratio[t])));
    }
    s.mean_cost = mean(runs.iter().map(|r| r.metrics.cost));
    s.fallback_rate = mean(runs.iter().map(|r| r.metrics.fallback_rate));
    s.mean_solve_time = mean(runs.iter().flat_map(|r| r.metrics.solve_times.iter().copied()));
    s.max_solve_time = runs
        .iter()
        .flat_map(|r| r.metrics.solve_times.iter().copied())
        .fold(0.0, f64::max);
    for r in runs {
        let m = &r.metrics;
        s.state_violations += m.state_violations;
        s.input_violations += m.input_violations;
        s.truth_violations += m.truth_violations;
        s.monotonicity_violations += m.monotonicity_violations;
        s.witness_failures += m.witness_failures;
        s.max_state_norm = s.max_state_norm.max(m.max_state_norm);
        if let Some(g) = m.min_linearization_gap {
            s.min_linearization_gap = Some(s.min_linearization_gap.map_or(g, |x: f64| x.min(g)));
        }
    }
    s
}

/// Runs every configured controller on `config.runs` disturbance sequences.
pub fn monte_carlo(config: &ExperimentConfig) -> Result<MonteCarlo> {
    let problem = config.problem()?;
    let tasks: Vec<(Algorithm, usize)> = config
        .controllers
        .iter()
        .flat_map(|&c| (0..config.runs).map(move |i| (c, i)))
        .collect();
    let outcomes = parallel::map(&tasks, |&(c, i)| run_closed_loop(&problem, config, c, i));
    let mut results: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    let mut failures: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for ((c, _), out) in tasks.iter().zip(outcomes) {
        match out {
            Ok(r) => results.entry(c.label().into()).or_default().push(r),
            Err(e) => failures.entry(c.label().into()).or_default().push(e.to_string()),
        }
    }
    let controllers: Vec<ControllerSummary> = config
        .controllers
        .iter()
        .map(|&c| {
            let runs = results.get(c.label()).map(Vec::as_slice).unwrap_or(&[]);
            summarize(c, config, runs, failures.remove(c.label()).unwrap_or_default())
        })
        .collect();
    let find = |a: Algorithm| controllers.iter().find(|s| s.controller == a.label());
    let cost_improvement = match (find(Algorithm::PersistentlyExciting), find(Algorithm::Plain)) {
        (Some(a1), Some(a2)) if a1.completed_runs > 0 && a2.completed_runs > 0 => {
            Some((a2.mean_cost - a1.mean_cost) / a2.mean_cost)
        }
        _ => None,
    };
    Ok(MonteCarlo {
        summary: Summary {
            config: config.clone(),
            controllers,
            cost_improvement,
        },
        results,
    })
}

/// Mean series across runs, one column per controller.
fn figure_csv(results: &BTreeMap<String, Vec<RunResult>>, order: &[Algorithm], series: impl Fn(&RunResult) -> &[f64]) -> String {
    let cols: Vec<(&str, &Vec<RunResult>)> = order
        .iter()
        .filter_map(|c| results.get(c.label()).map(|r| (c.label(), r)))
        .collect();
    let len = cols
        .iter()
        .flat_map(|(_, rs)| rs.iter().map(|r| series(r).len()))
        .max()
        .unwrap_or(0);
    let mut out = String::from("t");
    for (name, _) in &cols {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..len {
        let _ = write!(out, "{t}");
        for (_, rs) in &cols {
            let m = mean(rs.iter().filter_map(|r| series(r).get(t).copied()));
            let _ = write!(out, ",{}", fmt_f64(m));
        }
        out.push('\n');
    }
    out
}

/// Writes `<controller>/run_<i>.csv`, `summary.json` and `figures/*.csv` under `out`.
pub fn write_artifacts(mc: &MonteCarlo, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("figures"))?;
    for (name, runs) in &mc.results {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        for r in runs {
            std::fs::write(dir.join(format!("run_{}.csv", r.run)), run_csv(r)?)?;
        }
    }
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&mc.summary)? + "\n")?;
    let order = &mc.summary.config.controllers;
    std::fs::write(
        out.join("figures/volume_ratio.csv"),
        figure_csv(&mc.results, order, |r| &r.metrics.volume_ratio),
    )?;
    std::fs::write(
        out.join("figures/epsilon.csv"),
        figure_csv(&mc.results, order, |r| &r.metrics.epsilon),
    )?;
    Ok(())
}

/// Largest `sup_t ‖x_t‖` over a calibration batch on sequences disjoint from the evaluation runs.
pub fn calibration_state_bound(config: &ExperimentConfig, controller: Algorithm, runs: usize) -> Result<f64> {
    let mut cal = config.clone();
    cal.master_seed = config.master_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    cal.runs = runs;
    let problem = cal.problem()?;
    let idx: Vec<usize> = (0..runs).collect();
    let norms = parallel::map(&idx, |&i| run_closed_loop(&problem, &cal, controller, i).map(|r| r.metrics.max_state_norm));
    norms.into_iter().try_fold(0.0f64, |m, n| Ok(m.max(n?)))
}

/// One assumption check with its certificate data.
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub all_passed: bool,
}

/// Certificates for the checkable standing assumptions of `config`; failures are
/// report entries, not errors.
pub fn check_assumptions(config: &ExperimentConfig) -> Result<AssumptionReport> {
    config.validate()?;
    let model = UncertainModel::from_spec(&config.model)?;
    let theta_vertices = config.theta0.vertices()?;
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: serde_json::Value| {
        checks.push(AssumptionCheck {
            name: name.into(),
            passed,
            detail,
        })
    };

    let id = model.identifiability_margin();
    push(
        "identifiability",
        id > 1e-9,
        serde_json::json!({ "min_singular_value": id }),
    );

    let cert = model.lyapunov_certificate(&theta_vertices)?;
    push(
        "robust_stability",
        cert.holds,
        serde_json::json!({
            "spectral_radii": cert.spectral_radii,
            "unstable_vertex": cert.unstable_vertex(),
            "lyapunov_matrix": cert.matrix.as_ref().map(crate::plant::matrix_to_rows),
        }),
    );

    let (w_lo, w_hi) = config.model.w.box_bounds().expect("validated");
    let w_width = (&w_hi - &w_lo).min();
    push(
        "disturbance_set",
        w_width > 0.0,
        serde_json::json!({ "min_width": w_width }),
    );

    let (s_lo, s_hi) = config.model.s.box_bounds().expect("validated");
    let eps_s = s_lo
        .iter()
        .zip(s_hi.iter())
        .map(|(l, h)| (h - l).powi(2) / 12.0)
        .fold(f64::INFINITY, f64::min);
    push(
        "injected_noise",
        eps_s > 0.0,
        serde_json::json!({ "min_variance": eps_s }),
    );

    let margins: Vec<f64> = theta_vertices
        .vertices()
        .iter()
        .map(|th| model.reachability_margin(th))
        .collect();
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    push(
        "reachability",
        worst > 1e-9,
        serde_json::json!({ "per_vertex": margins, "min": worst }),
    );

    let x0 = DVector::from_vec(config.x0.clone());
    push(
        "initial_state_admissible",
        config.x_set.contains_point(&x0, 0.0),
        serde_json::json!({ "x0": config.x0 }),
    );

    match config.problem() {
        Ok(problem) => {
            let theta_bar = problem.initial_nominal()?;
            let p0 = problem.solve_p0(&x0, &theta_bar);
            push(
                "terminal_ingredients",
                true,
                serde_json::json!({
                    "facets": problem.terminal.set.n_rows(),
                    "vertices": problem.terminal.vertices.len(),
                    "iterations": problem.terminal.iterations,
                    "x0_in_terminal_set": problem.terminal.set.contains_point(&x0, 0.0),
                }),
            );
            push(
                "initial_feasibility",
                p0.is_ok(),
                serde_json::json!({ "error": p0.err().map(|e| e.to_string()) }),
            );
        }
        Err(e) => push(
            "terminal_ingredients",
            false,
            serde_json::json!({ "error": e.to_string() }),
        ),
    }
    let all_passed = checks.iter().all(|c| c.passed);
    Ok(AssumptionReport { checks, all_passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w_set() -> HPolytope {
        HPolytope::inf_ball(2, 0.05)
    }

    #[test]
    fn disturbances_stay_in_w_with_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let mut sum = [0.0f64; 2];
        let mut near_edge = 0usize;
        for _ in 0..n {
            let w = draw_disturbance(&w_set(), 0.06, &mut rng).unwrap();
            assert!(w.amax() <= 0.05);
            sum[0] += w[0];
            sum[1] += w[1];
            if (w[0] - 0.05).abs() < 0.01 {
                near_edge += 1;
            }
        }
        // Truncated-normal std is below the box half-width.
        let bound = 3.0 * 0.05 / (n as f64).sqrt();
        assert!(sum.iter().all(|s| (s / n as f64).abs() < bound), "{sum:?}");
        assert!(near_edge > 0);
    }

    #[test]
    fn noise_is_uniform_and_independent() {
        let s = HPolytope::inf_ball(1, 0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| draw_noise(&s, &mut rng).unwrap()[0]).collect();
        assert!(draws.iter().all(|d| d.abs() <= 0.005));
        let m = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n as f64;
        assert!((var / 8.33e-6 - 1.0).abs() < 0.05, "{var}");
        let lag1 = draws.windows(2).map(|p| (p[0] - m) * (p[1] - m)).sum::<f64>() / ((n - 1) as f64 * var);
        assert!(lag1.abs() < 3.0 / (n as f64).sqrt(), "{lag1}");
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = stream_rng(5, 1, 7, Stream::Disturbance).random();
        let b: f64 = stream_rng(5, 1, 7, Stream::Disturbance).random();
        let c: f64 = stream_rng(5, 1, 7, Stream::Controller).random();
        let d: f64 = stream_rng(5, 1, 8, Stream::Disturbance).random();
        let e: f64 = stream_rng(5, 2, 7, Stream::Disturbance).random();
        assert_eq!(a, b);
        assert!(a != c && a != d && a != e);
    }

    #[test]
    fn config_validation_names_bounds() {
        let mut cfg = ExperimentConfig::example(Profile::Desk);
        assert!(cfg.validate().is_ok());
        cfg.window = 2;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("N_u"), "{err}");
        let mut cfg = ExperimentConfig::example(Profile::Desk);
        cfg.id_window = 2;
        assert!(cfg.validate().unwrap_err().to_string().contains("N_mu"));
    }

    #[test]
    fn example_passes_assumption_checks() {
        let report = check_assumptions(&ExperimentConfig::example(Profile::Desk)).unwrap();
        assert!(report.all_passed, "{report:?}");
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::example(Profile::Paper);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    fn tiny(controllers: Vec<Algorithm>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::example(Profile::Desk);
        cfg.run_length = 5;
        cfg.runs = 1;
        cfg.samples = 3;
        cfg.report_times = vec![5];
        cfg.controllers = controllers;
        cfg
    }

    #[test]
    fn quiet_system_at_origin_stays_put() {
        let mut cfg = tiny(vec![Algorithm::Plain]);
        cfg.model.w = HPolytope::inf_ball(2, 0.0);
        cfg.model.s = HPolytope::inf_ball(1, 0.0);
        cfg.x0 = vec![0.0, 0.0];
        let problem = cfg.problem().unwrap();
        let r = run_closed_loop(&problem, &cfg, Algorithm::Plain, 0).unwrap();
        assert!(r.metrics.cost < 1e-8);
        assert!(r.metrics.epsilon.iter().all(|&e| e.abs() < 1e-12));
        // Exact zero input: the data carry no information beyond the prior.
        let r = run_closed_loop(&problem, &cfg, Algorithm::NoisyFeedback, 0).unwrap();
        assert_eq!(r.metrics.cost, 0.0);
        assert!(r.metrics.volume_ratio.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn disturbance_streams_do_not_depend_on_controller() {
        let cfg = tiny(vec![Algorithm::Plain, Algorithm::NoisyFeedback]);
        let problem = cfg.problem().unwrap();
        let a = run_closed_loop(&problem, &cfg, Algorithm::Plain, 0).unwrap();
        let b = run_closed_loop(&problem, &cfg, Algorithm::NoisyFeedback, 0).unwrap();
        assert_eq!(a.trajectory.disturbances, b.trajectory.disturbances);
        let again = run_closed_loop(&problem, &cfg, Algorithm::Plain, 0).unwrap();
        assert_eq!(run_csv(&a).unwrap(), run_csv(&again).unwrap());
        assert_eq!(a.metrics.volume_ratio.len(), cfg.run_length + 1);
    }
}
