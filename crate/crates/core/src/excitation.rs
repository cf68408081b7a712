//! Persistent-excitation bookkeeping: regressor Gram sums, window layout,
//! linearized PE bounds, reference coefficients and the sampled posterior check.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, LinExpr, SolveStatus, SolverSettings, SymExpr};
use crate::parallel;
use crate::plant::UncertainModel;

/// Upper limit on sample combinations enumerated per window.
pub const MAX_COMBINATIONS: usize = 1_000_000;

/// Margin subtracted from reference coefficients so the recursive-feasibility
/// witness satisfies the window LMI strictly (scaled units).
pub const WITNESS_MARGIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ExcitationError {
    #[error("history too short: need step {needed}, have {available}")]
    NotReady { needed: i64, available: usize },
    #[error("{0} sample combinations exceed the cap of {MAX_COMBINATIONS}")]
    TooManyCombinations(usize),
    #[error("reference coefficient SDP failed for window {kappa}: {status}")]
    ReferenceSdp { kappa: i64, status: String, program: String },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

pub type Result<T> = std::result::Result<T, ExcitationError>;

/// `Φ(x, u)ᵀ Φ(x, u)`
pub fn gram(model: &UncertainModel, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let phi = model.regressor(x, u);
    phi.transpose() * phi
}

/// `Σ Φ(x, u)ᵀ Φ(x, u)` over the given pairs.
pub fn pe_matrix(model: &UncertainModel, pairs: &[(DVector<f64>, DVector<f64>)]) -> DMatrix<f64> {
    let p = model.np();
    pairs.iter().fold(DMatrix::zeros(p, p), |acc, (x, u)| acc + gram(model, x, u))
}

/// Smallest eigenvalue of a symmetric matrix, closed form up to 3×3.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => f64::INFINITY,
        1 => m[(0, 0)],
        2 => {
            let (a, b, d) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            let mid = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            mid - rad
        }
        3 => min_eigenvalue_3(m),
        _ => conic::smallest_eigenvalue(m),
    }
}

fn min_eigenvalue_3(m: &DMatrix<f64>) -> f64 {
    let (a11, a12, a13) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (a22, a23, a33) = (m[(1, 1)], m[(1, 2)], m[(2, 2)]);
    let off = a12 * a12 + a13 * a13 + a23 * a23;
    if off == 0.0 {
        return a11.min(a22).min(a33);
    }
    let q = (a11 + a22 + a33) / 3.0;
    let (b11, b22, b33) = (a11 - q, a22 - q, a33 - q);
    let p2 = b11 * b11 + b22 * b22 + b33 * b33 + 2.0 * off;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return q;
    }
    let det = b11 * (b22 * b33 - a23 * a23) - a12 * (a12 * b33 - a23 * a13) + a13 * (a12 * a23 - b22 * a13);
    let r = (det / (2.0 * p * p * p)).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos()
}

/// Overlapping PE windows at time `t` over an `N`-step horizon with window length `N_u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PEWindowLayout {
    pub horizon: usize,
    pub window: usize,
    pub t: usize,
}

impl PEWindowLayout {
    pub fn new(horizon: usize, window: usize, t: usize) -> Self {
        assert!(window >= 1 && horizon >= 1);
        Self { horizon, window, t }
    }

    pub fn n_pe(&self) -> usize {
        if self.t + 1 < self.window {
            self.horizon + self.t
        } else {
            self.horizon + self.window - 1
        }
    }

    /// Window start offsets `κ`, relative to `t`.
    pub fn kappas(&self) -> RangeInclusive<i64> {
        let n = self.horizon as i64;
        (n - self.n_pe() as i64)..=(n - 1)
    }

    /// Prediction steps `k` covered by window `κ`.
    pub fn steps(&self, kappa: i64) -> RangeInclusive<i64> {
        kappa..=(kappa + self.window as i64 - 1)
    }

    /// Past steps (`k < 0`) of window `κ`.
    pub fn past_steps(&self, kappa: i64) -> RangeInclusive<i64> {
        kappa..=-1
    }

    /// Predicted steps (`k ≥ 0`) of window `κ`.
    pub fn decision_steps(&self, kappa: i64) -> RangeInclusive<usize> {
        (kappa.max(0) as usize)..=((kappa + self.window as i64 - 1) as usize)
    }

    /// Number of predicted steps carrying an `M` block, `N + N_u − 1`.
    pub fn n_blocks(&self) -> usize {
        self.horizon + self.window - 1
    }
}

/// Cached Gram matrices of applied `(x_t, u_t)` pairs.
#[derive(Clone, Debug, Default)]
pub struct HistoryBuffer {
    grams: Vec<DMatrix<f64>>,
}

impl HistoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, g: DMatrix<f64>) {
        self.grams.push(g);
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn get(&self, time: usize) -> Option<&DMatrix<f64>> {
        self.grams.get(time)
    }

    /// `Σ_{k=κ}^{−1} Φ_{t+k}ᵀΦ_{t+k}`; zero for windows starting at or after `t`.
    pub fn past_sum(&self, t: usize, kappa: i64, p: usize) -> Result<DMatrix<f64>> {
        let mut acc = DMatrix::zeros(p, p);
        for k in kappa..0 {
            let time = t as i64 + k;
            let g = usize::try_from(time)
                .ok()
                .and_then(|i| self.grams.get(i))
                .ok_or(ExcitationError::NotReady {
                    needed: time,
                    available: self.grams.len(),
                })?;
            acc += g;
        }
        Ok(acc)
    }

    /// `λ_min` of the Gram sum over the `N_u` steps ending at `t`.
    pub fn closed_loop_epsilon(&self, t: usize, window: usize) -> Result<f64> {
        closed_loop_epsilon(&self.grams, t, window)
    }
}

/// `ε_t = λ_min(Σ_{k=t−N_u+1}^{t} Φ_kᵀΦ_k)` from per-step Gram matrices.
pub fn closed_loop_epsilon(grams: &[DMatrix<f64>], t: usize, window: usize) -> Result<f64> {
    if t + 1 < window || t >= grams.len() {
        return Err(ExcitationError::NotReady {
            needed: t as i64,
            available: grams.len(),
        });
    }
    let mut acc = grams[t].clone();
    for g in &grams[t + 1 - window..t] {
        acc += g;
    }
    Ok(min_eigenvalue(&acc))
}

/// First-order expansion of `ΦᵀΦ` around a reference pair `(x̂, û)`:
/// `L(dx, du) = Φ̂ᵀΦ̂ + Φ̂ᵀΦ(dx, du) + Φ(dx, du)ᵀΦ̂`.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub phi_hat: DMatrix<f64>,
    pub gram_hat: DMatrix<f64>,
    dx_terms: Vec<DMatrix<f64>>,
    du_terms: Vec<DMatrix<f64>>,
}

impl Linearization {
    pub fn new(model: &UncertainModel, x_hat: &DVector<f64>, u_hat: &DVector<f64>) -> Self {
        let phi_hat = model.regressor(x_hat, u_hat);
        let gram_hat = phi_hat.transpose() * &phi_hat;
        let sym = |g: DMatrix<f64>| {
            let c = phi_hat.transpose() * g;
            &c + c.transpose()
        };
        let nx = model.nx();
        let nu = model.nu();
        let dx_terms = (0..nx)
            .map(|m| {
                let mut e = DVector::zeros(nx);
                e[m] = 1.0;
                sym(model.regressor(&e, &DVector::zeros(nu)))
            })
            .collect();
        let du_terms = (0..nu)
            .map(|m| {
                let mut e = DVector::zeros(nu);
                e[m] = 1.0;
                sym(model.regressor(&DVector::zeros(nx), &e))
            })
            .collect();
        Self {
            phi_hat,
            gram_hat,
            dx_terms,
            du_terms,
        }
    }

    /// `L(dx, du)` at numeric deviations.
    pub fn bound(&self, dx: &DVector<f64>, du: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.gram_hat.clone();
        for (i, t) in self.dx_terms.iter().enumerate() {
            m += t * dx[i];
        }
        for (i, t) in self.du_terms.iter().enumerate() {
            m += t * du[i];
        }
        m
    }

    /// `scale · L(dx, du)` with deviations affine in decision variables.
    pub fn bound_expr(&self, dx: &[LinExpr], du: &[LinExpr], scale: f64) -> SymExpr {
        let mut e = SymExpr::from_constant(&(&self.gram_hat * scale)).expect("symmetric");
        for (expr, t) in dx.iter().zip(&self.dx_terms) {
            e.add_affine_term(expr, &(t * scale)).expect("symmetric");
        }
        for (expr, t) in du.iter().zip(&self.du_terms) {
            e.add_affine_term(expr, &(t * scale)).expect("symmetric");
        }
        e
    }
}

/// Normalization applied to PE LMIs so their entries are O(1) for the solver.
pub fn pe_scale(linearizations: &[Linearization]) -> f64 {
    let peak = linearizations
        .iter()
        .map(|l| l.gram_hat.abs().max())
        .fold(0.0, f64::max);
    if peak > 0.0 {
        (1.0 / peak).clamp(1.0, 1e8)
    } else {
        1.0
    }
}

/// Data for one window's reference-coefficient problem.
#[derive(Clone, Debug)]
pub struct WindowData {
    pub kappa: i64,
    /// Past Gram sum (unscaled).
    pub past: DMatrix<f64>,
    /// For each decision step of the window: the unscaled linearized bounds, one per vertex.
    pub bounds: Vec<Vec<DMatrix<f64>>>,
}

/// Reference coefficient of one window together with the `M` blocks attaining it.
#[derive(Clone, Debug)]
pub struct ReferenceCoefficient {
    pub kappa: i64,
    /// Scaled coefficient `scale · β̂′`.
    pub beta_scaled: f64,
    /// Scaled `M` blocks, one per decision step, satisfying every bound exactly.
    pub blocks: Vec<DMatrix<f64>>,
}

/// `max β s.t. past + Σ M_k ⪰ βI, M_k ⪯ L_kj ∀ j`, followed by a shift making the
/// returned `M` blocks exactly feasible and `β` a certified lower bound.
pub fn reference_beta_prime(window: &WindowData, scale: f64) -> Result<ReferenceCoefficient> {
    let p = window.past.nrows();
    let past = &window.past * scale;
    let bounds: Vec<Vec<DMatrix<f64>>> = window
        .bounds
        .iter()
        .map(|bs| bs.iter().map(|b| b * scale).collect())
        .collect();
    let blocks = if bounds.is_empty() {
        Vec::new()
    } else {
        let mut prog = ConicProgram::new();
        let beta = prog.add_scalar("beta").var(0);
        let ms: Vec<_> = (0..bounds.len()).map(|i| prog.add_symmetric(&format!("M{i}"), p)).collect();
        let mut sum = SymExpr::from_constant(&past)?;
        for m in &ms {
            sum.add_symmetric_block(m, 1.0);
        }
        sum.add_identity_term(beta, -1.0);
        prog.add_psd(sum);
        for (m, bs) in ms.iter().zip(&bounds) {
            for b in bs {
                let mut e = SymExpr::from_constant(b)?;
                e.add_symmetric_block(m, -1.0);
                prog.add_psd(e);
            }
        }
        prog.add_linear_cost(beta, -1.0);
        let out = conic::solve(&prog, &SolverSettings::default())?;
        if out.status != SolveStatus::Optimal {
            return Err(ExcitationError::ReferenceSdp {
                kappa: window.kappa,
                status: out.stats.backend_status.clone(),
                program: prog.to_json(),
            });
        }
        ms.iter()
            .zip(&bounds)
            .map(|(m, bs)| tighten_block(out.symmetric_value(m), bs))
            .collect()
    };
    let mut total = past;
    for b in &blocks {
        total += b;
    }
    let beta = min_eigenvalue(&total);
    Ok(ReferenceCoefficient {
        kappa: window.kappa,
        beta_scaled: beta - WITNESS_MARGIN * beta.abs().max(1.0),
        blocks,
    })
}

/// Shifts `m` down by a multiple of `I` until `m ⪯ b` holds for every bound.
pub fn tighten_block(m: DMatrix<f64>, bounds: &[DMatrix<f64>]) -> DMatrix<f64> {
    let m = (&m + m.transpose()) * 0.5;
    let worst = bounds
        .iter()
        .map(|b| min_eigenvalue(&(b - &m)))
        .fold(f64::INFINITY, f64::min);
    if worst >= 0.0 {
        return m;
    }
    let p = m.nrows();
    let shift = -worst * (1.0 + 1e-9) + 1e-14;
    m - DMatrix::identity(p, p) * shift
}

/// Sample Gram matrices for one prediction step; duplicates collapsed.
#[derive(Clone, Debug)]
pub struct StepSamples {
    pub grams: Vec<DMatrix<f64>>,
}

impl StepSamples {
    pub fn new(grams: Vec<DMatrix<f64>>) -> Self {
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(grams.len());
        for g in grams {
            if !out.iter().any(|h| h == &g) {
                out.push(g);
            }
        }
        Self { grams: out }
    }
}

/// `min over index tuples of λ_min(fixed + Σ_k samples[k][i_k])`.
pub fn min_over_combinations(fixed: &DMatrix<f64>, samples: &[&StepSamples]) -> Result<f64> {
    let total = samples
        .iter()
        .try_fold(1usize, |acc, s| acc.checked_mul(s.grams.len().max(1)))
        .unwrap_or(usize::MAX);
    if total > MAX_COMBINATIONS {
        return Err(ExcitationError::TooManyCombinations(total));
    }
    fn rec(acc: &DMatrix<f64>, rest: &[&StepSamples], best: &mut f64) {
        match rest.split_first() {
            None => *best = best.min(min_eigenvalue(acc)),
            Some((first, tail)) => {
                for g in &first.grams {
                    rec(&(acc + g), tail, best);
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(fixed, samples, &mut best);
    Ok(best)
}

/// Sampled coefficient for every window: `past` sums and per-step sample sets
/// indexed by prediction step `k ≥ 0`.
pub fn sampled_betas(
    layout: &PEWindowLayout,
    history: &HistoryBuffer,
    p: usize,
    samples: &[StepSamples],
) -> Result<Vec<f64>> {
    let kappas: Vec<i64> = layout.kappas().collect();
    let results = parallel::map(&kappas, |&kappa| -> Result<f64> {
        let past = history.past_sum(layout.t, kappa, p)?;
        let steps: Vec<&StepSamples> = layout
            .decision_steps(kappa)
            .map(|k| {
                samples.get(k).ok_or_else(|| ExcitationError::Invalid(format!("no samples for step {k}")))
            })
            .collect::<Result<_>>()?;
        min_over_combinations(&past, &steps)
    });
    results.into_iter().collect()
}

/// Outcome of the sampled posterior check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorVerdict {
    Accept,
    /// Fall back to the shifted previous solution; carries the first failing window index.
    Fallback { window: usize },
}

/// Accepts iff `β^s_κ ≥ β̂^s_κ` for every window.
pub fn posterior_check(beta_s: &[f64], beta_hat_s: &[f64]) -> PosteriorVerdict {
    assert_eq!(beta_s.len(), beta_hat_s.len(), "window counts differ");
    match beta_s.iter().zip(beta_hat_s).position(|(b, bh)| b < bh) {
        Some(window) => PosteriorVerdict::Fallback { window },
        None => PosteriorVerdict::Accept,
    }
}

/// Monte-Carlo estimate of `λ_min(Σ_{k<N_u} E[Φ_kᵀΦ_k])`.
#[derive(Clone, Debug)]
pub struct ExpectedPe {
    pub lambda_min: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean: DMatrix<f64>,
    pub rollouts: usize,
}

/// Rolls out `u = Kx + s` (or `u = Kx` when `noise` is `None`) for `N_u` steps from
/// `x_start` under `θ`, and bootstraps a 95% interval for the smallest eigenvalue
/// of the mean Gram sum.
#[allow(clippy::too_many_arguments)]
pub fn verify_expected_pe<W, S>(
    model: &UncertainModel,
    theta: &DVector<f64>,
    x_start: &DVector<f64>,
    window: usize,
    rollouts: usize,
    seed: u64,
    mut draw_w: W,
    mut noise: Option<S>,
) -> Result<ExpectedPe>
where
    W: FnMut(&mut ChaCha8Rng) -> DVector<f64>,
    S: FnMut(&mut ChaCha8Rng) -> DVector<f64>,
{
    if window <= model.nx() {
        return Err(ExcitationError::Invalid(format!(
            "window length {window} must exceed the state dimension {}",
            model.nx()
        )));
    }
    if rollouts == 0 {
        return Err(ExcitationError::Invalid("need at least one rollout".into()));
    }
    let p = model.np();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        let mut x = x_start.clone();
        let mut acc = DMatrix::zeros(p, p);
        for _ in 0..window {
            let mut u = model.gain() * &x;
            if let Some(draw_s) = noise.as_mut() {
                u += draw_s(&mut rng);
            }
            acc += gram(model, &x, &u);
            let w = draw_w(&mut rng);
            x = model.step(&x, &u, &w, theta).map_err(|e| ExcitationError::Invalid(e.to_string()))?;
        }
        sums.push(acc);
    }
    let mean = mean_matrix(&sums);
    let lambda_min = min_eigenvalue(&mean);
    let resamples = 200;
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut acc = DMatrix::zeros(p, p);
            for _ in 0..rollouts {
                acc += &sums[rand::Rng::random_range(&mut rng, 0..rollouts)];
            }
            min_eigenvalue(&(acc / rollouts as f64))
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let idx = |q: f64| ((q * (resamples - 1) as f64).round() as usize).min(resamples - 1);
    Ok(ExpectedPe {
        lambda_min,
        ci_low: stats[idx(0.025)],
        ci_high: stats[idx(0.975)],
        mean,
        rollouts,
    })
}

fn mean_matrix(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(ms[0].nrows(), ms[0].ncols());
    for m in ms {
        acc += m;
    }
    acc / ms.len() as f64
}
