//! Stochastic compositional gradient solvers on manifolds.
//!
//! Two-level R-SCGD keeps a tracker `y^k` of the inner expectation:
//!
//! ```text
//! y^{k+1} = y^k - β_k (y^k - g_φ(x^k)) + γ_k (g_φ(x^k) - g_φ(x^{k-1}))
//! η^{k+1} = (Dg_φ(x^k))^* Proj_{g_φ(x^k)} ∇f_ξ(y^{k+1})
//! x^{k+1} = Exp_{x^k}(-α_k η^{k+1})
//! ```
//!
//! with one `φ^k` shared by both inner evaluations and `x^{-1} = x^0`. The
//! multi-level variant tracks every intermediate level the same way. The
//! biased baseline plugs `g_φ(x^k)` straight into `∇f_ξ`.
//!
//! Steps never touch exact oracles. The `run_*` drivers compute per-iteration
//! metrics at `x^k` before each step, from exact oracles when the problem has
//! them and from a 64-sample plug-in estimate otherwise.

use nalgebra::DVector;

use crate::composition::{
    composite_rgrad_exact, exact_inner_value, exact_objective, has_exact_oracles, multi_chain_eta,
    multi_composite_rgrad_exact, multi_exact_values, multi_has_exact_oracles, num_levels, stochastic_eta_with_value,
    validate_multi, LevelConstants, MultiLevelProblem, ProblemConstants, TwoLevelProblem,
};
use crate::error::{Error, Result};
use crate::manifold::{exp_map, Point, Tangent};
use crate::rng::{SampleRng, StreamSeed, StreamTag};

/// Largest β produced by the two-level theorem schedule.
pub const BETA_CLAMP_TWO_LEVEL: f64 = 0.99;
/// Largest β produced by the multi-level theorem schedule.
pub const BETA_CLAMP_MULTI_LEVEL: f64 = 0.5;
/// Samples per plug-in estimate when exact oracles are missing.
pub const METRIC_SAMPLES: usize = 64;

/// A step-size sequence indexed by iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSequence {
    Constant(f64),
    PerIteration(Vec<f64>),
}

impl StepSequence {
    pub fn at(&self, k: usize) -> Result<f64> {
        match self {
            StepSequence::Constant(v) => Ok(*v),
            StepSequence::PerIteration(v) => v.get(k).copied().ok_or_else(|| {
                Error::Contract(format!("step sequence has {} entries, iteration {k} requested", v.len()))
            }),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> StepSequence {
        match self {
            StepSequence::Constant(v) => StepSequence::Constant(f(*v)),
            StepSequence::PerIteration(v) => StepSequence::PerIteration(v.iter().map(|x| f(*x)).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Theorem1,
    Theorem2,
    Manual,
}

/// The coupled step sizes `(α_k, β_k, γ_k)` for a planned horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub alpha: StepSequence,
    pub beta: StepSequence,
    pub gamma: StepSequence,
    pub t: Option<StepSequence>,
    pub horizon: usize,
}

/// The step sizes in force at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Steps {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Schedule {
    /// Constant manual schedule. Requires `α >= 0` and `β ∈ (0, 1]`.
    pub fn manual(alpha: f64, beta: f64, gamma: f64, horizon: usize) -> Result<Self> {
        let s = Schedule {
            kind: ScheduleKind::Manual,
            alpha: StepSequence::Constant(alpha),
            beta: StepSequence::Constant(beta),
            gamma: StepSequence::Constant(gamma),
            t: None,
            horizon,
        };
        s.steps(0)?;
        Ok(s)
    }

    /// Manual schedule with the coupling `γ = 1 - β`.
    pub fn manual_coupled(alpha: f64, beta: f64, horizon: usize) -> Result<Self> {
        Self::manual(alpha, beta, 1.0 - beta, horizon)
    }

    pub fn steps(&self, k: usize) -> Result<Steps> {
        let alpha = self.alpha.at(k)?;
        let beta = self.beta.at(k)?;
        let gamma = self.gamma.at(k)?;
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Contract(format!("alpha_{k} = {alpha} must be finite and nonnegative")));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Contract(format!("beta_{k} = {beta} must lie in (0, 1]")));
        }
        if !gamma.is_finite() {
            return Err(Error::Contract(format!("gamma_{k} = {gamma} must be finite")));
        }
        Ok(Steps { alpha, beta, gamma })
    }
}

/// Theorem-1 schedule: `α = 1/√K`, `β = α C_g² L_f² / 2` clamped to
/// [`BETA_CLAMP_TWO_LEVEL`], `γ_k = 1 - t_k β`. `t` defaults to `t_k = 1`.
pub fn make_schedule_theorem1(
    constants: &ProblemConstants,
    horizon: usize,
    t: Option<StepSequence>,
) -> Result<Schedule> {
    if horizon == 0 {
        return Err(Error::Contract("schedule horizon K must be at least 1".into()));
    }
    let coupling = constants.c_g * constants.c_g * constants.l_f * constants.l_f;
    if !(coupling > 0.0 && coupling.is_finite()) {
        return Err(Error::Contract("theorem-1 schedule needs C_g * L_f > 0; use a manual schedule instead".into()));
    }
    let alpha = 1.0 / (horizon as f64).sqrt();
    let mut beta = alpha * coupling / 2.0;
    if beta > BETA_CLAMP_TWO_LEVEL {
        log::warn!("theorem-1 beta {beta:.4} clamped to {BETA_CLAMP_TWO_LEVEL}");
        beta = BETA_CLAMP_TWO_LEVEL;
    }
    let t_seq = t.unwrap_or(StepSequence::Constant(1.0));
    let gamma = t_seq.map(|tk| 1.0 - tk * beta);
    Ok(Schedule {
        kind: ScheduleKind::Theorem1,
        alpha: StepSequence::Constant(alpha),
        beta: StepSequence::Constant(beta),
        gamma,
        t: Some(t_seq),
        horizon,
    })
}

/// `A_n = Σ_{m=n+1}^{N-1} C_N ⋯ C_{m+1} · C_{m-1} ⋯ C_1 · L_m ⋯ L_{n+1}`
/// for `n = 1..N-1`. `levels[i]` holds the constants of level `i + 1`.
pub fn a_coefficients(levels: &[LevelConstants]) -> Vec<f64> {
    let n_levels = levels.len();
    let c = |j: usize| levels[j - 1].c;
    let l = |j: usize| levels[j - 1].l;
    (1..n_levels)
        .map(|n| {
            ((n + 1)..n_levels)
                .map(|m| {
                    let upper: f64 = ((m + 1)..=n_levels).map(c).product();
                    let lower: f64 = (1..m).map(c).product();
                    let smooth: f64 = ((n + 1)..=m).map(l).product();
                    upper * lower * smooth
                })
                .sum()
        })
        .collect()
}

/// Theorem-2 schedule: `α = 1/√K`, `β = α Σ A_n² / 2` clamped to
/// [`BETA_CLAMP_MULTI_LEVEL`], `γ = 1 - β`.
pub fn make_schedule_theorem2(levels: &[LevelConstants], horizon: usize) -> Result<Schedule> {
    if horizon == 0 {
        return Err(Error::Contract("schedule horizon K must be at least 1".into()));
    }
    if levels.len() < 2 {
        return Err(Error::Contract("theorem-2 schedule needs at least two levels".into()));
    }
    let sum_sq: f64 = a_coefficients(levels).iter().map(|a| a * a).sum();
    if !(sum_sq > 0.0 && sum_sq.is_finite()) {
        return Err(Error::Contract(
            "theorem-2 schedule needs Σ A_n² > 0 (it vanishes for N = 2); use a manual schedule instead".into(),
        ));
    }
    let alpha = 1.0 / (horizon as f64).sqrt();
    let mut beta = alpha * sum_sq / 2.0;
    if beta > BETA_CLAMP_MULTI_LEVEL {
        log::warn!("theorem-2 beta {beta:.4} clamped to {BETA_CLAMP_MULTI_LEVEL}");
        beta = BETA_CLAMP_MULTI_LEVEL;
    }
    Ok(Schedule {
        kind: ScheduleKind::Theorem2,
        alpha: StepSequence::Constant(alpha),
        beta: StepSequence::Constant(beta),
        gamma: StepSequence::Constant(1.0 - beta),
        t: None,
        horizon,
    })
}

/// Constants appearing in the rate bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RateBoundConstants {
    pub b0: f64,
    pub b1: f64,
    pub a: Vec<f64>,
}

/// `B0 = 2(1-β)² + 2γ² + (1-β-γ)²/β`.
pub fn tracking_constant_b0(beta: f64, gamma: f64) -> f64 {
    2.0 * (1.0 - beta).powi(2) + 2.0 * gamma * gamma + (1.0 - beta - gamma).powi(2) / beta
}

/// `B1 = (L_F/2) C_g² C_f² + C_g⁴ L_f⁴ V_g² + [2 + 6(t+1)²] C_g⁴ C_f²`.
pub fn rate_constant_b1(c: &ProblemConstants) -> f64 {
    let cg2 = c.c_g * c.c_g;
    let cf2 = c.c_f * c.c_f;
    0.5 * c.l_obj * cg2 * cf2
        + cg2 * cg2 * c.l_f.powi(4) * c.v_g * c.v_g
        + (2.0 + 6.0 * (c.t + 1.0).powi(2)) * cg2 * cg2 * cf2
}

pub fn rate_bound_constants(
    c: &ProblemConstants,
    beta: f64,
    gamma: f64,
    levels: &[LevelConstants],
) -> RateBoundConstants {
    RateBoundConstants { b0: tracking_constant_b0(beta, gamma), b1: rate_constant_b1(c), a: a_coefficients(levels) }
}

/// Initial tracker policy.
#[derive(Debug, Clone, PartialEq)]
pub enum Y0Policy {
    /// `y^0 = g_φ(x^0)` for one fresh sample (multi-level: a cascade of fresh
    /// samples), drawn from the `Init` stream.
    FreshSample,
    /// Caller-supplied trackers, one per tracked level.
    Supplied(Vec<DVector<f64>>),
}

/// Cumulative oracle invocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OracleCounts {
    pub inner_values: u64,
    pub adjoints: u64,
    pub outer_grads: u64,
}

impl OracleCounts {
    pub fn total(&self) -> u64 {
        self.inner_values + self.adjoints + self.outer_grads
    }
}

#[derive(Debug, Clone)]
pub struct TwoLevelState {
    pub x_prev: Point,
    pub x_curr: Point,
    pub y: DVector<f64>,
    pub k: usize,
    pub counts: OracleCounts,
    phi_rng: SampleRng,
    xi_rng: SampleRng,
}

impl TwoLevelState {
    pub fn new<P: TwoLevelProblem + ?Sized>(problem: &P, x0: &Point, y0: &Y0Policy, seed: StreamSeed) -> Result<Self> {
        if x0.manifold() != problem.domain() {
            return Err(Error::Contract(format!(
                "initial point lives on {} but the problem domain is {}",
                x0.manifold(),
                problem.domain()
            )));
        }
        let m = problem.inner_codomain().ambient_dim();
        let mut counts = OracleCounts::default();
        let y = match y0 {
            Y0Policy::FreshSample => {
                let mut init = seed.rng(StreamTag::Init);
                let phi = problem.draw_inner(&mut init);
                counts.inner_values += 1;
                problem.inner_value(x0, &phi)?
            }
            Y0Policy::Supplied(ys) => {
                if ys.len() != 1 {
                    return Err(Error::Contract(format!("two-level y0 needs one tracker, got {}", ys.len())));
                }
                ys[0].clone()
            }
        };
        if y.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: y.len() });
        }
        Ok(Self {
            x_prev: x0.clone(),
            x_curr: x0.clone(),
            y,
            k: 0,
            counts,
            phi_rng: seed.rng(StreamTag::Phi),
            xi_rng: seed.rng(StreamTag::Xi),
        })
    }
}

/// Per-step diagnostics returned by the step functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Index of the step just taken (the update from `x^k` to `x^{k+1}`).
    pub k: usize,
    pub eta_norm: f64,
    pub counts: OracleCounts,
}

fn check_eta(eta: &Tangent, k: usize) -> Result<()> {
    if !eta.is_finite() {
        return Err(Error::NonFinite(format!("search direction at iteration {k} is not finite")));
    }
    Ok(())
}

fn check_vector(v: &DVector<f64>, what: &str, k: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} at iteration {k} is not finite")));
    }
    Ok(())
}

fn advance(x: &Point, eta: &Tangent, alpha: f64) -> Result<Point> {
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    exp_map(x, &eta.scale(-alpha))
}

/// One R-SCGD iteration.
pub fn step_two_level<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    state: &mut TwoLevelState,
    schedule: &Schedule,
) -> Result<StepInfo> {
    let k = state.k;
    let s = schedule.steps(k)?;
    let phi = problem.draw_inner(&mut state.phi_rng);
    let xi = problem.draw_outer(&mut state.xi_rng);
    let g_curr = problem.inner_value(&state.x_curr, &phi)?;
    let g_prev = problem.inner_value(&state.x_prev, &phi)?;
    let y_next = &state.y * (1.0 - s.beta) + &g_curr * s.beta + (&g_curr - &g_prev) * s.gamma;
    check_vector(&y_next, "tracker", k)?;
    let eta = stochastic_eta_with_value(problem, &state.x_curr, &g_curr, &y_next, &phi, &xi)?;
    check_eta(&eta, k)?;
    let x_next = advance(&state.x_curr, &eta, s.alpha)?;

    state.counts.inner_values += 2;
    state.counts.adjoints += 1;
    state.counts.outer_grads += 1;
    state.x_prev = std::mem::replace(&mut state.x_curr, x_next);
    state.y = y_next;
    state.k += 1;
    Ok(StepInfo { k, eta_norm: eta.norm(), counts: state.counts })
}

/// One biased R-SGD iteration: `η = (Dg_φ(x))^* Proj ∇f_ξ(g_φ(x))`.
///
/// The state's tracker is overwritten with the plug-in value `g_φ(x^k)`.
pub fn step_biased_rsgd<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    state: &mut TwoLevelState,
    alpha: f64,
) -> Result<StepInfo> {
    let k = state.k;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Contract(format!("alpha_{k} = {alpha} must be finite and nonnegative")));
    }
    let phi = problem.draw_inner(&mut state.phi_rng);
    let xi = problem.draw_outer(&mut state.xi_rng);
    let g_curr = problem.inner_value(&state.x_curr, &phi)?;
    check_vector(&g_curr, "inner value", k)?;
    let eta = stochastic_eta_with_value(problem, &state.x_curr, &g_curr, &g_curr, &phi, &xi)?;
    check_eta(&eta, k)?;
    let x_next = advance(&state.x_curr, &eta, alpha)?;

    state.counts.inner_values += 1;
    state.counts.adjoints += 1;
    state.counts.outer_grads += 1;
    state.x_prev = std::mem::replace(&mut state.x_curr, x_next);
    state.y = g_curr;
    state.k += 1;
    Ok(StepInfo { k, eta_norm: eta.norm(), counts: state.counts })
}

/// Metrics at `x^k`, recorded before step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// `|grad F(x^k)|²`.
    pub grad_norm_sq: f64,
    /// Set when `grad_norm_sq`, `objective` and the tracking error come from
    /// the sampled plug-in estimate instead of exact oracles.
    pub grad_is_estimate: bool,
    /// `F(x^k)`.
    pub objective: f64,
    /// Two-level: `|y^k - g(x^{k-1})|²`. Multi-level: the sum over tracked
    /// levels of `|y_n^k - f_n(y_{n-1}^k)|²` with `y_0^k = x^{k-1}`.
    pub tracking_err_sq: f64,
    /// `objective + tracking_err_sq`, the Lyapunov value up to `F(x^*)`.
    pub lyapunov_partial: f64,
    /// `|η^{k+1}|` of the step taken from `x^k`.
    pub eta_norm: f64,
    /// Oracle calls made before step `k`, including tracker initialization.
    pub oracle_calls_cum: u64,
    pub inner_calls_cum: u64,
}

/// Options for the `run_*` drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Record every `metric_stride`-th iteration (and always `k = 0`).
    pub metric_stride: usize,
    /// Keep every iterate `x^0..x^K` in the output.
    pub keep_iterates: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { metric_stride: 1, keep_iterates: false }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub final_point: Point,
    /// Objective at `x^K` (estimated when exact oracles are missing).
    pub final_objective: f64,
    pub final_counts: OracleCounts,
    pub iterates: Vec<Point>,
}

struct Metrics {
    grad_norm_sq: f64,
    objective: f64,
    tracking_err_sq: f64,
    estimate: bool,
}

fn mean_vectors(vs: &[DVector<f64>]) -> DVector<f64> {
    vs.iter().fold(DVector::zeros(vs[0].len()), |acc, v| acc + v) / vs.len() as f64
}

/// Plug-in estimate of `g(x)`.
fn sampled_inner_value<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x: &Point,
    rng: &mut SampleRng,
) -> Result<DVector<f64>> {
    let vs = (0..METRIC_SAMPLES)
        .map(|_| {
            let phi = problem.draw_inner(rng);
            problem.inner_value(x, &phi)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_vectors(&vs))
}

fn two_level_metrics<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    state: &TwoLevelState,
    rng: &mut SampleRng,
) -> Result<Metrics> {
    let x = &state.x_curr;
    if has_exact_oracles(problem) {
        let grad = composite_rgrad_exact(problem, x)?;
        let g_prev = exact_inner_value(problem, &state.x_prev)?;
        return Ok(Metrics {
            grad_norm_sq: grad.norm_sq(),
            objective: exact_objective(problem, x)?,
            tracking_err_sq: (&state.y - g_prev).norm_squared(),
            estimate: false,
        });
    }
    let g_hat = sampled_inner_value(problem, x, rng)?;
    let mut grad = Tangent::zero(x);
    let mut objective = 0.0;
    for _ in 0..METRIC_SAMPLES {
        let phi = problem.draw_inner(rng);
        let xi = problem.draw_outer(rng);
        let g_phi = problem.inner_value(x, &phi)?;
        let eta = stochastic_eta_with_value(problem, x, &g_phi, &g_hat, &phi, &xi)?;
        grad = grad.add(&eta)?;
        objective += problem.outer_value(&g_hat, &xi)?;
    }
    let n = METRIC_SAMPLES as f64;
    let g_prev = sampled_inner_value(problem, &state.x_prev, rng)?;
    Ok(Metrics {
        grad_norm_sq: grad.scale(1.0 / n).norm_sq(),
        objective: objective / n,
        tracking_err_sq: (&state.y - g_prev).norm_squared(),
        estimate: true,
    })
}

fn final_two_level_objective<P: TwoLevelProblem + ?Sized>(problem: &P, x: &Point, rng: &mut SampleRng) -> Result<f64> {
    if has_exact_oracles(problem) {
        return exact_objective(problem, x);
    }
    let g_hat = sampled_inner_value(problem, x, rng)?;
    let mut total = 0.0;
    for _ in 0..METRIC_SAMPLES {
        let xi = problem.draw_outer(rng);
        total += problem.outer_value(&g_hat, &xi)?;
    }
    Ok(total / METRIC_SAMPLES as f64)
}

fn make_record(k: usize, m: Metrics, counts: OracleCounts) -> IterationRecord {
    IterationRecord {
        k,
        grad_norm_sq: m.grad_norm_sq,
        grad_is_estimate: m.estimate,
        objective: m.objective,
        tracking_err_sq: m.tracking_err_sq,
        lyapunov_partial: m.objective + m.tracking_err_sq,
        eta_norm: f64::NAN,
        oracle_calls_cum: counts.total(),
        inner_calls_cum: counts.inner_values,
    }
}

fn check_run_args(horizon: usize, opts: &RunOptions) -> Result<()> {
    if horizon == 0 {
        return Err(Error::Contract("run length K must be at least 1".into()));
    }
    if opts.metric_stride == 0 {
        return Err(Error::Contract("metric_stride must be at least 1".into()));
    }
    Ok(())
}

enum TwoLevelAlgorithm<'a> {
    Rscgd(&'a Schedule),
    Biased(&'a StepSequence),
}

fn run_two_level_impl<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    mut state: TwoLevelState,
    algorithm: TwoLevelAlgorithm<'_>,
    horizon: usize,
    seed: StreamSeed,
    opts: &RunOptions,
    hook: &mut dyn FnMut(&IterationRecord),
) -> Result<RunOutput> {
    check_run_args(horizon, opts)?;
    let mut metrics_rng = seed.rng(StreamTag::Metrics);
    let mut records = Vec::with_capacity(horizon.div_ceil(opts.metric_stride));
    let mut iterates = Vec::new();
    for k in 0..horizon {
        if opts.keep_iterates {
            iterates.push(state.x_curr.clone());
        }
        let pending = if k % opts.metric_stride == 0 {
            Some(make_record(k, two_level_metrics(problem, &state, &mut metrics_rng)?, state.counts))
        } else {
            None
        };
        let info = match algorithm {
            TwoLevelAlgorithm::Rscgd(schedule) => step_two_level(problem, &mut state, schedule)?,
            TwoLevelAlgorithm::Biased(alpha) => step_biased_rsgd(problem, &mut state, alpha.at(k)?)?,
        };
        if let Some(mut rec) = pending {
            rec.eta_norm = info.eta_norm;
            hook(&rec);
            records.push(rec);
        }
    }
    if opts.keep_iterates {
        iterates.push(state.x_curr.clone());
    }
    let final_objective = final_two_level_objective(problem, &state.x_curr, &mut metrics_rng)?;
    Ok(RunOutput { records, final_point: state.x_curr, final_objective, final_counts: state.counts, iterates })
}

/// Runs `K` R-SCGD iterations from `x0`.
pub fn run_two_level<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x0: &Point,
    y0: &Y0Policy,
    schedule: &Schedule,
    horizon: usize,
    seed: StreamSeed,
    opts: &RunOptions,
) -> Result<RunOutput> {
    run_two_level_with_hook(problem, x0, y0, schedule, horizon, seed, opts, &mut |_| {})
}

/// [`run_two_level`] calling `hook` on each record as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn run_two_level_with_hook<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x0: &Point,
    y0: &Y0Policy,
    schedule: &Schedule,
    horizon: usize,
    seed: StreamSeed,
    opts: &RunOptions,
    hook: &mut dyn FnMut(&IterationRecord),
) -> Result<RunOutput> {
    let state = TwoLevelState::new(problem, x0, y0, seed)?;
    run_two_level_impl(problem, state, TwoLevelAlgorithm::Rscgd(schedule), horizon, seed, opts, hook)
}

/// Runs `K` biased R-SGD iterations from `x0`. The tracker slot starts from
/// `y0` and only feeds the tracking metric.
#[allow(clippy::too_many_arguments)]
pub fn run_biased<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x0: &Point,
    y0: &Y0Policy,
    alpha: &StepSequence,
    horizon: usize,
    seed: StreamSeed,
    opts: &RunOptions,
    hook: &mut dyn FnMut(&IterationRecord),
) -> Result<RunOutput> {
    let state = TwoLevelState::new(problem, x0, y0, seed)?;
    run_two_level_impl(problem, state, TwoLevelAlgorithm::Biased(alpha), horizon, seed, opts, hook)
}

/// Stream feeding level `level` of an `n_levels` chain: level 1 shares the
/// two-level `Phi` stream and level `N` the `Xi` stream.
pub fn level_stream(level: usize, n_levels: usize) -> StreamTag {
    if level == 1 {
        StreamTag::Phi
    } else if level == n_levels {
        StreamTag::Xi
    } else {
        StreamTag::Theta(level)
    }
}

#[derive(Debug, Clone)]
pub struct MultiLevelState {
    pub x_prev: Point,
    pub x_curr: Point,
    /// `y_1^k, ..., y_{N-1}^k`.
    pub y: Vec<DVector<f64>>,
    pub k: usize,
    pub counts: OracleCounts,
    rngs: Vec<SampleRng>,
}

impl MultiLevelState {
    pub fn new<P: MultiLevelProblem + ?Sized>(
        problem: &P,
        x0: &Point,
        y0: &Y0Policy,
        seed: StreamSeed,
    ) -> Result<Self> {
        validate_multi(problem)?;
        if x0.manifold() != problem.domain() {
            return Err(Error::Contract(format!(
                "initial point lives on {} but the problem domain is {}",
                x0.manifold(),
                problem.domain()
            )));
        }
        let n_levels = num_levels(problem);
        let dims = problem.level_dims();
        let mut counts = OracleCounts::default();
        let y = match y0 {
            Y0Policy::FreshSample => {
                let mut init = seed.rng(StreamTag::Init);
                let mut ys = Vec::with_capacity(n_levels - 1);
                let theta = problem.draw(1, &mut init);
                ys.push(problem.first_value(x0, &theta)?);
                for level in 2..n_levels {
                    let theta = problem.draw(level, &mut init);
                    let next = problem.level_value(level, &ys[level - 2], &theta)?;
                    ys.push(next);
                }
                counts.inner_values += (n_levels - 1) as u64;
                ys
            }
            Y0Policy::Supplied(ys) => ys.clone(),
        };
        if y.len() != n_levels - 1 {
            return Err(Error::Contract(format!("multi-level y0 needs {} trackers, got {}", n_levels - 1, y.len())));
        }
        for (yi, d) in y.iter().zip(&dims) {
            if yi.len() != *d {
                return Err(Error::DimensionMismatch { expected: *d, got: yi.len() });
            }
        }
        let rngs = (1..=n_levels).map(|level| seed.rng(level_stream(level, n_levels))).collect();
        Ok(Self { x_prev: x0.clone(), x_curr: x0.clone(), y, k: 0, counts, rngs })
    }
}

/// One multi-level R-SCGD iteration.
pub fn step_multi_level<P: MultiLevelProblem + ?Sized>(
    problem: &P,
    state: &mut MultiLevelState,
    schedule: &Schedule,
) -> Result<StepInfo> {
    let k = state.k;
    let s = schedule.steps(k)?;
    let n_levels = state.rngs.len();
    let mut samples = Vec::with_capacity(n_levels);
    let mut y_next: Vec<DVector<f64>> = Vec::with_capacity(n_levels - 1);

    let theta = problem.draw(1, &mut state.rngs[0]);
    let f_curr = problem.first_value(&state.x_curr, &theta)?;
    let f_prev = problem.first_value(&state.x_prev, &theta)?;
    y_next.push(&state.y[0] * (1.0 - s.beta) + &f_curr * s.beta + (&f_curr - &f_prev) * s.gamma);
    samples.push(theta);
    for level in 2..n_levels {
        let theta = problem.draw(level, &mut state.rngs[level - 1]);
        let v_new = problem.level_value(level, &y_next[level - 2], &theta)?;
        let v_old = problem.level_value(level, &state.y[level - 2], &theta)?;
        let yl = &state.y[level - 1];
        y_next.push(yl * (1.0 - s.beta) + &v_new * s.beta + (&v_new - &v_old) * s.gamma);
        samples.push(theta);
    }
    for y in &y_next {
        check_vector(y, "tracker", k)?;
    }
    samples.push(problem.draw(n_levels, &mut state.rngs[n_levels - 1]));

    let eta = multi_chain_eta(problem, &state.x_curr, &f_curr, &y_next, &samples)?;
    check_eta(&eta, k)?;
    let x_next = advance(&state.x_curr, &eta, s.alpha)?;

    state.counts.inner_values += 2 * (n_levels as u64 - 1);
    state.counts.adjoints += 1;
    state.counts.outer_grads += n_levels as u64 - 1;
    state.x_prev = std::mem::replace(&mut state.x_curr, x_next);
    state.y = y_next;
    state.k += 1;
    Ok(StepInfo { k, eta_norm: eta.norm(), counts: state.counts })
}

/// Plug-in cascade `ŷ_1 = mean f_1(x; θ)`, `ŷ_n = mean f_n(ŷ_{n-1}; θ)`.
fn sampled_cascade<P: MultiLevelProblem + ?Sized>(
    problem: &P,
    x: &Point,
    rng: &mut SampleRng,
) -> Result<Vec<DVector<f64>>> {
    let n_levels = num_levels(problem);
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(n_levels);
    let first =
        (0..METRIC_SAMPLES).map(|_| problem.first_value(x, &problem.draw(1, rng))).collect::<Result<Vec<_>>>()?;
    out.push(mean_vectors(&first));
    for level in 2..=n_levels {
        let vs = (0..METRIC_SAMPLES)
            .map(|_| problem.level_value(level, &out[level - 2], &problem.draw(level, rng)))
            .collect::<Result<Vec<_>>>()?;
        out.push(mean_vectors(&vs));
    }
    Ok(out)
}

type LevelValueFn<'a> = dyn FnMut(usize, &DVector<f64>) -> Result<DVector<f64>> + 'a;

fn multi_tracking_err<P: MultiLevelProblem + ?Sized>(
    problem: &P,
    state: &MultiLevelState,
    first_prev: &DVector<f64>,
    level_value: &mut LevelValueFn<'_>,
) -> Result<f64> {
    let mut total = (&state.y[0] - first_prev).norm_squared();
    for level in 2..num_levels(problem) {
        let v = level_value(level, &state.y[level - 2])?;
        total += (&state.y[level - 1] - v).norm_squared();
    }
    Ok(total)
}

fn multi_level_metrics<P: MultiLevelProblem + ?Sized>(
    problem: &P,
    state: &MultiLevelState,
    rng: &mut SampleRng,
) -> Result<Metrics> {
    let x = &state.x_curr;
    if multi_has_exact_oracles(problem) {
        let grad = multi_composite_rgrad_exact(problem, x)?;
        let values = multi_exact_values(problem, x)?;
        let prev = multi_exact_values(problem, &state.x_prev)?;
        let tracking = multi_tracking_err(problem, state, &prev[0], &mut |level, y| {
            let theta = problem
                .exact_sample(level)
                .ok_or_else(|| Error::Unsupported(format!("no exact oracle for level {level}")))?;
            problem.level_value(level, y, &theta)
        })?;
        return Ok(Metrics {
            grad_norm_sq: grad.norm_sq(),
            objective: values.last().expect("N >= 2")[0],
            tracking_err_sq: tracking,
            estimate: false,
        });
    }
    let n_levels = num_levels(problem);
    let cascade = sampled_cascade(problem, x, rng)?;
    let mut grad = Tangent::zero(x);
    for _ in 0..METRIC_SAMPLES {
        let samples: Vec<_> = (1..=n_levels).map(|level| problem.draw(level, rng)).collect();
        let first = problem.first_value(x, &samples[0])?;
        let eta = multi_chain_eta(problem, x, &first, &cascade[..n_levels - 1], &samples)?;
        grad = grad.add(&eta)?;
    }
    let prev = sampled_cascade(problem, &state.x_prev, rng)?;
    let tracking = multi_tracking_err(problem, state, &prev[0], &mut |level, y| {
        let vs = (0..METRIC_SAMPLES)
            .map(|_| problem.level_value(level, y, &problem.draw(level, rng)))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_vectors(&vs))
    })?;
    Ok(Metrics {
        grad_norm_sq: grad.scale(1.0 / METRIC_SAMPLES as f64).norm_sq(),
        objective: cascade[n_levels - 1][0],
        tracking_err_sq: tracking,
        estimate: true,
    })
}

/// Runs `K` multi-level R-SCGD iterations from `x0`.
pub fn run_multi_level<P: MultiLevelProblem + ?Sized>(
    problem: &P,
    x0: &Point,
    y0: &Y0Policy,
    schedule: &Schedule,
    horizon: usize,
    seed: StreamSeed,
    opts: &RunOptions,
) -> Result<RunOutput> {
    run_multi_level_with_hook(problem, x0, y0, schedule, horizon, seed, opts, &mut |_| {})
}

/// [`run_multi_level`] calling `hook` on each record as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn run_multi_level_with_hook<P: MultiLevelProblem + ?Sized>(
    problem: &P,
    x0: &Point,
    y0: &Y0Policy,
    schedule: &Schedule,
    horizon: usize,
    seed: StreamSeed,
    opts: &RunOptions,
    hook: &mut dyn FnMut(&IterationRecord),
) -> Result<RunOutput> {
    check_run_args(horizon, opts)?;
    let mut state = MultiLevelState::new(problem, x0, y0, seed)?;
    let mut metrics_rng = seed.rng(StreamTag::Metrics);
    let mut records = Vec::with_capacity(horizon.div_ceil(opts.metric_stride));
    let mut iterates = Vec::new();
    for k in 0..horizon {
        if opts.keep_iterates {
            iterates.push(state.x_curr.clone());
        }
        let pending = if k % opts.metric_stride == 0 {
            Some(make_record(k, multi_level_metrics(problem, &state, &mut metrics_rng)?, state.counts))
        } else {
            None
        };
        let info = step_multi_level(problem, &mut state, schedule)?;
        if let Some(mut rec) = pending {
            rec.eta_norm = info.eta_norm;
            hook(&rec);
            records.push(rec);
        }
    }
    if opts.keep_iterates {
        iterates.push(state.x_curr.clone());
    }
    let final_objective = if multi_has_exact_oracles(problem) {
        multi_exact_values(problem, &state.x_curr)?.last().expect("N >= 2")[0]
    } else {
        sampled_cascade(problem, &state.x_curr, &mut metrics_rng)?.last().expect("N >= 2")[0]
    };
    Ok(RunOutput { records, final_point: state.x_curr, final_objective, final_counts: state.counts, iterates })
}
