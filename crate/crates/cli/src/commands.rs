//! The `run`, `grad-check`, `rate` and `gen-instance` subcommands.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use riescomp::composition::{
    adjoint_pairing_residual, composite_rgrad_exact, exact_objective, gaussian_vector, multi_composite_rgrad_exact,
    multi_exact_objective, AsMultiLevel, MultiLevelProblem, TwoLevelProblem,
};
use riescomp::fixtures::CorruptedAdjoint;
use riescomp::manifold::{exp_map, random_tangent};
use riescomp::policy_eval::InstanceFile;
use riescomp::rng::{SampleRng, StreamSeed, StreamTag};
use riescomp::solver::{
    make_schedule_theorem1, make_schedule_theorem2, run_biased, run_multi_level_with_hook, run_two_level_with_hook,
    IterationRecord, OracleCounts, RunOptions, RunOutput, Schedule, StepSequence, Y0Policy,
};
use riescomp::verify::{fd_rgrad, fit_rate, RateFit, MIN_RATE_SEEDS};
use riescomp::{Point, Tangent};

use crate::config::{Algorithm, ExperimentConfig, ProblemSpec, ScheduleSpec};
use crate::error::{CliError, CliResult};
use crate::output::{fmt_f64, write_csv, MetricsRow, FINAL_HEADER, METRICS_HEADER, SUMMARY_HEADER};
use crate::problems::{policy_parts, Instance};
use crate::with_two_level;

/// Pairing residuals must satisfy `r <= PAIRING_REL_TOL (1 + |u| |v|)`.
pub const PAIRING_REL_TOL: f64 = 1e-6;
/// Finite-difference gradients must match within this relative error.
pub const FD_REL_TOL: f64 = 1e-4;
/// Radius of the geodesic ball around `x0` holding the extra check points.
pub const CHECK_RADIUS: f64 = 0.25;
/// Adjoint distortion used by `grad_check.corrupt_adjoint`.
pub const CORRUPTION_FACTOR: f64 = 1.5;
pub const THREADS_ENV: &str = "RIESCOMP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    GradCheck,
    Rate,
    GenInstance,
}

/// A fully validated run of one algorithm.
#[derive(Debug, Clone)]
pub struct Plan {
    pub algorithm: Algorithm,
    pub horizon: usize,
    pub schedule: Schedule,
}

/// Thread pool sized by `RIESCOMP_THREADS` (all cores when unset).
pub fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| CliError::config(THREADS_ENV, format!("expected a positive integer, got `{raw}`")))?,
        Err(std::env::VarError::NotPresent) => 0,
        Err(std::env::VarError::NotUnicode(_)) => {
            return Err(CliError::config(THREADS_ENV, "value is not valid UTF-8"))
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::io("thread pool", std::io::Error::other(e.to_string())))
}

/// Iterations for `algorithm`: `K` when set, otherwise the largest horizon
/// whose inner-value calls, initialization included, fit the budget.
pub fn horizon_for(config: &ExperimentConfig, algorithm: Algorithm, levels: usize) -> CliResult<usize> {
    if let Some(k) = config.horizon {
        return Ok(k);
    }
    let budget =
        config.budget.ok_or_else(|| CliError::config("K", "missing required key (or set budget.inner_calls)"))?;
    let (init, per_step) = match algorithm {
        Algorithm::Rscgd2 => (1, 2),
        Algorithm::BiasedRsgd => (1, 1),
        Algorithm::RscgdN => ((levels - 1) as u64, 2 * (levels - 1) as u64),
    };
    let k = budget.saturating_sub(init) / per_step;
    if k == 0 {
        return Err(CliError::config(
            "budget.inner_calls",
            format!("budget {budget} leaves no iterations for {}", algorithm.name()),
        ));
    }
    Ok(k as usize)
}

pub fn make_plan(
    instance: &Instance,
    config: &ExperimentConfig,
    algorithm: Algorithm,
    horizon: usize,
) -> CliResult<Plan> {
    let schedule_err = |e: riescomp::Error| CliError::config("schedule", e.to_string());
    let schedule = match config.schedule {
        ScheduleSpec::Theorem1 { t } => {
            let c = instance
                .two_level_constants()
                .ok_or_else(|| CliError::config("schedule", "theorem1 needs a two-level problem"))?;
            make_schedule_theorem1(&c, horizon, Some(StepSequence::Constant(t))).map_err(schedule_err)?
        }
        ScheduleSpec::Theorem2 => make_schedule_theorem2(&instance.level_constants(), horizon).map_err(schedule_err)?,
        ScheduleSpec::Manual { alpha, beta, gamma } => {
            Schedule::manual(alpha, beta, gamma, horizon).map_err(schedule_err)?
        }
    };
    Ok(Plan { algorithm, horizon, schedule })
}

/// Builds the instance and one plan per algorithm, failing before any
/// iteration runs.
pub fn prepare(config: &ExperimentConfig) -> CliResult<(Instance, Vec<Plan>)> {
    let instance = Instance::build(&config.problem)?;
    let plans = config
        .algorithms
        .iter()
        .map(|a| make_plan(&instance, config, *a, horizon_for(config, *a, instance.levels())?))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((instance, plans))
}

/// Result of one (algorithm, seed) run.
#[derive(Debug, Clone)]
pub struct JobOutcome {
    pub run_id: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub horizon: usize,
    pub rows: Vec<MetricsRow>,
    pub final_objective: f64,
    pub counts: OracleCounts,
    pub error: Option<String>,
}

pub fn run_id(algorithm: Algorithm, seed: u64) -> String {
    format!("{}_seed{}", algorithm.name(), seed)
}

/// Runs one replication with a fresh tracker sample.
pub fn run_job(instance: &Instance, plan: &Plan, master_seed: u64, seed: u64, stride: usize, wall: bool) -> JobOutcome {
    let id = run_id(plan.algorithm, seed);
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut hook = |r: &IterationRecord| {
        let t = if wall { start.elapsed().as_secs_f64() } else { 0.0 };
        rows.push(MetricsRow::from_record(&id, seed, r, t));
    };
    let opts = RunOptions { metric_stride: stride, keep_iterates: false };
    let ss = StreamSeed::new(master_seed, seed);
    let y0 = Y0Policy::FreshSample;
    let (k, sched) = (plan.horizon, &plan.schedule);
    let result: riescomp::Result<RunOutput> = match (plan.algorithm, instance) {
        (Algorithm::RscgdN, Instance::Chain(c)) => {
            run_multi_level_with_hook(c, &c.initial_point(), &y0, sched, k, ss, &opts, &mut hook)
        }
        (Algorithm::RscgdN, other) => with_two_level!(other, p => {
            let m = AsMultiLevel(p.clone());
            run_multi_level_with_hook(&m, &m.initial_point(), &y0, sched, k, ss, &opts, &mut hook)
        }, unreachable!("chain handled above")),
        (Algorithm::Rscgd2, inst) => with_two_level!(inst, p => {
            run_two_level_with_hook(p, &p.initial_point(), &y0, sched, k, ss, &opts, &mut hook)
        }, Err(riescomp::Error::Unsupported("rscgd2 needs a two-level problem".into()))),
        (Algorithm::BiasedRsgd, inst) => with_two_level!(inst, p => {
            run_biased(p, &p.initial_point(), &y0, &sched.alpha, k, ss, &opts, &mut hook)
        }, Err(riescomp::Error::Unsupported("biased_rsgd needs a two-level problem".into()))),
    };
    let mut outcome = JobOutcome {
        run_id: id.clone(),
        algorithm: plan.algorithm,
        seed,
        horizon: plan.horizon,
        rows,
        final_objective: f64::NAN,
        counts: OracleCounts::default(),
        error: None,
    };
    match result {
        Ok(out) => {
            outcome.final_objective = out.final_objective;
            outcome.counts = out.final_counts;
        }
        Err(e) => {
            let k = outcome.rows.last().map_or(0, |r| r.k + 1);
            let calls = outcome.rows.last().map_or(0, |r| r.oracle_calls_cum);
            outcome.rows.push(MetricsRow::aborted(&id, seed, k, calls));
            outcome.error = Some(e.to_string());
        }
    }
    outcome
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub horizon: usize,
    pub completed: usize,
    pub median_final_objective: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub algorithms: Vec<AlgorithmSummary>,
    pub outcomes: Vec<JobOutcome>,
}

fn summary_rows(plan: &Plan, done: &[&JobOutcome]) -> Vec<Vec<String>> {
    let Some(first) = done.first() else { return Vec::new() };
    let n = done.len() as f64;
    (0..first.rows.len())
        .map(|i| {
            let mean = |f: fn(&MetricsRow) -> f64| done.iter().map(|o| f(&o.rows[i])).sum::<f64>() / n;
            vec![
                plan.algorithm.name().to_string(),
                first.rows[i].k.to_string(),
                done.len().to_string(),
                fmt_f64(mean(|r| r.grad_norm_sq)),
                fmt_f64(mean(|r| r.objective)),
                fmt_f64(mean(|r| r.tracking_err_sq)),
                fmt_f64(mean(|r| r.lyapunov_partial)),
                fmt_f64(mean(|r| r.oracle_calls_cum as f64)),
            ]
        })
        .collect()
}

/// Executes every (algorithm, seed) run, writing `{run_id}.csv` per run,
/// `summary.csv` with seed-averaged metrics per iteration and `final.csv`
/// with the final objective of each completed run.
pub fn cmd_run(config: &ExperimentConfig, pool: &rayon::ThreadPool) -> CliResult<RunSummary> {
    let out_dir = config.output_path()?.to_path_buf();
    let (instance, plans) = prepare(config)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    let jobs: Vec<(&Plan, u64)> = plans.iter().flat_map(|p| config.seeds.iter().map(move |s| (p, *s))).collect();
    let outcomes = pool.install(|| {
        jobs.par_iter()
            .map(|(plan, seed)| {
                let o =
                    run_job(&instance, plan, config.master_seed, *seed, config.metric_stride, config.record_wall_time);
                let path = out_dir.join(format!("{}.csv", o.run_id));
                write_csv(&path, &METRICS_HEADER, o.rows.iter().map(MetricsRow::to_fields))?;
                Ok(o)
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let mut summary = Vec::new();
    let mut finals = Vec::new();
    let mut algorithms = Vec::new();
    for plan in &plans {
        let done: Vec<&JobOutcome> =
            outcomes.iter().filter(|o| o.algorithm == plan.algorithm && o.error.is_none()).collect();
        summary.extend(summary_rows(plan, &done));
        for o in &done {
            finals.push(vec![
                o.run_id.clone(),
                o.algorithm.name().to_string(),
                o.seed.to_string(),
                o.horizon.to_string(),
                fmt_f64(o.final_objective),
                o.counts.total().to_string(),
                o.counts.inner_values.to_string(),
            ]);
        }
        let values: Vec<f64> = done.iter().map(|o| o.final_objective).collect();
        algorithms.push(AlgorithmSummary {
            algorithm: plan.algorithm,
            horizon: plan.horizon,
            completed: done.len(),
            median_final_objective: median(&values),
        });
    }
    write_csv(&out_dir.join("summary.csv"), &SUMMARY_HEADER, summary)?;
    write_csv(&out_dir.join("final.csv"), &FINAL_HEADER, finals)?;
    if let Some(bad) = outcomes.iter().find(|o| o.error.is_some()) {
        return Err(CliError::Numerical(format!(
            "run {} aborted: {}",
            bad.run_id,
            bad.error.as_deref().unwrap_or_default()
        )));
    }
    Ok(RunSummary { algorithms, outcomes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub points: usize,
    /// Largest pairing residual and its ratio to the allowed tolerance;
    /// `None` for multi-level problems.
    pub max_pairing_residual: Option<f64>,
    pub max_pairing_ratio: Option<f64>,
    pub max_fd_rel_error: f64,
    pub passed: bool,
}

fn check_points(x0: &Point, n: usize, rng: &mut SampleRng) -> CliResult<Vec<Point>> {
    let mut out = vec![x0.clone()];
    while out.len() < n {
        let v = random_tangent(x0, rng);
        let norm = v.norm();
        if norm > 0.0 {
            out.push(exp_map(x0, &v.scale(CHECK_RADIUS / norm))?);
        }
    }
    Ok(out)
}

fn fd_rel_error(fd: &Tangent, exact: &Tangent) -> CliResult<f64> {
    let diff = fd.sub(exact)?.norm();
    let scale = exact.norm();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

fn check_two_level<P: TwoLevelProblem>(
    p: &P,
    points: &[Point],
    h: f64,
    rng: &mut SampleRng,
) -> CliResult<GradCheckReport> {
    let m = p.inner_codomain().ambient_dim();
    let (mut max_res, mut max_ratio, mut max_fd) = (0.0f64, 0.0f64, 0.0f64);
    for x in points {
        let phi = p.draw_inner(rng);
        let v = random_tangent(x, rng);
        let u = gaussian_vector(rng, m);
        let res = adjoint_pairing_residual(p, x, &phi, &v, &u)?;
        max_res = max_res.max(res);
        max_ratio = max_ratio.max(res / (PAIRING_REL_TOL * (1.0 + u.norm() * v.norm())));
        let fd = fd_rgrad(|z| exact_objective(p, z).unwrap_or(f64::NAN), x, h)?;
        max_fd = max_fd.max(fd_rel_error(&fd, &composite_rgrad_exact(p, x)?)?);
    }
    let passed = max_ratio <= 1.0 && max_fd <= FD_REL_TOL;
    Ok(GradCheckReport {
        points: points.len(),
        max_pairing_residual: Some(max_res),
        max_pairing_ratio: Some(max_ratio),
        max_fd_rel_error: max_fd,
        passed,
    })
}

fn check_multi_level<P: MultiLevelProblem>(p: &P, points: &[Point], h: f64) -> CliResult<GradCheckReport> {
    let mut max_fd = 0.0f64;
    for x in points {
        let fd = fd_rgrad(|z| multi_exact_objective(p, z).unwrap_or(f64::NAN), x, h)?;
        max_fd = max_fd.max(fd_rel_error(&fd, &multi_composite_rgrad_exact(p, x)?)?);
    }
    Ok(GradCheckReport {
        points: points.len(),
        max_pairing_residual: None,
        max_pairing_ratio: None,
        max_fd_rel_error: max_fd,
        passed: max_fd <= FD_REL_TOL,
    })
}

/// Adjoint pairing and finite-difference gradient checks at `x0` and at
/// random points on a geodesic sphere around it.
pub fn cmd_grad_check(config: &ExperimentConfig) -> CliResult<GradCheckReport> {
    let instance = Instance::build(&config.problem)?;
    let spec = &config.grad_check;
    let mut rng = StreamSeed::new(config.master_seed, 0).rng(StreamTag::Init);
    match &instance {
        Instance::Chain(c) => {
            let points = check_points(&c.initial_point(), spec.points, &mut rng)?;
            check_multi_level(c, &points, spec.fd_step)
        }
        other => with_two_level!(other, p => {
            let points = check_points(&p.initial_point(), spec.points, &mut rng)?;
            if spec.corrupt_adjoint {
                let bad = CorruptedAdjoint { inner: p.clone(), factor: CORRUPTION_FACTOR };
                check_two_level(&bad, &points, spec.fd_step, &mut rng)
            } else {
                check_two_level(p, &points, spec.fd_step, &mut rng)
            }
        }, unreachable!("chain handled above")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub fit: RateFit,
    pub slope_min: f64,
    pub slope_max: f64,
    pub in_interval: bool,
}

/// Runs every horizon in `rate.K_values` for every seed, fits the log-log
/// slope of the seed-averaged mean squared gradient norm and writes
/// `rate.csv` and `rate_fit.csv`.
pub fn cmd_rate(config: &ExperimentConfig, pool: &rayon::ThreadPool) -> CliResult<RateReport> {
    let spec = config.rate.as_ref().ok_or_else(|| CliError::config("rate.K_values", "missing required key"))?;
    if config.algorithms.len() != 1 {
        return Err(CliError::config("algorithm", "rate expects exactly one algorithm"));
    }
    if config.seeds.len() < MIN_RATE_SEEDS {
        return Err(CliError::config(
            "seeds",
            format!("rate needs at least {MIN_RATE_SEEDS} seeds, got {}", config.seeds.len()),
        ));
    }
    let out_dir = config.output_path()?.to_path_buf();
    let instance = Instance::build(&config.problem)?;
    let plans = spec
        .k_values
        .iter()
        .map(|k| make_plan(&instance, config, config.algorithms[0], *k))
        .collect::<CliResult<Vec<_>>>()?;
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    let jobs: Vec<(&Plan, u64)> = plans.iter().flat_map(|p| config.seeds.iter().map(move |s| (p, *s))).collect();
    let outcomes: Vec<JobOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|(plan, seed)| run_job(&instance, plan, config.master_seed, *seed, config.metric_stride, false))
            .collect()
    });
    if let Some(bad) = outcomes.iter().find(|o| o.error.is_some()) {
        return Err(CliError::Numerical(format!(
            "run {} (K = {}) aborted: {}",
            bad.run_id,
            bad.horizon,
            bad.error.as_deref().unwrap_or_default()
        )));
    }
    let mean_grad = |o: &JobOutcome| o.rows.iter().map(|r| r.grad_norm_sq).sum::<f64>() / o.rows.len() as f64;
    let per_k: Vec<(usize, Vec<f64>)> = plans
        .iter()
        .map(|p| (p.horizon, outcomes.iter().filter(|o| o.horizon == p.horizon).map(mean_grad).collect()))
        .collect();
    let fit = fit_rate(&per_k)?;
    let rows = outcomes.iter().map(|o| vec![o.horizon.to_string(), o.seed.to_string(), fmt_f64(mean_grad(o))]);
    write_csv(&out_dir.join("rate.csv"), &["K", "seed", "mean_grad_norm_sq"], rows)?;
    let in_interval = fit.slope >= spec.slope_min && fit.slope <= spec.slope_max;
    write_csv(
        &out_dir.join("rate_fit.csv"),
        &["slope", "intercept", "r_squared", "slope_min", "slope_max", "in_interval"],
        [vec![
            fmt_f64(fit.slope),
            fmt_f64(fit.intercept),
            fmt_f64(fit.r_squared),
            fmt_f64(spec.slope_min),
            fmt_f64(spec.slope_max),
            in_interval.to_string(),
        ]],
    )?;
    Ok(RateReport { fit, slope_min: spec.slope_min, slope_max: spec.slope_max, in_interval })
}

/// Serializes the configured policy-evaluation instance to `output_path`.
pub fn cmd_gen_instance(config: &ExperimentConfig) -> CliResult<InstanceFile> {
    let ProblemSpec::PolicyEval(params) = &config.problem else {
        return Err(CliError::config("problem", "gen-instance needs problem = policy_eval"));
    };
    let path = config.output_path()?;
    let (mdp, truth, seed) = policy_parts(params)?;
    let file = InstanceFile::new(&mdp, &truth, seed);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    file.write(path).map_err(|e| CliError::io(path, e))?;
    Ok(file)
}

/// Loads `config_path` and runs `command`, printing a short report.
pub fn execute(command: Command, config_path: &Path) -> CliResult<()> {
    let config = ExperimentConfig::load(config_path)?;
    match command {
        Command::Run => {
            let pool = thread_pool()?;
            let summary = cmd_run(&config, &pool)?;
            for a in &summary.algorithms {
                println!(
                    "{}: K = {}, {} runs, median final objective {}",
                    a.algorithm.name(),
                    a.horizon,
                    a.completed,
                    fmt_f64(a.median_final_objective)
                );
            }
            Ok(())
        }
        Command::GradCheck => {
            let r = cmd_grad_check(&config)?;
            match (r.max_pairing_residual, r.max_pairing_ratio) {
                (Some(res), Some(ratio)) => {
                    println!("max adjoint pairing residual {} ({:.3} of tolerance)", fmt_f64(res), ratio)
                }
                _ => println!("adjoint pairing: not applicable to multi-level problems"),
            }
            println!("max finite-difference gradient relative error {}", fmt_f64(r.max_fd_rel_error));
            if r.passed {
                println!("grad-check passed at {} points", r.points);
                Ok(())
            } else {
                Err(CliError::CheckFailed("gradient or adjoint check exceeded its tolerance".into()))
            }
        }
        Command::Rate => {
            let pool = thread_pool()?;
            let r = cmd_rate(&config, &pool)?;
            println!(
                "slope {} (r^2 {:.4}), accepted interval [{}, {}]",
                r.fit.slope, r.fit.r_squared, r.slope_min, r.slope_max
            );
            if r.in_interval {
                Ok(())
            } else {
                Err(CliError::CheckFailed(format!("slope {} outside [{}, {}]", r.fit.slope, r.slope_min, r.slope_max)))
            }
        }
        Command::GenInstance => {
            let file = cmd_gen_instance(&config)?;
            println!("wrote {}-state instance (seed {})", file.num_states, file.seed);
            Ok(())
        }
    }
}
