//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; keys may be dotted
//! (`problem.sigma_P`). Every key is consumed exactly once; duplicates,
//! unknown keys and out-of-range values are rejected with the key named.
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use riescomp::policy_eval::{
    NoiseModel, ParamMode, DEFAULT_BASES, DEFAULT_GRID_SIDE, DEFAULT_RHO, DEFAULT_SIGMA_P, DEFAULT_SIGMA_R,
};

use crate::error::{CliError, CliResult};

pub const MAX_GRID_SIDE: usize = 32;
pub const MAX_BASES: usize = 64;
pub const MAX_SPD_DIM: usize = 6;
pub const MAX_LEVELS: usize = 16;
pub const MAX_LQ_DIM: usize = 256;
pub const DEFAULT_NOISE_STD: f64 = 0.3;
pub const DEFAULT_SLOPE_MIN: f64 = -0.75;
pub const DEFAULT_SLOPE_MAX: f64 = -0.30;
pub const DEFAULT_CHECK_POINTS: usize = 4;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    PolicyEval,
    SyntheticTwoLevel,
    SyntheticMultiLevel,
    LinearQuadratic,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [
        ProblemKind::PolicyEval,
        ProblemKind::SyntheticTwoLevel,
        ProblemKind::SyntheticMultiLevel,
        ProblemKind::LinearQuadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::PolicyEval => "policy_eval",
            ProblemKind::SyntheticTwoLevel => "synthetic_two_level",
            ProblemKind::SyntheticMultiLevel => "synthetic_multi_level",
            ProblemKind::LinearQuadratic => "linear_quadratic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Rscgd2,
    RscgdN,
    BiasedRsgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Rscgd2, Algorithm::RscgdN, Algorithm::BiasedRsgd];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rscgd2 => "rscgd2",
            Algorithm::RscgdN => "rscgdN",
            Algorithm::BiasedRsgd => "biased_rsgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    /// `α = 1/√K`, `β` from the problem constants, `γ = 1 - t β`.
    Theorem1 {
        t: f64,
    },
    /// Multi-level schedule from the per-level constants.
    Theorem2,
    Manual {
        alpha: f64,
        beta: f64,
        gamma: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub grid_side: usize,
    pub bases: usize,
    pub rho: f64,
    pub sigma_p: f64,
    pub sigma_r: f64,
    pub instance_seed: u64,
    pub noise: NoiseModel,
    pub mode: ParamMode,
    /// Load the instance from a file written by `gen-instance`.
    pub instance_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdParams {
    pub spd_dim: usize,
    pub noise_std: f64,
    pub outer_noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub levels: usize,
    pub spd_dim: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqParams {
    pub dim: usize,
    pub m: usize,
    pub noise_std: f64,
    pub outer_noise_std: f64,
    pub instance_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    PolicyEval(PolicyParams),
    SyntheticTwoLevel(SpdParams),
    SyntheticMultiLevel(ChainParams),
    LinearQuadratic(LqParams),
}

impl ProblemSpec {
    pub fn kind(&self) -> ProblemKind {
        match self {
            ProblemSpec::PolicyEval(_) => ProblemKind::PolicyEval,
            ProblemSpec::SyntheticTwoLevel(_) => ProblemKind::SyntheticTwoLevel,
            ProblemSpec::SyntheticMultiLevel(_) => ProblemKind::SyntheticMultiLevel,
            ProblemSpec::LinearQuadratic(_) => ProblemKind::LinearQuadratic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSpec {
    pub k_values: Vec<usize>,
    pub slope_min: f64,
    pub slope_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSpec {
    pub points: usize,
    pub fd_step: f64,
    pub corrupt_adjoint: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub algorithms: Vec<Algorithm>,
    /// Iterations per run (`K`).
    pub horizon: Option<usize>,
    /// Inner-value oracle budget per run; sets `K` per algorithm.
    pub budget: Option<u64>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub schedule: ScheduleSpec,
    pub metric_stride: usize,
    pub output_path: Option<PathBuf>,
    pub record_wall_time: bool,
    pub rate: Option<RateSpec>,
    pub grad_check: GradCheckSpec,
}

struct Entries {
    map: BTreeMap<String, String>,
}

fn bad(key: &str, message: impl Into<String>) -> CliError {
    CliError::config(key, message)
}

fn require(key: &str, ok: bool, message: impl Into<String>) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(bad(key, message))
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str, what: &str) -> CliResult<T> {
    raw.parse().map_err(|_| bad(key, format!("expected {what}, got `{raw}`")))
}

fn parse_f64(key: &str, raw: &str) -> CliResult<f64> {
    let v: f64 = parse_value(key, raw, "a number")?;
    require(key, v.is_finite(), format!("value `{raw}` is not finite"))?;
    Ok(v)
}

fn parse_bool(key: &str, raw: &str) -> CliResult<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected `true` or `false`, got `{raw}`"))),
    }
}

fn split_list(key: &str, raw: &str) -> CliResult<Vec<String>> {
    let items: Vec<String> = raw.split(',').map(|s| s.trim().to_string()).collect();
    require(key, items.iter().all(|s| !s.is_empty()), format!("empty item in list `{raw}`"))?;
    Ok(items)
}

/// Comma-separated integers; `a..b` expands to `a, a+1, ..., b-1`.
fn parse_seed_list(key: &str, raw: &str) -> CliResult<Vec<u64>> {
    let mut out = Vec::new();
    for item in split_list(key, raw)? {
        if let Some((a, b)) = item.split_once("..") {
            let a: u64 = parse_value(key, a.trim(), "an integer range start")?;
            let b: u64 = parse_value(key, b.trim(), "an integer range end")?;
            require(key, a < b, format!("range `{item}` is empty"))?;
            out.extend(a..b);
        } else {
            out.push(parse_value(key, &item, "a nonnegative integer")?);
        }
    }
    let mut sorted = out.clone();
    sorted.sort_unstable();
    sorted.dedup();
    require(key, sorted.len() == out.len(), "seeds must be distinct")?;
    Ok(out)
}

impl Entries {
    fn parse(text: &str) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let where_ = format!("line {}", i + 1);
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(&where_, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            require(&where_, !key.is_empty(), "missing key")?;
            require(key, !value.is_empty(), "missing value")?;
            require(
                key,
                key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.'),
                "keys may only contain letters, digits, `_` and `.`",
            )?;
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(bad(key, "duplicate key"));
            }
        }
        Ok(Self { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn f64_or(&mut self, key: &str, default: f64) -> CliResult<f64> {
        self.take(key).map_or(Ok(default), |raw| parse_f64(key, &raw))
    }

    fn f64_opt(&mut self, key: &str) -> CliResult<Option<f64>> {
        self.take(key).map(|raw| parse_f64(key, &raw)).transpose()
    }

    fn int_opt<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>> {
        self.take(key).map(|raw| parse_value(key, &raw, "a nonnegative integer")).transpose()
    }

    fn int_or<T: FromStr>(&mut self, key: &str, default: T) -> CliResult<T> {
        Ok(self.int_opt(key)?.unwrap_or(default))
    }

    fn bool_or(&mut self, key: &str, default: bool) -> CliResult<bool> {
        self.take(key).map_or(Ok(default), |raw| parse_bool(key, &raw))
    }

    fn finish(self, problem: ProblemKind) -> CliResult<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(key) if key.starts_with("problem.") => {
                Err(bad(key, format!("unknown key for problem `{}`", problem.name())))
            }
            Some(key) => Err(bad(key, "unknown key")),
        }
    }
}

fn nonneg(key: &str, v: f64) -> CliResult<f64> {
    require(key, v >= 0.0, format!("must be nonnegative, got {v}"))?;
    Ok(v)
}

fn in_range<T: PartialOrd + std::fmt::Display + Copy>(key: &str, v: T, lo: T, hi: T) -> CliResult<T> {
    require(key, v >= lo && v <= hi, format!("must lie in [{lo}, {hi}], got {v}"))?;
    Ok(v)
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn parse_policy(e: &mut Entries, base: &Path) -> CliResult<PolicyParams> {
    let instance_path = e.take("problem.instance_path").map(|raw| resolve(base, &raw));
    if instance_path.is_some() {
        for key in [
            "problem.grid_side",
            "problem.D",
            "problem.rho",
            "problem.sigma_P",
            "problem.sigma_r",
            "problem.instance_seed",
        ] {
            if e.map.contains_key(key) {
                return Err(bad(key, "conflicts with problem.instance_path"));
            }
        }
    }
    let grid_side = in_range("problem.grid_side", e.int_or("problem.grid_side", DEFAULT_GRID_SIDE)?, 2, MAX_GRID_SIDE)?;
    let bases = in_range("problem.D", e.int_or("problem.D", DEFAULT_BASES)?, 1, MAX_BASES)?;
    let rho = e.f64_or("problem.rho", DEFAULT_RHO)?;
    require("problem.rho", rho > 0.0 && rho < 1.0, format!("must lie in (0, 1), got {rho}"))?;
    let sigma_p = nonneg("problem.sigma_P", e.f64_or("problem.sigma_P", DEFAULT_SIGMA_P)?)?;
    let sigma_r = nonneg("problem.sigma_r", e.f64_or("problem.sigma_r", DEFAULT_SIGMA_R)?)?;
    let instance_seed = e.int_or("problem.instance_seed", 1u64)?;
    let noise = match e.take("problem.noise_model").as_deref() {
        None | Some("gaussian") => NoiseModel::Gaussian,
        Some("two_point") => NoiseModel::TwoPoint,
        Some(other) => {
            return Err(bad("problem.noise_model", format!("expected `gaussian` or `two_point`, got `{other}`")))
        }
    };
    let mode = match e.take("problem.param_mode").as_deref() {
        None | Some("shared_sigma") => ParamMode::SharedSigma,
        Some("full") => ParamMode::Full,
        Some(other) => {
            return Err(bad("problem.param_mode", format!("expected `shared_sigma` or `full`, got `{other}`")))
        }
    };
    Ok(PolicyParams { grid_side, bases, rho, sigma_p, sigma_r, instance_seed, noise, mode, instance_path })
}

fn parse_noise(e: &mut Entries) -> CliResult<(f64, f64)> {
    let noise = nonneg("problem.noise_std", e.f64_or("problem.noise_std", DEFAULT_NOISE_STD)?)?;
    let outer = nonneg("problem.outer_noise_std", e.f64_or("problem.outer_noise_std", noise)?)?;
    Ok((noise, outer))
}

fn parse_problem(e: &mut Entries, base: &Path) -> CliResult<ProblemSpec> {
    let raw = e.take("problem").ok_or_else(|| bad("problem", "missing required key"))?;
    let kind = ProblemKind::ALL.into_iter().find(|k| k.name() == raw).ok_or_else(|| {
        let names: Vec<_> = ProblemKind::ALL.iter().map(|k| k.name()).collect();
        bad("problem", format!("unknown problem `{raw}`; expected one of {}", names.join(", ")))
    })?;
    Ok(match kind {
        ProblemKind::PolicyEval => ProblemSpec::PolicyEval(parse_policy(e, base)?),
        ProblemKind::SyntheticTwoLevel => {
            let spd_dim = in_range("problem.spd_dim", e.int_or("problem.spd_dim", 2)?, 2, MAX_SPD_DIM)?;
            let (noise_std, outer_noise_std) = parse_noise(e)?;
            ProblemSpec::SyntheticTwoLevel(SpdParams { spd_dim, noise_std, outer_noise_std })
        }
        ProblemKind::SyntheticMultiLevel => {
            let levels = in_range("problem.N", e.int_or("problem.N", 3)?, 2, MAX_LEVELS)?;
            let spd_dim = in_range("problem.spd_dim", e.int_or("problem.spd_dim", 2)?, 2, MAX_SPD_DIM)?;
            let noise_std = nonneg("problem.noise_std", e.f64_or("problem.noise_std", DEFAULT_NOISE_STD)?)?;
            ProblemSpec::SyntheticMultiLevel(ChainParams { levels, spd_dim, noise_std })
        }
        ProblemKind::LinearQuadratic => {
            let dim = in_range("problem.dim", e.int_or("problem.dim", 5)?, 1, MAX_LQ_DIM)?;
            let m = in_range("problem.m", e.int_or("problem.m", 8)?, 1, MAX_LQ_DIM)?;
            let (noise_std, outer_noise_std) = parse_noise(e)?;
            let instance_seed = e.int_or("problem.instance_seed", 1u64)?;
            ProblemSpec::LinearQuadratic(LqParams { dim, m, noise_std, outer_noise_std, instance_seed })
        }
    })
}

fn parse_algorithms(e: &mut Entries, kind: ProblemKind) -> CliResult<Vec<Algorithm>> {
    let key = "algorithm";
    let algorithms = match e.take(key) {
        None if kind == ProblemKind::SyntheticMultiLevel => vec![Algorithm::RscgdN],
        None => vec![Algorithm::Rscgd2],
        Some(raw) => split_list(key, &raw)?
            .iter()
            .map(|name| {
                Algorithm::ALL.into_iter().find(|a| a.name() == name).ok_or_else(|| {
                    bad(key, format!("unknown algorithm `{name}`; expected rscgd2, rscgdN or biased_rsgd"))
                })
            })
            .collect::<CliResult<Vec<_>>>()?,
    };
    for (i, a) in algorithms.iter().enumerate() {
        require(key, !algorithms[..i].contains(a), format!("algorithm `{}` listed twice", a.name()))?;
        if kind == ProblemKind::SyntheticMultiLevel {
            require(key, *a == Algorithm::RscgdN, format!("`{}` needs a two-level problem", a.name()))?;
        }
    }
    Ok(algorithms)
}

fn parse_schedule(e: &mut Entries, algorithms: &[Algorithm]) -> CliResult<ScheduleSpec> {
    let key = "schedule";
    let any_multi = algorithms.contains(&Algorithm::RscgdN);
    let all_multi = algorithms.iter().all(|a| *a == Algorithm::RscgdN);
    let raw = match e.take(key) {
        Some(raw) => raw,
        None if all_multi => "theorem2".into(),
        None if !any_multi => "theorem1".into(),
        None => return Err(bad(key, "mixing two-level and multi-level algorithms requires `schedule = manual`")),
    };
    let manual_keys = ["schedule.alpha", "schedule.beta", "schedule.gamma"];
    let spec = match raw.as_str() {
        "theorem1" => {
            require(key, !any_multi, "theorem1 does not apply to rscgdN; use theorem2 or manual")?;
            let t = e.f64_or("schedule.t", 1.0)?;
            require("schedule.t", t.abs() > 0.0, "must be nonzero")?;
            ScheduleSpec::Theorem1 { t }
        }
        "theorem2" => {
            require(key, all_multi, "theorem2 only applies to rscgdN; use theorem1 or manual")?;
            ScheduleSpec::Theorem2
        }
        "manual" => {
            let alpha =
                e.f64_opt("schedule.alpha")?.ok_or_else(|| bad("schedule.alpha", "required by schedule = manual"))?;
            let beta =
                e.f64_opt("schedule.beta")?.ok_or_else(|| bad("schedule.beta", "required by schedule = manual"))?;
            nonneg("schedule.alpha", alpha)?;
            require("schedule.beta", beta > 0.0 && beta < 1.0, format!("must lie in (0, 1), got {beta}"))?;
            let gamma = e.f64_or("schedule.gamma", 1.0 - beta)?;
            ScheduleSpec::Manual { alpha, beta, gamma }
        }
        other => return Err(bad(key, format!("expected theorem1, theorem2 or manual, got `{other}`"))),
    };
    if !matches!(spec, ScheduleSpec::Manual { .. }) {
        if let Some(k) = manual_keys.iter().find(|k| e.map.contains_key(**k)) {
            return Err(bad(k, "only applies to schedule = manual"));
        }
    }
    if !matches!(spec, ScheduleSpec::Theorem1 { .. }) && e.map.contains_key("schedule.t") {
        return Err(bad("schedule.t", "only applies to schedule = theorem1"));
    }
    Ok(spec)
}

fn parse_rate(e: &mut Entries) -> CliResult<Option<RateSpec>> {
    let key = "rate.K_values";
    let Some(raw) = e.take(key) else {
        for k in ["rate.slope_min", "rate.slope_max"] {
            if e.map.contains_key(k) {
                return Err(bad(k, "requires rate.K_values"));
            }
        }
        return Ok(None);
    };
    let k_values = split_list(key, &raw)?
        .iter()
        .map(|s| parse_value::<usize>(key, s, "a positive integer"))
        .collect::<CliResult<Vec<_>>>()?;
    require(key, k_values.len() >= 3, format!("at least 3 horizons are required, got {}", k_values.len()))?;
    require(key, k_values[0] >= 1, "horizons must be at least 1")?;
    require(key, k_values.windows(2).all(|w| w[1] > w[0]), "horizons must be strictly increasing")?;
    let slope_min = e.f64_or("rate.slope_min", DEFAULT_SLOPE_MIN)?;
    let slope_max = e.f64_or("rate.slope_max", DEFAULT_SLOPE_MAX)?;
    require("rate.slope_max", slope_max > slope_min, format!("must exceed rate.slope_min = {slope_min}"))?;
    Ok(Some(RateSpec { k_values, slope_min, slope_max }))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> CliResult<Self> {
        let mut e = Entries::parse(text)?;
        let problem = parse_problem(&mut e, base_dir)?;
        let kind = problem.kind();
        let algorithms = parse_algorithms(&mut e, kind)?;
        let horizon = e.int_opt::<usize>("K")?;
        if let Some(k) = horizon {
            require("K", k >= 1, "must be at least 1")?;
        }
        let budget = e.int_opt::<u64>("budget.inner_calls")?;
        if budget.is_some() && horizon.is_some() {
            return Err(bad("budget.inner_calls", "conflicts with K; set one of them"));
        }
        let seeds = match e.take("seeds") {
            Some(raw) => parse_seed_list("seeds", &raw)?,
            None => vec![0],
        };
        let master_seed = e.int_or("master_seed", 0u64)?;
        let schedule = parse_schedule(&mut e, &algorithms)?;
        let metric_stride = e.int_or("metrics.stride", 1usize)?;
        require("metrics.stride", metric_stride >= 1, "must be at least 1")?;
        let output_path = e.take("output_path").map(|raw| resolve(base_dir, &raw));
        let record_wall_time = e.bool_or("output.record_wall_time", false)?;
        let rate = parse_rate(&mut e)?;
        let points = e.int_or("grad_check.points", DEFAULT_CHECK_POINTS)?;
        require("grad_check.points", (1..=1000).contains(&points), format!("must lie in [1, 1000], got {points}"))?;
        let fd_step = e.f64_or("grad_check.fd_step", DEFAULT_FD_STEP)?;
        require(
            "grad_check.fd_step",
            (1e-7..=1e-3).contains(&fd_step),
            format!("must lie in [1e-7, 1e-3], got {fd_step}"),
        )?;
        let corrupt_adjoint = e.bool_or("grad_check.corrupt_adjoint", false)?;
        if corrupt_adjoint {
            require(
                "grad_check.corrupt_adjoint",
                kind != ProblemKind::SyntheticMultiLevel,
                "needs a two-level problem",
            )?;
        }
        e.finish(kind)?;
        Ok(Self {
            problem,
            algorithms,
            horizon,
            budget,
            seeds,
            master_seed,
            schedule,
            metric_stride,
            output_path,
            record_wall_time,
            rate,
            grad_check: GradCheckSpec { points, fd_step, corrupt_adjoint },
        })
    }

    pub fn output_path(&self) -> CliResult<&Path> {
        self.output_path.as_deref().ok_or_else(|| bad("output_path", "missing required key"))
    }
}
