//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 4 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command as Process;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use riescomp::composition::{
    adjoint_pairing_residual, composite_rgrad_exact, exact_inner_value, exact_objective, gaussian_vector, AsMultiLevel,
    TwoLevelProblem,
};
use riescomp::fixtures::{CorruptedAdjoint, FiniteFixture, LinearQuadratic, SpdTarget};
use riescomp::manifold::{
    exp_map, geodesic_distance, inner, parallel_transport, project_tangent, random_point, random_tangent, Manifold,
    Point, Tangent,
};
use riescomp::policy_eval::{generate_instance, NoiseModel, ParamMode, PolicyEvalProblem};
use riescomp::rng::{SampleRng, StreamSeed};
use riescomp::solver::{make_schedule_theorem1, run_multi_level, run_two_level, RunOptions, Schedule, Y0Policy};
use riescomp::verify::{enumerate_expectation, fd_rgrad, lyapunov_trace, stationary_tracking_mse, FD_DEFAULT_STEP};
use riescomp_cli::commands::{cmd_rate, cmd_run, thread_pool};
use riescomp_cli::config::Algorithm;
use riescomp_cli::{CliError, ExperimentConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> SampleRng {
    SampleRng::seed_from_u64(seed)
}

fn unit_tangent(x: &Point, r: &mut SampleRng) -> Tangent {
    loop {
        let v = random_tangent(x, r);
        let n = v.norm();
        if n > 1e-8 {
            return v.scale(1.0 / n);
        }
    }
}

fn geometry_manifolds() -> Vec<(&'static str, Manifold)> {
    vec![
        ("Euclidean(5)", Manifold::euclidean(5)),
        ("Sphere(4)", Manifold::sphere(4)),
        ("Sphere(5)", Manifold::sphere(5)),
        ("SPD(2)", Manifold::spd(2)),
        ("SPD(3)", Manifold::spd(3)),
        (
            "Euclidean(2)xSphere(3)xSPD(2)",
            Manifold::product(vec![Manifold::euclidean(2), Manifold::sphere(3), Manifold::spd(2)]),
        ),
    ]
}

fn criterion_1() -> Outcome {
    const TRIALS: usize = 200;
    let mut r = rng(11);
    let (mut exp_id, mut rigid, mut iso, mut idem, mut split) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (_, m) in geometry_manifolds() {
        for _ in 0..TRIALS {
            let x = random_point(&m, &mut r);
            let zero = Tangent::zero(&x);
            exp_id = exp_id.max((exp_map(&x, &zero).map_err(|e| e.to_string())?.coords() - x.coords()).amax());

            let v = unit_tangent(&x, &mut r);
            for t in [1e-2, 1e-3, 1e-4] {
                let y = exp_map(&x, &v.scale(t)).map_err(|e| e.to_string())?;
                let d = geodesic_distance(&x, &y).map_err(|e| e.to_string())?;
                rigid = rigid.max((d - t).abs() / t);
            }

            let step = unit_tangent(&x, &mut r);
            let (u, w) = (random_tangent(&x, &mut r), random_tangent(&x, &mut r));
            let y = exp_map(&x, &step).map_err(|e| e.to_string())?;
            let pu = parallel_transport(&x, &step, &u).map_err(|e| e.to_string())?;
            let pw = parallel_transport(&x, &step, &w).map_err(|e| e.to_string())?;
            let before = inner(&x, &u, &w).map_err(|e| e.to_string())?;
            let after = inner(&y, &pu, &pw).map_err(|e| e.to_string())?;
            iso = iso.max((after - before).abs() / (u.norm() * w.norm()));

            let a = gaussian_vector(&mut r, m.ambient_dim());
            let p1 = project_tangent(&x, &a).map_err(|e| e.to_string())?;
            let p2 = project_tangent(&x, p1.coords()).map_err(|e| e.to_string())?;
            idem = idem.max((p2.coords() - p1.coords()).amax() / a.amax().max(1.0));

            if let riescomp::ManifoldKind::Product(parts) = m.kind() {
                let y = exp_map(&x, &step).map_err(|e| e.to_string())?;
                let (xs, vs, ys) =
                    (m.split(x.coords().as_slice()), m.split(step.coords().as_slice()), m.split(y.coords().as_slice()));
                for (i, part) in parts.iter().enumerate() {
                    let xi = Point::from_slice(part.clone(), xs[i]).map_err(|e| e.to_string())?;
                    let vi = Tangent::new(xi.clone(), DVector::from_column_slice(vs[i])).map_err(|e| e.to_string())?;
                    let yi = exp_map(&xi, &vi).map_err(|e| e.to_string())?;
                    split = split.max((yi.coords() - DVector::from_column_slice(ys[i])).amax());
                }
            }
        }
    }
    let detail = format!(
        "exp identity {exp_id:.1e}, rigidity rel {rigid:.1e} (<=1e-6), transport isometry rel {iso:.1e} (<=1e-9), \
         projection idempotence {idem:.1e} (<=1e-12), product split {split:.1e}"
    );
    check(exp_id == 0.0 && rigid <= 1e-6 && iso <= 1e-9 && idem <= 1e-12 && split <= 1e-14, detail)
}

struct AdjointStats {
    pairing_ratio: f64,
    fd_rel: f64,
}

fn adjoint_stats<P: TwoLevelProblem>(p: &P, points: usize, r: &mut SampleRng) -> Result<AdjointStats, String> {
    let m = p.inner_codomain().ambient_dim();
    let x0 = p.initial_point();
    let (mut ratio, mut fd_rel) = (0.0f64, 0.0f64);
    for i in 0..points {
        let x = if i == 0 {
            x0.clone()
        } else {
            exp_map(&x0, &unit_tangent(&x0, r).scale(0.3)).map_err(|e| e.to_string())?
        };
        let phi = p.draw_inner(r);
        let v = random_tangent(&x, r);
        let u = gaussian_vector(r, m);
        let res = adjoint_pairing_residual(p, &x, &phi, &v, &u).map_err(|e| e.to_string())?;
        ratio = ratio.max(res / (1e-6 * (1.0 + u.norm() * v.norm())));
        let fd =
            fd_rgrad(|z| exact_objective(p, z).unwrap_or(f64::NAN), &x, FD_DEFAULT_STEP).map_err(|e| e.to_string())?;
        let exact = composite_rgrad_exact(p, &x).map_err(|e| e.to_string())?;
        fd_rel = fd_rel.max(fd.sub(&exact).map_err(|e| e.to_string())?.norm() / exact.norm());
    }
    Ok(AdjointStats { pairing_ratio: ratio, fd_rel })
}

fn lq_fixture() -> LinearQuadratic {
    let a = DMatrix::from_row_slice(4, 3, &[1.0, 0.5, -0.3, 0.2, 1.1, 0.4, -0.6, 0.3, 0.9, 0.1, -0.2, 0.7]);
    let target = DVector::from_vec(vec![0.5, -1.0, 0.25, 2.0]);
    LinearQuadratic::new(a, target, 0.3, 0.3).with_initial(DVector::from_vec(vec![0.2, -0.4, 1.0]))
}

fn criterion_2() -> Outcome {
    let mut r = rng(22);
    let lq = lq_fixture();
    let (mdp, truth) = generate_instance(7, 5, 0.9, 0.0, 0.0, 1).map_err(|e| e.to_string())?;
    let shared = PolicyEvalProblem::new(mdp.clone(), truth.clone());
    let x_full = PolicyEvalProblem::full_start(&truth, &shared.initial_point()).map_err(|e| e.to_string())?;
    let full = PolicyEvalProblem::with_options(mdp, truth, ParamMode::Full, NoiseModel::Gaussian, x_full)
        .map_err(|e| e.to_string())?;

    let good = [
        ("linear-quadratic", adjoint_stats(&lq, 10, &mut r)?),
        ("policy-eval shared", adjoint_stats(&shared, 6, &mut r)?),
        ("policy-eval full", adjoint_stats(&full, 4, &mut r)?),
    ];
    let bad = [
        ("linear-quadratic", adjoint_stats(&CorruptedAdjoint { inner: lq.clone(), factor: 1.5 }, 4, &mut r)?),
        ("policy-eval shared", adjoint_stats(&CorruptedAdjoint { inner: shared.clone(), factor: 1.5 }, 4, &mut r)?),
    ];
    let good_ok = good.iter().all(|(_, s)| s.pairing_ratio <= 1.0 && s.fd_rel <= 1e-4);
    let bad_caught = bad.iter().all(|(_, s)| s.pairing_ratio > 1.0 && s.fd_rel > 1e-4);
    let mut detail: Vec<String> = good
        .iter()
        .map(|(n, s)| format!("{n}: pairing {:.1e} of tol, fd rel {:.1e}", s.pairing_ratio, s.fd_rel))
        .collect();
    detail.extend(
        bad.iter()
            .map(|(n, s)| format!("corrupted {n}: pairing {:.1e} of tol, fd rel {:.1e}", s.pairing_ratio, s.fd_rel)),
    );
    check(good_ok && bad_caught, detail.join("; "))
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    let domains = [
        Manifold::euclidean(3),
        Manifold::sphere(3),
        Manifold::spd(2),
        Manifold::product(vec![Manifold::euclidean(1), Manifold::spd(2)]),
    ];
    let mut r = rng(33);
    for (i, d) in domains.into_iter().enumerate() {
        let p = FiniteFixture::new(d.clone(), 4, 32, 32, 300 + i as u64);
        for _ in 0..3 {
            let x = random_point(&d, &mut r);
            let e = enumerate_expectation(&p, &x).map_err(|e| e.to_string())?;
            let exact = composite_rgrad_exact(&p, &x).map_err(|e| e.to_string())?;
            let g = exact_inner_value(&p, &x).map_err(|e| e.to_string())?;
            worst = worst.max((e.mean_gradient.coords() - exact.coords()).amax());
            worst = worst.max((e.mean_inner - g).amax());
        }
    }
    check(worst <= 1e-10, format!("32x32 outcomes on 4 domains, max deviation {worst:.1e} (<=1e-10)"))
}

fn criterion_4() -> Outcome {
    const ITERS: usize = 10_000;
    let m = 16;
    let sigma = 0.5;
    let a = DMatrix::from_fn(m, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin());
    let p = LinearQuadratic::new(a, DVector::zeros(m), sigma, 0.0);
    let v_sq = m as f64 * sigma * sigma;
    let x0 = p.initial_point();
    let y0 = Y0Policy::Supplied(vec![exact_inner_value(&p, &x0).map_err(|e| e.to_string())?]);
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, beta) in [0.5, 0.1, 0.02].into_iter().enumerate() {
        let sched = Schedule::manual_coupled(0.0, beta, ITERS).map_err(|e| e.to_string())?;
        let out = run_two_level(&p, &x0, &y0, &sched, ITERS, StreamSeed::new(44, i as u64), &RunOptions::default())
            .map_err(|e| e.to_string())?;
        let burn_in = (5.0 / beta).ceil() as usize;
        let tail = &out.records[burn_in..];
        let mse = tail.iter().map(|r| r.tracking_err_sq).sum::<f64>() / tail.len() as f64;
        let target = stationary_tracking_mse(beta, v_sq).map_err(|e| e.to_string())?;
        let rel = (mse - target.exact).abs() / target.exact;
        ok &= rel <= 0.15 && mse <= target.bound;
        lines.push(format!(
            "beta {beta}: mse {mse:.4} vs {:.4} (rel {rel:.3}), bound {:.3}",
            target.exact, target.bound
        ));
    }
    check(ok, lines.join("; "))
}

fn criterion_5() -> Outcome {
    const K: usize = 500;
    let opts = RunOptions { metric_stride: 1, keep_iterates: true };
    let mut worst = 0.0f64;
    let spd = SpdTarget::standard(0.3, 0.3);
    let (mdp, truth) = generate_instance(7, 5, 0.9, 0.01, 0.05, 1).map_err(|e| e.to_string())?;
    let policy = PolicyEvalProblem::new(mdp, truth);
    fn max_gap<P: TwoLevelProblem + Clone>(p: &P, opts: &RunOptions) -> Result<f64, String> {
        let x0 = p.initial_point();
        let sched = make_schedule_theorem1(&p.constants(), K, None).map_err(|e| e.to_string())?;
        let seed = StreamSeed::new(55, 0);
        let two = run_two_level(p, &x0, &Y0Policy::FreshSample, &sched, K, seed, opts).map_err(|e| e.to_string())?;
        let multi = run_multi_level(&AsMultiLevel(p.clone()), &x0, &Y0Policy::FreshSample, &sched, K, seed, opts)
            .map_err(|e| e.to_string())?;
        if two.iterates.len() != K + 1 || multi.iterates.len() != K + 1 {
            return Err("missing iterates".into());
        }
        two.iterates
            .iter()
            .zip(&multi.iterates)
            .map(|(a, b)| geodesic_distance(a, b).map_err(|e| e.to_string()))
            .try_fold(0.0f64, |acc, d| Ok(acc.max(d?)))
    }
    worst = worst.max(max_gap(&spd, &opts)?);
    worst = worst.max(max_gap(&policy, &opts)?);
    check(worst <= 1e-12, format!("K = {K} on SPD(2) target and policy-eval, max geodesic gap {worst:.1e} (<=1e-12)"))
}

fn rate_config(body: &str, out: &Path) -> String {
    format!(
        "{body}\nrate.K_values = 100, 1000, 10000\nseeds = 0..5\nmaster_seed = 7\noutput_path = {}\n",
        out.display()
    )
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pool = thread_pool().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, body, limit) in [
        ("two-level SPD(2)", "problem = synthetic_two_level\nproblem.noise_std = 0.3\nschedule = theorem1", 180),
        (
            "3-level SPD(2) chain",
            "problem = synthetic_multi_level\nproblem.N = 3\nproblem.noise_std = 0.3\nschedule = theorem2",
            300,
        ),
    ] {
        let start = Instant::now();
        let text = rate_config(body, &dir.path().join(name.replace(' ', "_")));
        let config = ExperimentConfig::parse(&text, dir.path()).map_err(|e| e.to_string())?;
        let report = cmd_rate(&config, &pool).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        ok &= report.in_interval && elapsed < Duration::from_secs(limit);
        lines.push(format!(
            "{name}: slope {:.3} in [-0.75, -0.30] (r^2 {:.3}, {:.1}s)",
            report.fit.slope,
            report.fit.r_squared,
            elapsed.as_secs_f64()
        ));
    }
    check(ok, lines.join("; "))
}

fn criterion_7() -> Outcome {
    const K: usize = 1000;
    let p = SpdTarget::standard(0.0, 0.0);
    let x0 = p.initial_point();
    let sched = make_schedule_theorem1(&p.constants(), K, None).map_err(|e| e.to_string())?;
    let out = run_two_level(&p, &x0, &Y0Policy::FreshSample, &sched, K, StreamSeed::new(77, 0), &RunOptions::default())
        .map_err(|e| e.to_string())?;
    let x_star = Point::from_matrix(&p.target).map_err(|e| e.to_string())?;
    let f_star = exact_objective(&p, &x_star).map_err(|e| e.to_string())?;
    let trace = lyapunov_trace(&out.records, f_star).map_err(|e| e.to_string())?;
    let worst_rise = trace.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let detail = format!(
        "K = {K}, V from {:.3e} to {:.3e}, largest increase {worst_rise:.1e} (<=1e-12)",
        trace[0],
        trace[trace.len() - 1]
    );
    check(worst_rise <= 1e-12 && trace[trace.len() - 1] < trace[0], detail)
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = format!(
        "problem = policy_eval\nalgorithm = rscgd2, biased_rsgd\nbudget.inner_calls = 20000\nseeds = 0..10\nmaster_seed = 2024\n\
         schedule = manual\nschedule.alpha = 0.05\nschedule.beta = 0.1\nmetrics.stride = 500\noutput_path = {}\n",
        dir.path().display()
    );
    let config = ExperimentConfig::parse(&text, dir.path()).map_err(|e| e.to_string())?;
    let pool = thread_pool().map_err(|e| e.to_string())?;
    let summary = cmd_run(&config, &pool).map_err(|e| e.to_string())?;
    let median_of =
        |a: Algorithm| summary.algorithms.iter().find(|s| s.algorithm == a).map(|s| s.median_final_objective);
    let (Some(ours), Some(biased)) = (median_of(Algorithm::Rscgd2), median_of(Algorithm::BiasedRsgd)) else {
        return Err("missing algorithm summary".into());
    };
    let budgets_equal =
        summary.outcomes.iter().all(|o| o.counts.inner_values == 20_000 - (o.algorithm == Algorithm::Rscgd2) as u64);
    let (mdp, truth) = generate_instance(7, 5, 0.9, 0.0, 0.0, 1).map_err(|e| e.to_string())?;
    let clean = PolicyEvalProblem::new(mdp, truth);
    let at_truth = exact_objective(&clean, &clean.true_point()).map_err(|e| e.to_string())?;
    let detail = format!(
        "median final objective R-SCGD {ours:.3e} vs biased {biased:.3e}; zero-noise objective at truth {at_truth:.1e} (<=1e-12)"
    );
    check(ours < biased && at_truth <= 1e-12 && budgets_equal, detail)
}

fn run_binary(args: &[&str], threads: Option<&str>) -> (i32, String) {
    let mut cmd = Process::new(env!("CARGO_BIN_EXE_riescomp"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("RIESCOMP_THREADS", t),
        None => cmd.env_remove("RIESCOMP_THREADS"),
    };
    let out = cmd.output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| {
            let e = e.expect("entry");
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("file"))
        })
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base =
        "problem = synthetic_two_level\nalgorithm = rscgd2, biased_rsgd\nK = 200\nseeds = 0..4\nmaster_seed = 9\n";
    let mut outputs = Vec::new();
    for (i, threads) in [None, None, Some("1")].into_iter().enumerate() {
        let cfg = dir.path().join(format!("run{i}.cfg"));
        std::fs::write(&cfg, format!("{base}output_path = out{i}\n")).map_err(|e| e.to_string())?;
        let (code, err) = run_binary(&["run", cfg.to_str().unwrap()], threads);
        if code != 0 {
            return Err(format!("run {i} exited {code}: {err}"));
        }
        outputs.push(dir_bytes(&dir.path().join(format!("out{i}"))));
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    let n_files = outputs[0].len();

    let invalid: &[(&str, &str)] = &[
        ("problem = nope", "problem"),
        ("problem = synthetic_two_level\nK = 0", "K"),
        ("problem = synthetic_two_level\nK = 5\nseeds = 1, 1", "seeds"),
        ("problem = synthetic_two_level\nK = 5\nalgorithm = adam", "algorithm"),
        (
            "problem = synthetic_two_level\nK = 5\nschedule = manual\nschedule.alpha = 0.1\nschedule.beta = 1",
            "schedule.beta",
        ),
        (
            "problem = synthetic_two_level\nK = 5\nschedule = manual\nschedule.alpha = 0.1\nschedule.beta = 0",
            "schedule.beta",
        ),
        ("problem = synthetic_two_level\nK = 5\nproblem.noise_std = -0.1", "problem.noise_std"),
        ("problem = synthetic_two_level\nK = 5\nmystery = 3", "mystery"),
        ("problem = policy_eval\nK = 5\nproblem.rho = 1.5", "problem.rho"),
        ("problem = policy_eval\nK = 5\nproblem.grid_side = 1", "problem.grid_side"),
        ("problem = policy_eval\nK = 5\nproblem.sigma_P = -1", "problem.sigma_P"),
        ("problem = synthetic_multi_level\nK = 5\nproblem.N = 2", "schedule"),
        ("problem = synthetic_two_level\nseeds = 0..5\nrate.K_values = 100", "rate.K_values"),
    ];
    let mut rejected = 0;
    let mut failures = Vec::new();
    for (i, (body, key)) in invalid.iter().enumerate() {
        let out = dir.path().join(format!("bad{i}"));
        let cfg = dir.path().join(format!("bad{i}.cfg"));
        std::fs::write(&cfg, format!("{body}\noutput_path = {}\n", out.display())).map_err(|e| e.to_string())?;
        let sub = if body.contains("rate.") { "rate" } else { "run" };
        let (code, err) = run_binary(&[sub, cfg.to_str().unwrap()], None);
        if code == 2 && err.contains(&format!("`{key}`")) && !out.exists() {
            rejected += 1;
        } else {
            failures.push(format!("{key}: exit {code}"));
        }
    }
    let (code, _) = run_binary(&["run", dir.path().join("missing.cfg").to_str().unwrap()], None);
    let in_lib = ExperimentConfig::parse("problem = synthetic_two_level\nK = -1\n", dir.path());
    let lib_ok = matches!(in_lib, Err(CliError::Config { ref key, .. }) if key == "K");
    let detail = format!(
        "{n_files} files byte-identical across 3 runs: {identical}; {rejected}/{} invalid configs rejected with exit 2 \
         before computing{}; missing file exit {code}",
        invalid.len(),
        if failures.is_empty() { String::new() } else { format!(" (failed: {})", failures.join(", ")) }
    );
    check(identical && n_files == 10 && failures.is_empty() && code == 1 && lib_ok, detail)
}

type Criterion = (u32, &'static str, fn() -> Outcome, u64);

const CRITERIA: [Criterion; 9] = [
    (1, "geometry suite", criterion_1, 10),
    (2, "adjoint and gradient suite", criterion_2, 30),
    (3, "chain rule in expectation", criterion_3, 5),
    (4, "tracking mean square error", criterion_4, 20),
    (5, "N = 2 collapse", criterion_5, 10),
    (6, "rate check", criterion_6, 480),
    (7, "Lyapunov descent", criterion_7, 10),
    (8, "benchmark regression", criterion_8, 300),
    (9, "determinism and config rejection", criterion_9, 5),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f, limit) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(d) if secs <= limit as f64 => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {limit}s budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!("criterion {n} {}: {name}: {detail} [{secs:.2}s]", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
