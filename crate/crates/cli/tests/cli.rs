use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riescomp::policy_eval::InstanceFile;
use riescomp_cli::output::{fmt_f64, read_csv, read_metrics, METRICS_HEADER, SUMMARY_HEADER};

fn riescomp(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riescomp"));
    cmd.args(args).env_remove("RIESCOMP_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn minimal_run_writes_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "problem = synthetic_two_level\nK = 10\noutput_path = out\n");
    let o = riescomp(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_metrics(&dir.path().join("out/rscgd2_seed0.csv")).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.windows(2).all(|w| w[1].k > w[0].k));
    assert!(rows.iter().all(|r| r.grad_norm_sq.is_finite() && !r.grad_is_estimate && r.wall_time_s == 0.0));
    assert_eq!(rows[0].oracle_calls_cum, 1);
    let (header, _) = read_csv(&dir.path().join("out/rscgd2_seed0.csv")).unwrap();
    assert_eq!(header, METRICS_HEADER);
}

#[test]
fn summary_values_round_trip_and_match_per_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.cfg",
        "problem = synthetic_multi_level\nproblem.N = 3\nK = 40\nseeds = 0..3\nmetrics.stride = 7\noutput_path = out\n",
    );
    let o = riescomp(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("out");
    let (header, summary) = read_csv(&out.join("summary.csv")).unwrap();
    assert_eq!(header, SUMMARY_HEADER);
    let runs: Vec<_> = (0..3).map(|s| read_metrics(&out.join(format!("rscgdN_seed{s}.csv"))).unwrap()).collect();
    assert_eq!(summary.len(), runs[0].len());
    for (i, row) in summary.iter().enumerate() {
        for field in row.iter().skip(3) {
            let v: f64 = field.parse().unwrap();
            assert_eq!(fmt_f64(v), field, "lossless re-serialization");
        }
        assert_eq!(row[1].parse::<usize>().unwrap(), runs[0][i].k);
        let mean = runs.iter().map(|r| r[i].grad_norm_sq).sum::<f64>() / 3.0;
        assert_eq!(row[3].parse::<f64>().unwrap(), mean);
    }
    assert_eq!(runs[0].iter().map(|r| r.k).collect::<Vec<_>>(), vec![0, 7, 14, 21, 28, 35]);
}

#[test]
fn repeated_runs_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let body = "problem = policy_eval\nalgorithm = rscgd2, biased_rsgd\nK = 50\nseeds = 0..4\nmaster_seed = 5\n";
    let mut snapshots = Vec::new();
    for (i, threads) in ["1", "3", "8"].iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.cfg"), &format!("{body}output_path = out{i}\n"));
        let o = riescomp(&["run", cfg.to_str().unwrap()], &[("RIESCOMP_THREADS", threads)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut files: Vec<_> = std::fs::read_dir(dir.path().join(format!("out{i}")))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        snapshots.push(files);
    }
    assert_eq!(snapshots[0].len(), 10);
    assert_eq!(snapshots[0], snapshots[1]);
    assert_eq!(snapshots[0], snapshots[2]);
}

#[test]
fn wall_time_is_recorded_only_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.cfg",
        "problem = synthetic_two_level\nK = 20\noutput.record_wall_time = true\noutput_path = out\n",
    );
    assert_eq!(code(&riescomp(&["run", cfg.to_str().unwrap()], &[])), 0);
    let rows = read_metrics(&dir.path().join("out/rscgd2_seed0.csv")).unwrap();
    assert!(rows.iter().all(|r| r.wall_time_s >= 0.0));
    assert!(rows.windows(2).all(|w| w[1].wall_time_s >= w[0].wall_time_s));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let missing = riescomp(&["run", d.join("nope.cfg").to_str().unwrap()], &[]);
    assert_eq!(code(&missing), 1);

    let unknown =
        write_config(d, "u.cfg", "problem = synthetic_two_level\nK = 3\nlearning_rate = 0.1\noutput_path = o\n");
    let o = riescomp(&["run", unknown.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`learning_rate`"));
    assert!(!d.join("o").exists());

    let ok = write_config(d, "ok.cfg", "problem = synthetic_two_level\nK = 3\noutput_path = o2\n");
    let o = riescomp(&["run", ok.to_str().unwrap()], &[("RIESCOMP_THREADS", "0")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("RIESCOMP_THREADS"));

    let blowup = write_config(
        d,
        "b.cfg",
        "problem = synthetic_two_level\nK = 50\nschedule = manual\nschedule.alpha = 1e300\nschedule.beta = 0.5\noutput_path = o3\n",
    );
    let o = riescomp(&["run", blowup.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let rows = read_metrics(&d.join("o3/rscgd2_seed0.csv")).unwrap();
    assert!(rows.last().unwrap().is_aborted());

    let usage = riescomp(&["launch", ok.to_str().unwrap()], &[]);
    assert_eq!(code(&usage), 2);
}

#[test]
fn grad_check_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lq = write_config(d, "lq.cfg", "problem = linear_quadratic\n");
    let o = riescomp(&["grad-check", lq.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let residual: f64 = stdout(&o)
        .lines()
        .find(|l| l.starts_with("max adjoint pairing residual"))
        .and_then(|l| l.split_whitespace().nth(4))
        .unwrap()
        .parse()
        .unwrap();
    assert!(residual <= 1e-10, "{residual}");

    let policy = write_config(d, "p.cfg", "problem = policy_eval\nproblem.sigma_P = 0\nproblem.sigma_r = 0\n");
    assert_eq!(code(&riescomp(&["grad-check", policy.to_str().unwrap()], &[])), 0);

    let full = write_config(d, "f.cfg", "problem = policy_eval\nproblem.param_mode = full\ngrad_check.points = 2\n");
    assert_eq!(code(&riescomp(&["grad-check", full.to_str().unwrap()], &[])), 0);

    let chain = write_config(d, "c.cfg", "problem = synthetic_multi_level\nproblem.N = 4\n");
    assert_eq!(code(&riescomp(&["grad-check", chain.to_str().unwrap()], &[])), 0);

    let corrupted = write_config(d, "x.cfg", "problem = policy_eval\ngrad_check.corrupt_adjoint = true\n");
    let o = riescomp(&["grad-check", corrupted.to_str().unwrap()], &[]);
    assert_ne!(code(&o), 0);
    assert_eq!(code(&o), 4);
}

#[test]
fn rate_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let single =
        write_config(d, "s.cfg", "problem = synthetic_two_level\nseeds = 0..5\nrate.K_values = 100\noutput_path = s\n");
    assert_eq!(code(&riescomp(&["rate", single.to_str().unwrap()], &[])), 2);

    let few_seeds =
        write_config(d, "f.cfg", "problem = synthetic_two_level\nrate.K_values = 10, 100, 1000\noutput_path = f\n");
    assert_eq!(code(&riescomp(&["rate", few_seeds.to_str().unwrap()], &[])), 2);

    let stochastic = write_config(
        d,
        "r.cfg",
        "problem = synthetic_two_level\nseeds = 0..5\nmaster_seed = 7\nrate.K_values = 100, 1000, 10000\noutput_path = r\n",
    );
    let o = riescomp(&["rate", stochastic.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let (header, rows) = read_csv(&d.join("r/rate_fit.csv")).unwrap();
    assert_eq!(header[0], "slope");
    let slope: f64 = rows[0][0].parse().unwrap();
    assert!((-0.75..=-0.30).contains(&slope), "{slope}");
    let (_, per_seed) = read_csv(&d.join("r/rate.csv")).unwrap();
    assert_eq!(per_seed.len(), 15);

    let deterministic = write_config(
        d,
        "z.cfg",
        "problem = synthetic_two_level\nproblem.noise_std = 0\nseeds = 0..5\nrate.K_values = 100, 1000, 10000\n\
         rate.slope_min = -5\nrate.slope_max = -0.45\noutput_path = z\n",
    );
    let o = riescomp(&["rate", deterministic.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));

    let narrow = write_config(
        d,
        "n.cfg",
        "problem = synthetic_two_level\nseeds = 0..5\nrate.K_values = 10, 20, 40\nrate.slope_min = 5\nrate.slope_max = 6\noutput_path = n\n",
    );
    assert_eq!(code(&riescomp(&["rate", narrow.to_str().unwrap()], &[])), 4);
}

#[test]
fn generated_instance_round_trips_and_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = write_config(d, "g.cfg", "problem = policy_eval\nproblem.grid_side = 4\nproblem.D = 3\nproblem.instance_seed = 12\noutput_path = inst/grid.json\n");
    let o = riescomp(&["gen-instance", gen.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("inst/grid.json")).unwrap();
    let file = InstanceFile::from_json(&text).unwrap();
    assert_eq!((file.num_states, file.seed), (16, 12));
    assert_eq!(InstanceFile::from_json(&file.to_json().unwrap()).unwrap(), file);

    let again = riescomp(&["gen-instance", gen.to_str().unwrap()], &[]);
    assert_eq!(code(&again), 0);
    assert_eq!(std::fs::read_to_string(d.join("inst/grid.json")).unwrap(), text);

    let run = write_config(
        d,
        "r.cfg",
        "problem = policy_eval\nproblem.instance_path = inst/grid.json\nK = 5\noutput_path = out\n",
    );
    let o = riescomp(&["run", run.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_metrics(&d.join("out/rscgd2_seed0.csv")).unwrap().len(), 5);

    let wrong = write_config(d, "w.cfg", "problem = synthetic_two_level\noutput_path = x.json\n");
    assert_eq!(code(&riescomp(&["gen-instance", wrong.to_str().unwrap()], &[])), 2);
}

#[test]
fn budget_gives_equal_inner_call_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "b.cfg",
        "problem = policy_eval\nalgorithm = rscgd2, biased_rsgd\nbudget.inner_calls = 201\nschedule = manual\n\
         schedule.alpha = 0.05\nschedule.beta = 0.1\noutput_path = out\n",
    );
    let o = riescomp(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, finals) = read_csv(&dir.path().join("out/final.csv")).unwrap();
    let inner: Vec<u64> = finals.iter().map(|r| r[6].parse().unwrap()).collect();
    assert_eq!(inner, vec![201, 201]);
    let horizons: Vec<usize> = finals.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(horizons, vec![100, 200]);
}
