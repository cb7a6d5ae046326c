//! CSV files written by the harness.
//!
//! Floats use `{:.16e}` (17 significant digits), which re-parses to the
//! identical `f64`.

use std::path::Path;

use riescomp::solver::IterationRecord;

use crate::error::{CliError, CliResult};

pub const METRICS_HEADER: [&str; 10] = [
    "run_id",
    "seed",
    "k",
    "grad_norm_sq",
    "grad_is_estimate",
    "objective",
    "tracking_err_sq",
    "lyapunov_partial",
    "oracle_calls_cum",
    "wall_time_s",
];

pub const SUMMARY_HEADER: [&str; 8] = [
    "algorithm",
    "k",
    "n_seeds",
    "grad_norm_sq",
    "objective",
    "tracking_err_sq",
    "lyapunov_partial",
    "oracle_calls_cum",
];

pub const FINAL_HEADER: [&str; 7] =
    ["run_id", "algorithm", "seed", "K", "final_objective", "oracle_calls", "inner_calls"];

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One per-iteration line of a run file. A run that aborts ends with a row
/// whose numeric fields are all NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub k: usize,
    pub grad_norm_sq: f64,
    pub grad_is_estimate: bool,
    pub objective: f64,
    pub tracking_err_sq: f64,
    pub lyapunov_partial: f64,
    pub oracle_calls_cum: u64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn from_record(run_id: &str, seed: u64, r: &IterationRecord, wall_time_s: f64) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            k: r.k,
            grad_norm_sq: r.grad_norm_sq,
            grad_is_estimate: r.grad_is_estimate,
            objective: r.objective,
            tracking_err_sq: r.tracking_err_sq,
            lyapunov_partial: r.lyapunov_partial,
            oracle_calls_cum: r.oracle_calls_cum,
            wall_time_s,
        }
    }

    pub fn aborted(run_id: &str, seed: u64, k: usize, oracle_calls_cum: u64) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            k,
            grad_norm_sq: f64::NAN,
            grad_is_estimate: false,
            objective: f64::NAN,
            tracking_err_sq: f64::NAN,
            lyapunov_partial: f64::NAN,
            oracle_calls_cum,
            wall_time_s: f64::NAN,
        }
    }

    pub fn is_aborted(&self) -> bool {
        self.objective.is_nan() && self.grad_norm_sq.is_nan()
    }

    pub fn to_fields(&self) -> Vec<String> {
        vec![
            self.run_id.clone(),
            self.seed.to_string(),
            self.k.to_string(),
            fmt_f64(self.grad_norm_sq),
            self.grad_is_estimate.to_string(),
            fmt_f64(self.objective),
            fmt_f64(self.tracking_err_sq),
            fmt_f64(self.lyapunov_partial),
            self.oracle_calls_cum.to_string(),
            fmt_f64(self.wall_time_s),
        ]
    }

    pub fn from_fields(fields: &csv::StringRecord) -> Result<Self, String> {
        if fields.len() != METRICS_HEADER.len() {
            return Err(format!("expected {} fields, got {}", METRICS_HEADER.len(), fields.len()));
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("cannot parse `{s}`"))
        }
        Ok(Self {
            run_id: fields[0].to_string(),
            seed: num(&fields[1])?,
            k: num(&fields[2])?,
            grad_norm_sq: num(&fields[3])?,
            grad_is_estimate: num(&fields[4])?,
            objective: num(&fields[5])?,
            tracking_err_sq: num(&fields[6])?,
            lyapunov_partial: num(&fields[7])?,
            oracle_calls_cum: num(&fields[8])?,
            wall_time_s: num(&fields[9])?,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

/// Writes `header` followed by `rows`, creating parent directories.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a CSV file into its header and string records.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(|e| csv_err(path, e))?;
    Ok((header, rows))
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let (header, rows) = read_csv(path)?;
    if header != METRICS_HEADER {
        return Err(CliError::io(path, std::io::Error::other(format!("unexpected header {header:?}"))));
    }
    rows.iter().map(|r| MetricsRow::from_fields(r).map_err(|m| CliError::io(path, std::io::Error::other(m)))).collect()
}
