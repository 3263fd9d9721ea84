//! The `run` verb: execute an experiment and write its artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use feo2_core::simulate::{run_round, sample_cohort, Environment, ExperimentConfig, RoundReport};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{to_file_config, FileConfig};
use crate::CliError;

pub const CSV_HEADER: &str =
    "round,S,N_p_t,N_np_t,acc_g,acc_g_p,acc_g_np,acc_l_p,acc_l_np,delta_g,delta_l,epsilon";

/// Marker written as the last CSV row when a run aborts.
pub const FAILURE_MARKER: &str = "failed";

fn cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// One CSV line for a report, without the newline.
pub fn csv_row(r: &RoundReport) -> String {
    [
        r.round.to_string(),
        fmt_f64(r.clip_norm),
        r.n_private.to_string(),
        r.n_nonprivate.to_string(),
        cell(r.acc_g),
        cell(r.acc_g_p),
        cell(r.acc_g_np),
        cell(r.acc_l_p),
        cell(r.acc_l_np),
        cell(r.delta_g),
        cell(r.delta_l),
        fmt_f64(r.epsilon),
    ]
    .join(",")
}

/// Content hash of the resolved config in the style of a git blob id:
/// SHA-256 over `blob <len>\0` followed by the canonical JSON encoding.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let body = serde_json::to_string(&to_file_config(cfg)).expect("config is serializable");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub config: FileConfig,
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: &'static str,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub status: &'static str,
    pub error: Option<String>,
    pub algorithm: feo2_core::simulate::Algorithm,
    pub rounds_requested: usize,
    pub rounds_completed: usize,
    /// `None` when the privacy loss is unbounded.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub final_round: Option<RoundReport>,
}

/// What a run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub error: Option<feo2_core::Error>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Run the experiment on `workers` threads, streaming `rounds.csv` and then
/// writing `summary.json` and `manifest.json` into `out`.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    config_path: Option<&Path>,
    out: &Path,
    workers: usize,
) -> Result<RunOutcome, CliError> {
    let started = unix_now();
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let csv_path = out.join("rounds.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?);
    writeln!(csv, "{CSV_HEADER}").map_err(|e| io_err(&csv_path, e))?;

    let pool = rayon_pool(workers)?;
    let (env, mut state) = Environment::new(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut error = None;
    while state.round < cfg.rounds {
        let cohort = sample_cohort(cfg, state.round);
        match pool.install(|| run_round(&mut state, &env, &cohort)) {
            Ok(report) => {
                writeln!(csv, "{}", csv_row(&report)).map_err(|e| io_err(&csv_path, e))?;
                reports.push(report);
            }
            Err(e) => {
                let blanks = ",".repeat(CSV_HEADER.matches(',').count());
                writeln!(csv, "{FAILURE_MARKER}{blanks}").map_err(|e| io_err(&csv_path, e))?;
                error = Some(e);
                break;
            }
        }
    }
    csv.flush().map_err(|e| io_err(&csv_path, e))?;

    let epsilon = state.epsilon(cfg.feo2.privacy.delta).ok().filter(|e| e.is_finite());
    let summary = RunSummary {
        status: if error.is_none() { "ok" } else { "failed" },
        error: error.as_ref().map(|e| e.to_string()),
        algorithm: cfg.algorithm,
        rounds_requested: cfg.rounds,
        rounds_completed: reports.len(),
        epsilon,
        delta: cfg.feo2.privacy.delta,
        final_round: reports.last().cloned(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    let manifest = RunManifest {
        config_path: config_path.map(Path::to_path_buf),
        config: to_file_config(cfg),
        config_hash: config_hash(cfg),
        output_dir: out.to_path_buf(),
        workers,
        started_unix: started,
        finished_unix: unix_now(),
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunOutcome { reports, error })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn rayon_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Io(e.to_string()))
}
