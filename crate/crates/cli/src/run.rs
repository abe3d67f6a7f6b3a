//! The `run` command: one online experiment end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use surrogate_core::runtime::{
    client_template, launcher_run, metrics_path, FaultPlan, LaunchError, LaunchOptions,
    LaunchReport, ThreadSpawner, ValidationSet,
};
use surrogate_core::ExperimentConfig;

use crate::client_args::ProcessSpawner;
use crate::report::{CsvSummary, JobCounts, RunReport};
use crate::CliError;

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ClientMode {
    /// One `heat-client` process per simulation.
    #[default]
    Process,
    /// Clients as threads of this process.
    Thread,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub clients: ClientMode,
    /// Path of `heat-client`; found next to the executable when unset.
    pub client_program: Option<PathBuf>,
    pub faults: FaultPlan,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub launch: LaunchReport,
}

/// Runs the experiment and writes `config.toml`, per-rank metrics CSVs,
/// `server.ckpt` and `report.json` into `opts.out_dir`.
///
/// A configuration error is returned before anything is started or written.
/// When the server or any simulation fails past its restart budget the
/// report is still written, with `failure` set, and a runtime error is
/// returned.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let started = Instant::now();
    let out = &opts.out_dir;
    prepare_out_dir(out, cfg.n_ranks)?;
    let echo = out.join(CONFIG_ECHO);
    fs::write(&echo, cfg.to_toml()).map_err(|e| CliError::io(&echo, e))?;

    log::info!(
        "solving {} validation simulations",
        cfg.validation_simulations
    );
    let validation = ValidationSet::generate(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let launch_opts = LaunchOptions {
        out_dir: Some(out.clone()),
        validation: Some(Arc::new(validation)),
        faults: opts.faults.clone(),
    };
    let result = match opts.clients {
        ClientMode::Thread => launcher_run(cfg, &ThreadSpawner::new(cfg), launch_opts),
        ClientMode::Process => {
            let program = match &opts.client_program {
                Some(p) => p.clone(),
                None => ProcessSpawner::sibling_program()
                    .map_err(|e| CliError::Runtime(e.to_string()))?,
            };
            let mut template = client_template(cfg);
            template.checkpoint_dir = Some(out.join("clients"));
            launcher_run(
                cfg,
                &ProcessSpawner::new(&program, template, cfg.master_seed),
                launch_opts,
            )
        }
    };

    let summaries = read_summaries(out, cfg.n_ranks);
    let mut report =
        RunReport::from_summaries("online", cfg, &summaries, started.elapsed().as_secs_f64());
    let report_path = out.join(REPORT_FILE);
    match result {
        Ok(launch) => {
            report.jobs = JobCounts {
                completed: launch.completed.clone(),
                restarts: launch.restarts.clone(),
                failed: launch.failed.clone(),
                server_restarts: launch.server_restarts,
            };
            report.unique_samples = Some(launch.outcome.unique_samples as u64);
            if !launch.failed.is_empty() {
                let msg = format!(
                    "simulations {:?} failed beyond their restart budget",
                    launch.failed
                );
                report.failure = Some(msg.clone());
                report.write_json(&report_path)?;
                return Err(CliError::Runtime(msg));
            }
            report.write_json(&report_path)?;
            Ok(RunOutcome { report, launch })
        }
        Err(e) => {
            report.failure = Some(e.to_string());
            report.write_json(&report_path)?;
            Err(match e {
                LaunchError::Config(m) => CliError::Usage(m),
                other => CliError::Runtime(other.to_string()),
            })
        }
    }
}

/// Removes outputs of an earlier run so that metrics are not appended to them
/// and clients do not resume from stale state.
fn prepare_out_dir(out: &Path, n_ranks: usize) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let entries = fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let stale = name == "server.ckpt"
            || name == REPORT_FILE
            || (name.starts_with("metrics_rank") && name.ends_with(".csv"));
        if stale {
            fs::remove_file(entry.path()).map_err(|e| CliError::io(&entry.path(), e))?;
        }
    }
    let clients = out.join("clients");
    if clients.exists() {
        fs::remove_dir_all(&clients).map_err(|e| CliError::io(&clients, e))?;
    }
    debug_assert!((0..n_ranks).all(|r| !metrics_path(out, r).exists()));
    Ok(())
}

fn read_summaries(out: &Path, n_ranks: usize) -> Vec<CsvSummary> {
    (0..n_ranks)
        .map_while(|r| match CsvSummary::read(&metrics_path(out, r)) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("rank {r}: {e}");
                None
            }
        })
        .collect()
}
