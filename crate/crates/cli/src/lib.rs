//! Front end for online surrogate training experiments: run an experiment,
//! write and train on an offline dataset, and turn metrics CSVs into plots
//! and tables.

pub mod client_args;
pub mod offline;
pub mod report;
pub mod run;

use std::path::Path;

use thiserror::Error;

use surrogate_core::ExperimentConfig;

pub use client_args::{ClientArgs, ProcessSpawner};
pub use offline::{
    generate_offline, load_dataset, train_offline, ManifestRow, OfflineOutcome, OfflinePlan,
};
pub use report::{cmd_report, CsvSummary, ReportFiles, ReportInput, RunReport};
pub use run::{cmd_run, ClientMode, RunOptions, RunOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration; nothing was run.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Reads the configuration (defaults when no file is given), then applies
/// `--seed` and the `key=value` overrides in order, then validates.
pub fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<ExperimentConfig, CliError> {
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("master_seed={s}"));
    }
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    ExperimentConfig::parse_with_overrides(&text, &all).map_err(|e| CliError::Usage(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_flag_wins_over_overrides() {
        let cfg = load_config(None, Some(9), &["master_seed=3".into(), "nx=12".into()]).unwrap();
        assert_eq!((cfg.master_seed, cfg.nx), (9, 12));
    }

    #[test]
    fn threshold_at_capacity_is_a_usage_error() {
        let err = load_config(
            None,
            None,
            &["buffer_capacity=10".into(), "buffer_threshold=10".into()],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn echoed_config_parses_back() {
        let cfg = load_config(
            None,
            Some(4),
            &[
                "buffer_policy=\"fifo\"".into(),
                "hidden_layers=[16, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
