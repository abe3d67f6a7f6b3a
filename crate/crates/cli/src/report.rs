//! Run summaries and post-hoc report files built from metrics CSVs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use surrogate_core::nn::Normalizer;
use surrogate_core::runtime::{read_metrics, MetricsRow};
use surrogate_core::ExperimentConfig;

use crate::CliError;

/// Aggregates of one metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSummary {
    pub rows: usize,
    pub batches: u64,
    pub samples_seen: u64,
    /// Last non-empty `val_mse`.
    pub final_val_mse: Option<f64>,
    pub min_val_mse: Option<f64>,
    /// Last non-empty `train_mse`.
    pub final_train_mse: Option<f64>,
    /// Mean of the non-empty `throughput_samples_per_s` values.
    pub mean_throughput: Option<f64>,
    pub final_population: usize,
    pub final_seen: usize,
    pub final_unseen: usize,
}

impl CsvSummary {
    pub fn from_rows(rows: &[MetricsRow]) -> Option<Self> {
        let last = rows.last()?;
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.val_mse).collect();
        let rates: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.throughput_samples_per_s)
            .collect();
        Some(CsvSummary {
            rows: rows.len(),
            batches: last.batches,
            samples_seen: last.samples_seen,
            final_val_mse: vals.last().copied(),
            min_val_mse: vals.iter().copied().reduce(f64::min),
            final_train_mse: rows.iter().rev().find_map(|r| r.train_mse),
            mean_throughput: (!rates.is_empty())
                .then(|| rates.iter().sum::<f64>() / rates.len() as f64),
            final_population: last.buffer_population,
            final_seen: last.seen_count,
            final_unseen: last.unseen_count,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let rows = read_metrics(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        Self::from_rows(&rows)
            .ok_or_else(|| CliError::Runtime(format!("{}: no metrics rows", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankBuffer {
    pub rank: usize,
    pub population: usize,
    pub seen: usize,
    pub unseen: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobCounts {
    pub completed: BTreeSet<u32>,
    pub restarts: BTreeMap<u32, u32>,
    pub failed: BTreeSet<u32>,
    pub server_restarts: u32,
}

/// Summary of one run.
///
/// Every training number comes from the metrics CSVs written by the run:
/// losses and counters from rank 0, throughput summed over ranks, buffer
/// figures from each rank's last row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `online` or `offline`.
    pub mode: String,
    pub policy: String,
    pub config: ExperimentConfig,
    pub wall_time_s: f64,
    pub batches: u64,
    pub samples_seen: u64,
    pub final_train_mse: Option<f64>,
    pub final_val_mse: Option<f64>,
    pub min_val_mse: Option<f64>,
    pub final_train_mse_kelvin2: Option<f64>,
    pub final_val_mse_kelvin2: Option<f64>,
    pub min_val_mse_kelvin2: Option<f64>,
    pub mean_throughput_samples_per_s: Option<f64>,
    pub buffer: Vec<RankBuffer>,
    pub jobs: JobCounts,
    pub unique_samples: Option<u64>,
    pub failure: Option<String>,
}

impl RunReport {
    /// Builds a report from per-rank summaries, rank 0 first.
    pub fn from_summaries(
        mode: &str,
        cfg: &ExperimentConfig,
        ranks: &[CsvSummary],
        wall_time_s: f64,
    ) -> Self {
        let norm = Normalizer::new(cfg.param_range, cfg.steps_per_simulation);
        let k2 = |v: Option<f64>| v.map(|m| norm.mse_to_kelvin2(m));
        let lead = ranks.first();
        let rates: Vec<f64> = ranks.iter().filter_map(|s| s.mean_throughput).collect();
        RunReport {
            mode: mode.to_string(),
            policy: if mode == "offline" {
                "offline".into()
            } else {
                cfg.buffer_policy.to_string()
            },
            config: cfg.clone(),
            wall_time_s,
            batches: lead.map_or(0, |s| s.batches),
            samples_seen: lead.map_or(0, |s| s.samples_seen),
            final_train_mse: lead.and_then(|s| s.final_train_mse),
            final_val_mse: lead.and_then(|s| s.final_val_mse),
            min_val_mse: lead.and_then(|s| s.min_val_mse),
            final_train_mse_kelvin2: k2(lead.and_then(|s| s.final_train_mse)),
            final_val_mse_kelvin2: k2(lead.and_then(|s| s.final_val_mse)),
            min_val_mse_kelvin2: k2(lead.and_then(|s| s.min_val_mse)),
            mean_throughput_samples_per_s: (!rates.is_empty()).then(|| rates.iter().sum()),
            buffer: ranks
                .iter()
                .enumerate()
                .map(|(rank, s)| RankBuffer {
                    rank,
                    population: s.final_population,
                    seen: s.final_seen,
                    unseen: s.final_unseen,
                })
                .collect(),
            jobs: JobCounts::default(),
            unique_samples: None,
            failure: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), CliError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

/// One CSV given to [`cmd_report`], as `label=path` or a bare path.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportInput {
    pub label: String,
    pub path: PathBuf,
}

impl ReportInput {
    pub fn parse(arg: &str) -> Self {
        match arg.split_once('=') {
            Some((label, path)) if !label.is_empty() => ReportInput {
                label: label.into(),
                path: path.into(),
            },
            _ => {
                let path = PathBuf::from(arg);
                ReportInput {
                    label: default_label(&path),
                    path,
                }
            }
        }
    }
}

/// `out/reservoir/metrics_rank0.csv` is labelled `reservoir`; other ranks get
/// a `_rank{r}` suffix. Any other file is labelled by its stem.
fn default_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned());
    match (stem.strip_prefix("metrics_rank"), parent) {
        (Some("0"), Some(dir)) => dir,
        (Some(r), Some(dir)) => format!("{dir}_rank{r}"),
        _ => stem,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub series: Vec<PathBuf>,
    pub table: PathBuf,
    pub script: PathBuf,
}

/// Writes three gnuplot-ready series per input (throughput and buffer
/// population against wall time, losses against samples seen), one
/// comparison table with a row per input, and a plotting script.
///
/// All inputs are parsed before anything is written.
pub fn cmd_report(inputs: &[ReportInput], out_dir: &Path) -> Result<ReportFiles, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage(
            "report needs at least one metrics CSV".into(),
        ));
    }
    let mut labels = BTreeSet::new();
    let mut parsed = Vec::with_capacity(inputs.len());
    for input in inputs {
        if !labels.insert(input.label.clone()) {
            return Err(CliError::Usage(format!(
                "duplicate report label `{}`",
                input.label
            )));
        }
        let rows = read_metrics(&input.path).map_err(|e| CliError::Runtime(e.to_string()))?;
        let summary = CsvSummary::from_rows(&rows).ok_or_else(|| {
            CliError::Runtime(format!("{}: no metrics rows", input.path.display()))
        })?;
        parsed.push((input, rows, summary));
    }

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut series = Vec::new();
    let mut table = String::from(
        "| run | batches | samples seen | min val MSE | final val MSE | final train MSE | mean throughput (samples/s) |\n\
         |---|---|---|---|---|---|---|\n",
    );
    let mut script =
        String::from("set datafile missing 'NaN'\nset terminal pngcairo size 900,600\n");
    for (input, rows, s) in &parsed {
        let label = &input.label;
        let mut throughput = String::from("# wall_time_s throughput_samples_per_s\n");
        let mut population = String::from("# wall_time_s population seen unseen\n");
        let mut losses = String::from("# samples_seen train_mse val_mse\n");
        for r in rows {
            if let Some(t) = r.throughput_samples_per_s {
                let _ = writeln!(throughput, "{} {}", r.wall_time_s, t);
            }
            let _ = writeln!(
                population,
                "{} {} {} {}",
                r.wall_time_s, r.buffer_population, r.seen_count, r.unseen_count
            );
            let _ = writeln!(
                losses,
                "{} {} {}",
                r.samples_seen,
                opt(r.train_mse),
                opt(r.val_mse)
            );
        }
        for (kind, body) in [
            ("throughput", throughput),
            ("population", population),
            ("loss", losses),
        ] {
            let path = out_dir.join(format!("{label}_{kind}.dat"));
            fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
            series.push(path);
        }
        let _ = writeln!(
            table,
            "| {label} | {} | {} | {} | {} | {} | {} |",
            s.batches,
            s.samples_seen,
            opt(s.min_val_mse),
            opt(s.final_val_mse),
            opt(s.final_train_mse),
            opt(s.mean_throughput)
        );
        let _ = write!(
            script,
            "set output '{label}_throughput.png'\nset xlabel 'wall time (s)'\nset ylabel 'samples/s'\n\
             plot '{label}_throughput.dat' using 1:2 with linespoints title '{label}'\n\
             set output '{label}_population.png'\nset ylabel 'samples'\n\
             plot '{label}_population.dat' using 1:2 with lines title 'population', \
             '' using 1:3 with lines title 'seen', '' using 1:4 with lines title 'unseen'\n\
             set output '{label}_loss.png'\nset xlabel 'samples seen'\nset ylabel 'MSE'\nset logscale y\n\
             plot '{label}_loss.dat' using 1:2 with lines title 'train', '' using 1:3 with linespoints title 'validation'\n\
             unset logscale y\n"
        );
    }
    let table_path = out_dir.join("table.md");
    fs::write(&table_path, table).map_err(|e| CliError::io(&table_path, e))?;
    let script_path = out_dir.join("plots.gp");
    fs::write(&script_path, script).map_err(|e| CliError::io(&script_path, e))?;
    Ok(ReportFiles {
        series,
        table: table_path,
        script: script_path,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| x.to_string())
}
