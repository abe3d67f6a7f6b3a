use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use surrogate_cli::{
    cmd_report, cmd_run, generate_offline, load_config, load_dataset, train_offline, CliError,
    ClientMode, OfflinePlan, ReportInput, RunOptions, RunReport,
};
use surrogate_core::runtime::{metrics_path, ValidationSet};

#[derive(Parser)]
#[command(
    name = "surrogate",
    version,
    about = "Online training of heat-equation surrogates"
)]
struct Cli {
    /// Experiment configuration (TOML); defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// `key=value` configuration override; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an online experiment.
    Run {
        #[arg(long, value_enum, default_value_t = ClientMode::Process)]
        clients: ClientMode,
        /// Path of the heat-client binary.
        #[arg(long)]
        client_bin: Option<PathBuf>,
    },
    /// Solve every simulation of the design and write it to disk.
    GenerateOffline,
    /// Train for a number of epochs on a dataset written by generate-offline.
    TrainOffline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: u64,
        /// Stop after this many batches.
        #[arg(long)]
        max_batches: Option<u64>,
    },
    /// Series files, a comparison table and a gnuplot script from metrics CSVs.
    Report {
        /// `label=path` or a path; the label defaults to the run directory name.
        #[arg(required = true)]
        csvs: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let config = || load_config(cli.config.as_deref(), cli.seed, &cli.overrides);
    match &cli.command {
        Command::Run {
            clients,
            client_bin,
        } => {
            let cfg = config()?;
            let opts = RunOptions {
                out_dir: cli.out_dir.clone(),
                clients: *clients,
                client_program: client_bin.clone(),
                faults: Default::default(),
            };
            let out = cmd_run(&cfg, &opts)?;
            print_summary(&out.report);
        }
        Command::GenerateOffline => {
            let cfg = config()?;
            let rows = generate_offline(&cfg, &cli.out_dir)?;
            println!(
                "wrote {} simulations to {}",
                rows.len(),
                cli.out_dir.display()
            );
        }
        Command::TrainOffline {
            dataset,
            epochs,
            max_batches,
        } => {
            let cfg = config()?;
            let samples = load_dataset(&cfg, dataset)?;
            std::fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::io(&cli.out_dir, e))?;
            let metrics = metrics_path(&cli.out_dir, 0);
            if metrics.exists() {
                std::fs::remove_file(&metrics).map_err(|e| CliError::io(&metrics, e))?;
            }
            let validation =
                ValidationSet::generate(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
            let plan = OfflinePlan {
                epochs: *epochs,
                max_batches: *max_batches,
                metrics: Some(metrics.clone()),
            };
            let out = train_offline(&cfg, &samples, Some(&validation), &plan)?;
            let summary = surrogate_cli::CsvSummary::read(&metrics)?;
            let report = RunReport::from_summaries("offline", &cfg, &[summary], out.wall_time_s);
            report.write_json(&cli.out_dir.join(surrogate_cli::run::REPORT_FILE))?;
            print_summary(&report);
        }
        Command::Report { csvs } => {
            let inputs: Vec<ReportInput> = csvs.iter().map(|a| ReportInput::parse(a)).collect();
            let files = cmd_report(&inputs, &cli.out_dir)?;
            println!(
                "wrote {} series, {} and {}",
                files.series.len(),
                files.table.display(),
                files.script.display()
            );
        }
    }
    Ok(())
}

fn print_summary(r: &RunReport) {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6e}"));
    let label = if r.mode == r.policy {
        r.mode.clone()
    } else {
        format!("{} {}", r.mode, r.policy)
    };
    println!(
        "{}: {} batches, {} samples, val MSE {} ({} K^2), train MSE {}, throughput {} samples/s, {:.1} s",
        label,
        r.batches,
        r.samples_seen,
        f(r.final_val_mse),
        f(r.final_val_mse_kelvin2),
        f(r.final_train_mse),
        f(r.mean_throughput_samples_per_s),
        r.wall_time_s
    );
}
