//! One heat-equation simulation, streamed to the training server or written
//! to an offline file.

use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use clap::Parser;

use surrogate_cli::offline::sim_file_name;
use surrogate_cli::ClientArgs;
use surrogate_core::runtime::client_stream;
use surrogate_core::solver::{run_simulation, OfflineHeader, OfflineWriter, SimulationTag};

#[derive(Parser)]
#[command(
    name = "heat-client",
    version,
    about = "Heat-equation simulation client"
)]
struct Cli {
    #[command(flatten)]
    args: ClientArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse().args;
    let spec = match args.to_spec() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("heat-client: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        log::debug!("client {} of experiment seed {seed}", spec.client_id);
    }
    let result = match &args.offline_dir {
        Some(dir) => {
            let path = dir.join(sim_file_name(spec.sim_index));
            let header = OfflineHeader {
                nx: spec.grid.nx as u32,
                ny: spec.grid.ny as u32,
                steps: spec.steps as u32,
            };
            OfflineWriter::create(&path, header)
                .map_err(|e| e.to_string())
                .and_then(|mut w| {
                    let tag = SimulationTag {
                        client_id: spec.client_id,
                        sim_index: spec.sim_index,
                    };
                    run_simulation(
                        &spec.params,
                        &spec.grid,
                        spec.steps,
                        spec.solver,
                        tag,
                        |s| w.write_step(&s.field),
                    )
                    .map_err(|e| e.to_string())?;
                    w.finish().map_err(|e| e.to_string())
                })
        }
        None if spec.endpoints.is_empty() => {
            Err("either --endpoints or --offline-dir is required".to_string())
        }
        None => client_stream(&spec, &AtomicBool::new(false))
            .map(|_| ())
            .map_err(|e| e.to_string()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("heat-client {}: {e}", spec.client_id);
            ExitCode::FAILURE
        }
    }
}
