//! Offline baseline: datasets written to disk and multi-epoch training on them.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use surrogate_core::nn::{Mlp, Normalizer};
use surrogate_core::runtime::{
    experiment_design, BatchRecord, MetricsRow, MetricsWriter, ThroughputWindow, TrainingHistory,
    TrainingState, ValidationRecord, ValidationSet, THROUGHPUT_WINDOW,
};
use surrogate_core::seed::{rng_for, SeedRole};
use surrogate_core::solver::{
    read_offline_file, run_simulation, OfflineHeader, OfflineWriter, SimulationError,
    SimulationTag, SolverOptions,
};
use surrogate_core::{ExperimentConfig, Sample, SimParams};

use crate::CliError;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sim_index: u32,
    pub file: String,
    pub t_ic: f64,
    pub t_x1: f64,
    pub t_y1: f64,
    pub t_x2: f64,
    pub t_y2: f64,
}

impl ManifestRow {
    pub fn params(&self) -> SimParams {
        SimParams {
            t_ic: self.t_ic,
            t_x1: self.t_x1,
            t_y1: self.t_y1,
            t_x2: self.t_x2,
            t_y2: self.t_y2,
        }
    }
}

pub fn sim_file_name(sim: u32) -> String {
    format!("sim_{sim:05}.bin")
}

/// Solves every simulation of the experiment design and writes one file per
/// simulation plus `manifest.csv`.
pub fn generate_offline(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<ManifestRow>, CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let design = experiment_design(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let grid = cfg.grid();
    let opts = SolverOptions {
        tol: cfg.solver_tol,
        max_iter: cfg.solver_max_iter(),
    };
    let header = OfflineHeader {
        nx: cfg.nx as u32,
        ny: cfg.ny as u32,
        steps: cfg.steps_per_simulation as u32,
    };
    let rows: Vec<ManifestRow> = (0..design.n_rows() as u32)
        .map(|i| {
            let p = design.params(i as usize);
            ManifestRow {
                sim_index: i,
                file: sim_file_name(i),
                t_ic: p.t_ic,
                t_x1: p.t_x1,
                t_y1: p.t_y1,
                t_x2: p.t_x2,
                t_y2: p.t_y2,
            }
        })
        .collect();

    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(rows.len().max(1));
    let write_one = |row: &ManifestRow| -> Result<(), CliError> {
        let path = out_dir.join(&row.file);
        let mut writer =
            OfflineWriter::create(&path, header).map_err(|e| CliError::io(&path, e))?;
        let tag = SimulationTag {
            client_id: row.sim_index,
            sim_index: row.sim_index,
        };
        run_simulation(
            &row.params(),
            &grid,
            cfg.steps_per_simulation,
            opts,
            tag,
            |s| writer.write_step(&s.field),
        )
        .map_err(|e| match e {
            SimulationError::Solver(e) => {
                CliError::Runtime(format!("simulation {}: {e}", row.sim_index))
            }
            SimulationError::Sink { source, .. } => CliError::io(&path, source),
        })?;
        writer.finish().map_err(|e| CliError::io(&path, e))
    };
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let rows = &rows;
                let write_one = &write_one;
                scope.spawn(move || rows.iter().skip(w).step_by(workers).try_for_each(write_one))
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("writer thread panicked"))
    })?;

    let manifest = out_dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in &rows {
        w.serialize(row)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(&manifest, e))?;
    Ok(rows)
}

/// Reads a dataset written by [`generate_offline`], checking it against the
/// grid and step count of `cfg`.
pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<Sample>, CliError> {
    let manifest = dir.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", manifest.display())))?;
    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row =
            row.map_err(|e| CliError::Usage(format!("{} row {}: {e}", manifest.display(), i + 1)))?;
        let path = dir.join(&row.file);
        let (header, steps) = read_offline_file(&path).map_err(|e| CliError::io(&path, e))?;
        if (
            header.nx as usize,
            header.ny as usize,
            header.steps as usize,
        ) != (cfg.nx, cfg.ny, cfg.steps_per_simulation)
        {
            return Err(CliError::Usage(format!(
                "{}: dataset is {}x{} with {} steps, config expects {}x{} with {}",
                path.display(),
                header.nx,
                header.ny,
                header.steps,
                cfg.nx,
                cfg.ny,
                cfg.steps_per_simulation
            )));
        }
        let params = row.params();
        samples.extend(steps.into_iter().enumerate().map(|(t, field)| Sample {
            params,
            t: t as u32,
            field: Arc::from(field),
            client_id: row.sim_index,
            sim_index: row.sim_index,
        }));
    }
    Ok(samples)
}

#[derive(Debug, Clone, Default)]
pub struct OfflinePlan {
    pub epochs: u64,
    /// Stops after this many batches even mid-epoch.
    pub max_batches: Option<u64>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub state: TrainingState,
    pub history: TrainingHistory,
    pub wall_time_s: f64,
}

/// Epoch-based training on a fixed sample set.
///
/// Every epoch visits each sample once in an order shuffled from the
/// offline-shuffle seed stream of that epoch. The model, optimiser, learning
/// rate schedule, validation cadence and metrics rows match online training.
pub fn train_offline(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    validation: Option<&ValidationSet>,
    plan: &OfflinePlan,
) -> Result<OfflineOutcome, CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let started = Instant::now();
    let norm = Normalizer::new(cfg.param_range, cfg.steps_per_simulation);
    let schedule = surrogate_core::nn::LrSchedule::from_config(cfg);
    let mut init_rng = rng_for(cfg.master_seed, SeedRole::ModelInit, 0);
    let mut state = TrainingState::new(Mlp::init(&cfg.layer_widths(), &mut init_rng));
    let mut history = TrainingHistory::default();
    let mut metrics = match &plan.metrics {
        Some(p) => Some(MetricsWriter::append(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let mut tracker = Tracker {
        drawn: HashSet::new(),
        n: samples.len(),
        row_losses: Vec::new(),
        val_losses: Vec::new(),
    };

    let validate =
        |state: &TrainingState, history: &mut TrainingHistory, tracker: &mut Tracker| -> Duration {
            let Some(set) = validation.filter(|v| !v.is_empty()) else {
                return Duration::ZERO;
            };
            let t0 = Instant::now();
            match set.mse(&state.model) {
                Ok(val_mse) => {
                    let train_mse = mean(&tracker.val_losses);
                    tracker.val_losses.clear();
                    history.validations.push(ValidationRecord {
                        batch: state.batches,
                        samples_seen: state.samples_seen,
                        val_mse,
                        train_mse,
                    });
                }
                Err(e) => log::warn!("validation at batch {} failed: {e}", state.batches),
            }
            t0.elapsed()
        };

    validate(&state, &mut history, &mut tracker);
    if validation.is_some() {
        tracker.write(
            &mut metrics,
            started,
            &state,
            None,
            &history,
            schedule.lr(state.samples_seen),
        )?;
    }

    let mut window_start = Instant::now();
    let mut paused = Duration::ZERO;
    let mut window_samples = 0u64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let budget = plan.max_batches.unwrap_or(u64::MAX);
    'epochs: for epoch in 0..plan.epochs {
        let mut rng = rng_for(cfg.master_seed, SeedRole::OfflineShuffle, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if state.batches >= budget {
                break 'epochs;
            }
            let drawn: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            tracker.drawn.extend(chunk.iter().copied());
            let batch = norm.batch::<f32>(&drawn);
            let (grads, loss) = state
                .model
                .backward(&batch)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let lr = schedule.lr(state.samples_seen);
            state
                .adam
                .step(&mut state.model, &grads, lr)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            state.samples_seen += drawn.len() as u64;
            state.batches += 1;
            history.batches.push(BatchRecord {
                batch: state.batches,
                samples_seen: state.samples_seen,
                local_samples: drawn.len(),
                loss,
                lr,
                param_hash: state.model.param_hash(),
            });
            tracker.row_losses.push(loss);
            tracker.val_losses.push(loss);
            window_samples += drawn.len() as u64;

            let mut emit = false;
            let mut rate = None;
            if state.batches.is_multiple_of(THROUGHPUT_WINDOW) {
                let w = ThroughputWindow {
                    end_batch: state.batches,
                    wall_time_s: started.elapsed().as_secs_f64(),
                    local_samples: window_samples,
                    global_samples: window_samples,
                    seconds: window_start.elapsed().saturating_sub(paused).as_secs_f64(),
                };
                rate = Some(w.local_rate());
                history.windows.push(w);
                window_start = Instant::now();
                paused = Duration::ZERO;
                window_samples = 0;
                emit = true;
            }
            if cfg.validation_every_batches > 0
                && state.batches.is_multiple_of(cfg.validation_every_batches)
            {
                paused += validate(&state, &mut history, &mut tracker);
                emit = true;
            }
            if emit {
                tracker.write(&mut metrics, started, &state, rate, &history, lr)?;
            }
        }
    }

    if state.batches > 0
        && !history
            .validations
            .last()
            .is_some_and(|v| v.batch == state.batches)
    {
        validate(&state, &mut history, &mut tracker);
        tracker.write(
            &mut metrics,
            started,
            &state,
            None,
            &history,
            schedule.lr(state.samples_seen),
        )?;
    }
    Ok(OfflineOutcome {
        state,
        history,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

struct Tracker {
    drawn: HashSet<usize>,
    n: usize,
    row_losses: Vec<f64>,
    val_losses: Vec<f64>,
}

impl Tracker {
    fn write(
        &mut self,
        metrics: &mut Option<MetricsWriter>,
        started: Instant,
        state: &TrainingState,
        throughput: Option<f64>,
        history: &TrainingHistory,
        lr: f64,
    ) -> Result<(), CliError> {
        let train_mse = mean(&self.row_losses);
        self.row_losses.clear();
        let Some(w) = metrics.as_mut() else {
            return Ok(());
        };
        let val_mse = history
            .validations
            .last()
            .filter(|v| v.batch == state.batches)
            .map(|v| v.val_mse);
        w.write(&MetricsRow {
            wall_time_s: started.elapsed().as_secs_f64(),
            batches: state.batches,
            samples_seen: state.samples_seen,
            buffer_population: self.n,
            seen_count: self.drawn.len(),
            unseen_count: self.n - self.drawn.len(),
            throughput_samples_per_s: throughput,
            train_mse,
            val_mse,
            lr,
        })
        .map_err(|e| CliError::Runtime(format!("metrics: {e}")))
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
