//! The per-rank training loop.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::buffer::{BufferError, TrainingBuffer};
use crate::config::ExperimentConfig;
use crate::nn::{AdamState, LrSchedule, Mlp, NnError, Normalizer};
use crate::types::Sample;

use super::allreduce::{AllReducer, Contribution, ReduceError};
use super::metrics::{MetricsRow, MetricsWriter};
use super::validation::ValidationSet;

/// Batches per throughput measurement window.
pub const THROUGHPUT_WINDOW: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub model: Mlp<f32>,
    pub adam: AdamState<f32>,
    /// Samples consumed by all ranks together.
    pub samples_seen: u64,
    pub batches: u64,
}

impl TrainingState {
    pub fn new(model: Mlp<f32>) -> Self {
        let adam = AdamState::for_model(&model);
        TrainingState {
            model,
            adam,
            samples_seen: 0,
            batches: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerSettings {
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub normalizer: Normalizer,
    pub validation_every_batches: u64,
    pub checkpoint_every_batches: u64,
}

impl TrainerSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        TrainerSettings {
            batch_size: cfg.batch_size,
            schedule: LrSchedule::from_config(cfg),
            normalizer: Normalizer::new(cfg.param_range, cfg.steps_per_simulation),
            validation_every_batches: cfg.validation_every_batches,
            checkpoint_every_batches: cfg.checkpoint_every_batches,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub batch: u64,
    /// Global samples seen after this batch.
    pub samples_seen: u64,
    pub local_samples: usize,
    /// Sample-weighted loss over all ranks, before the update.
    pub loss: f64,
    pub lr: f64,
    /// Parameter hash after the update.
    pub param_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputWindow {
    pub end_batch: u64,
    pub wall_time_s: f64,
    pub local_samples: u64,
    pub global_samples: u64,
    /// Window duration with validation and checkpoint time removed.
    pub seconds: f64,
}

impl ThroughputWindow {
    pub fn local_rate(&self) -> f64 {
        self.local_samples as f64 / self.seconds.max(1e-9)
    }

    pub fn global_rate(&self) -> f64 {
        self.global_samples as f64 / self.seconds.max(1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub batch: u64,
    pub samples_seen: u64,
    pub val_mse: f64,
    /// Mean training loss over the batches since the previous validation.
    pub train_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub rank: usize,
    pub batches: Vec<BatchRecord>,
    pub windows: Vec<ThroughputWindow>,
    pub validations: Vec<ValidationRecord>,
}

impl TrainingHistory {
    pub fn final_validation(&self) -> Option<&ValidationRecord> {
        self.validations.last()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.batches.iter().map(|b| b.loss).collect()
    }

    pub fn mean_global_throughput(&self) -> Option<f64> {
        let (s, t) = self.windows.iter().fold((0u64, 0.0f64), |(s, t), w| {
            (s + w.global_samples, t + w.seconds)
        });
        (t > 0.0).then(|| s as f64 / t)
    }
}

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("replicas diverged at batch {batch}: parameter hashes {hashes:x?}")]
    Desync { batch: u64, hashes: Vec<u64> },
    #[error("checkpoint failed: {0}")]
    Checkpoint(String),
    #[error("metrics: {0}")]
    Metrics(#[from] std::io::Error),
    #[error("injected server crash after {0} batches")]
    InjectedCrash(u64),
}

pub type CheckpointHook<'a> = Box<dyn FnMut(&TrainingState) -> Result<(), String> + Send + 'a>;

/// Everything a trainer thread needs besides its state.
pub struct TrainerContext<'a> {
    pub rank: usize,
    pub buffer: &'a TrainingBuffer<Sample>,
    pub reducer: &'a AllReducer,
    pub settings: TrainerSettings,
    /// Rank 0 validates when given a set.
    pub validation: Option<&'a ValidationSet>,
    pub metrics: Option<MetricsWriter>,
    /// Reference point of `wall_time_s`.
    pub epoch: Instant,
    pub checkpoint: Option<CheckpointHook<'a>>,
    pub crash_after_batches: Option<u64>,
}

struct Window {
    started: Instant,
    paused: Duration,
    local: u64,
    global: u64,
}

impl Window {
    fn new() -> Self {
        Window {
            started: Instant::now(),
            paused: Duration::ZERO,
            local: 0,
            global: 0,
        }
    }
}

/// Trains until every rank's buffer is exhausted.
///
/// Each round draws up to `batch_size` samples, averages gradients over the
/// ranks that drew any, and applies one Adam step with the learning rate of
/// the global sample count before the batch. A round in which no rank drew a
/// sample ends training on every rank.
pub fn trainer_loop(
    ctx: &mut TrainerContext<'_>,
    state: &mut TrainingState,
) -> Result<TrainingHistory, TrainerError> {
    let settings = ctx.settings;
    let mut history = TrainingHistory {
        rank: ctx.rank,
        ..Default::default()
    };
    let mut hash = state.model.param_hash();
    let mut window = Window::new();
    let mut row_losses: Vec<f64> = Vec::new();
    let mut val_losses: Vec<f64> = Vec::new();
    let mut last_rate: Option<f64> = None;
    let mut saw_reception_over = false;

    let paused = validate(ctx, state, &mut history, &mut val_losses);
    window.paused += paused;
    if ctx.validation.is_some() && ctx.rank == 0 {
        write_row(
            ctx,
            state,
            None,
            &mut row_losses,
            &history,
            settings.schedule.lr(state.samples_seen),
        )?;
    }

    loop {
        ctx.buffer.begin_batch()?;
        let mut drawn = Vec::with_capacity(settings.batch_size);
        while drawn.len() < settings.batch_size {
            match ctx.buffer.get()? {
                Some(s) => drawn.push(s),
                None => break,
            }
        }
        ctx.buffer.end_batch();

        let contribution = if drawn.is_empty() {
            Contribution {
                grads: None,
                samples: 0,
                weighted_loss: 0.0,
                param_hash: hash,
            }
        } else {
            let batch = settings.normalizer.batch::<f32>(&drawn);
            let (grads, loss) = state.model.backward(&batch)?;
            Contribution {
                grads: Some(grads),
                samples: drawn.len() as u64,
                weighted_loss: loss * drawn.len() as f64,
                param_hash: hash,
            }
        };
        let outcome = ctx.reducer.exchange(ctx.rank, contribution)?;
        if !outcome.replicas_agree() {
            return Err(TrainerError::Desync {
                batch: state.batches,
                hashes: outcome.hashes.clone(),
            });
        }
        let Some(mean) = outcome.mean.as_deref() else {
            break;
        };

        let lr = settings.schedule.lr(state.samples_seen);
        state.adam.step(&mut state.model, mean, lr)?;
        state.samples_seen += outcome.samples;
        state.batches += 1;
        hash = state.model.param_hash();
        history.batches.push(BatchRecord {
            batch: state.batches,
            samples_seen: state.samples_seen,
            local_samples: drawn.len(),
            loss: outcome.loss,
            lr,
            param_hash: hash,
        });
        row_losses.push(outcome.loss);
        val_losses.push(outcome.loss);
        window.local += drawn.len() as u64;
        window.global += outcome.samples;

        if ctx.crash_after_batches == Some(state.batches) {
            return Err(TrainerError::InjectedCrash(state.batches));
        }

        let mut emit = false;
        if state.batches.is_multiple_of(THROUGHPUT_WINDOW) {
            let seconds = (window.started.elapsed().saturating_sub(window.paused)).as_secs_f64();
            let w = ThroughputWindow {
                end_batch: state.batches,
                wall_time_s: ctx.epoch.elapsed().as_secs_f64(),
                local_samples: window.local,
                global_samples: window.global,
                seconds,
            };
            last_rate = Some(w.local_rate());
            history.windows.push(w);
            window = Window::new();
            emit = true;
        }
        if settings.validation_every_batches > 0
            && state
                .batches
                .is_multiple_of(settings.validation_every_batches)
        {
            window.paused += validate(ctx, state, &mut history, &mut val_losses);
            emit = true;
        }
        if ctx.rank == 0 {
            let periodic = settings.checkpoint_every_batches > 0
                && state
                    .batches
                    .is_multiple_of(settings.checkpoint_every_batches);
            let at_reception_over = !saw_reception_over && ctx.buffer.is_reception_over();
            saw_reception_over |= at_reception_over;
            if periodic || at_reception_over {
                if let Some(hook) = ctx.checkpoint.as_mut() {
                    let t0 = Instant::now();
                    hook(state).map_err(TrainerError::Checkpoint)?;
                    window.paused += t0.elapsed();
                }
            }
        }
        if emit {
            write_row(ctx, state, last_rate.take(), &mut row_losses, &history, lr)?;
        }
    }

    let ends_on_validation = history
        .validations
        .last()
        .is_some_and(|v| v.batch == state.batches);
    if !ends_on_validation {
        validate(ctx, state, &mut history, &mut val_losses);
    }
    let lr = settings.schedule.lr(state.samples_seen);
    write_row(ctx, state, None, &mut row_losses, &history, lr)?;
    Ok(history)
}

/// Runs a validation pass on rank 0 with the buffer locked; returns its duration.
fn validate(
    ctx: &TrainerContext<'_>,
    state: &TrainingState,
    history: &mut TrainingHistory,
    val_losses: &mut Vec<f64>,
) -> Duration {
    let (0, Some(set)) = (ctx.rank, ctx.validation) else {
        return Duration::ZERO;
    };
    if set.is_empty() {
        return Duration::ZERO;
    }
    let t0 = Instant::now();
    let mse = ctx.buffer.hold(|| set.mse(&state.model));
    match mse {
        Ok(val_mse) => {
            let train_mse = (!val_losses.is_empty())
                .then(|| val_losses.iter().sum::<f64>() / val_losses.len() as f64);
            val_losses.clear();
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
}

fn write_row(
    ctx: &mut TrainerContext<'_>,
    state: &TrainingState,
    throughput: Option<f64>,
    losses: &mut Vec<f64>,
    history: &TrainingHistory,
    lr: f64,
) -> Result<(), TrainerError> {
    let train_mse = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    losses.clear();
    let Some(writer) = ctx.metrics.as_mut() else {
        return Ok(());
    };
    let stats = ctx.buffer.snapshot_stats();
    let val_mse = history
        .validations
        .last()
        .filter(|v| v.batch == state.batches)
        .map(|v| v.val_mse);
    writer.write(&MetricsRow {
        wall_time_s: ctx.epoch.elapsed().as_secs_f64(),
        batches: state.batches,
        samples_seen: state.samples_seen,
        buffer_population: stats.population,
        seen_count: stats.seen_count,
        unseen_count: stats.unseen_count,
        throughput_samples_per_s: throughput,
        train_mse,
        val_mse,
        lr,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::BufferConfig;
    use crate::config::BufferPolicy;
    use crate::types::SimParams;
    use rand::SeedableRng;
    use std::sync::Arc;
    use std::thread;

    fn scripted(n: usize, width: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                params: SimParams::uniform(100.0 + 4.0 * (i % 100) as f64),
                t: (i % 10) as u32,
                field: Arc::from(vec![150.0 + i as f32; width]),
                client_id: (i / 10) as u32,
                sim_index: (i / 10) as u32,
            })
            .collect()
    }

    fn settings(batch_size: usize) -> TrainerSettings {
        TrainerSettings {
            batch_size,
            schedule: LrSchedule {
                base: 1e-3,
                min: 2.5e-4,
                interval_samples: 10_000,
            },
            normalizer: Normalizer::new([100.0, 500.0], 10),
            validation_every_batches: 0,
            checkpoint_every_batches: 0,
        }
    }

    fn fresh_state(seed: u64) -> TrainingState {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        TrainingState::new(Mlp::init(&[6, 8, 4], &mut rng))
    }

    fn run_single(
        policy: BufferPolicy,
        samples: Vec<Sample>,
        batch: usize,
    ) -> (TrainingHistory, TrainingState) {
        let buffer = TrainingBuffer::new(BufferConfig::new(policy, 64, 0, 7)).unwrap();
        for s in samples {
            buffer.put(s).unwrap();
        }
        buffer.signal_reception_over().unwrap();
        let reducer = AllReducer::new(1, Duration::from_secs(5));
        let mut ctx = TrainerContext {
            rank: 0,
            buffer: &buffer,
            reducer: &reducer,
            settings: settings(batch),
            validation: None,
            metrics: None,
            epoch: Instant::now(),
            checkpoint: None,
            crash_after_batches: None,
        };
        let mut state = fresh_state(1);
        let h = trainer_loop(&mut ctx, &mut state).unwrap();
        (h, state)
    }

    #[test]
    fn thirty_samples_make_three_batches() {
        let (h, state) = run_single(BufferPolicy::Fifo, scripted(30, 4), 10);
        assert_eq!(h.batches.len(), 3);
        assert_eq!(state.batches, 3);
        assert_eq!(state.samples_seen, 30);
        assert_eq!(state.adam.step, 3);
    }

    #[test]
    fn final_partial_batch_is_trained() {
        let (h, state) = run_single(BufferPolicy::Fifo, scripted(25, 4), 10);
        assert_eq!(
            h.batches
                .iter()
                .map(|b| b.local_samples)
                .collect::<Vec<_>>(),
            vec![10, 10, 5]
        );
        assert_eq!(state.samples_seen, 25);
    }

    #[test]
    fn same_stream_same_history() {
        let (a, sa) = run_single(BufferPolicy::Reservoir, scripted(40, 4), 10);
        let (b, sb) = run_single(BufferPolicy::Reservoir, scripted(40, 4), 10);
        assert_eq!(a.losses(), b.losses());
        assert_eq!(sa, sb);
    }

    #[test]
    fn two_ranks_stay_identical() {
        let buffers: Vec<Arc<TrainingBuffer<Sample>>> = (0..2)
            .map(|r| {
                Arc::new(
                    TrainingBuffer::new(BufferConfig::new(BufferPolicy::Firo, 64, 0, r)).unwrap(),
                )
            })
            .collect();
        // rank 1 gets fewer samples and runs dry first
        for (r, b) in buffers.iter().enumerate() {
            for s in scripted(if r == 0 { 35 } else { 12 }, 4) {
                b.put(s).unwrap();
            }
            b.signal_reception_over().unwrap();
        }
        let reducer = Arc::new(AllReducer::new(2, Duration::from_secs(5)));
        let handles: Vec<_> = (0..2)
            .map(|rank| {
                let buffer = Arc::clone(&buffers[rank]);
                let reducer = Arc::clone(&reducer);
                thread::spawn(move || {
                    let mut ctx = TrainerContext {
                        rank,
                        buffer: &buffer,
                        reducer: &reducer,
                        settings: settings(5),
                        validation: None,
                        metrics: None,
                        epoch: Instant::now(),
                        checkpoint: None,
                        crash_after_batches: None,
                    };
                    let mut state = fresh_state(9);
                    let h = trainer_loop(&mut ctx, &mut state).unwrap();
                    (h, state)
                })
            })
            .collect();
        let out: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(out[0].1, out[1].1);
        assert_eq!(out[0].1.samples_seen, 47);
        assert_eq!(out[0].1.batches, 7);
        let hashes =
            |h: &TrainingHistory| h.batches.iter().map(|b| b.param_hash).collect::<Vec<_>>();
        assert_eq!(hashes(&out[0].0), hashes(&out[1].0));
    }

    #[test]
    fn injected_crash_stops_training() {
        let buffer = TrainingBuffer::new(BufferConfig::new(BufferPolicy::Fifo, 64, 0, 7)).unwrap();
        for s in scripted(50, 4) {
            buffer.put(s).unwrap();
        }
        buffer.signal_reception_over().unwrap();
        let reducer = AllReducer::new(1, Duration::from_secs(5));
        let mut checkpoints = Vec::new();
        let mut ctx = TrainerContext {
            rank: 0,
            buffer: &buffer,
            reducer: &reducer,
            settings: TrainerSettings {
                checkpoint_every_batches: 2,
                ..settings(5)
            },
            validation: None,
            metrics: None,
            epoch: Instant::now(),
            checkpoint: Some(Box::new(|s: &TrainingState| {
                checkpoints.push(s.batches);
                Ok(())
            })),
            crash_after_batches: Some(5),
        };
        let mut state = fresh_state(1);
        assert!(matches!(
            trainer_loop(&mut ctx, &mut state),
            Err(TrainerError::InjectedCrash(5))
        ));
        drop(ctx);
        // reception was already over at batch 1
        assert_eq!(checkpoints, vec![1, 2, 4]);
    }
}
