//! The multi-rank training server.
//!
//! Every rank listens on its own local TCP port. One reader thread per
//! connection decodes frames and forwards them to the rank's aggregator, the
//! sole producer of the rank's buffer; the rank's trainer thread is the sole
//! consumer. Trainers meet at the all-reduce barrier once per batch.

use std::collections::{BTreeSet, HashMap};
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::buffer::{BufferConfig, BufferError, BufferStats, TrainingBuffer};
use crate::config::ExperimentConfig;
use crate::design::DesignMatrix;
use crate::nn::Mlp;
use crate::seed::{derive_seed, rng_for, SeedRole};
use crate::types::Sample;

use super::allreduce::AllReducer;
use super::checkpoint::{save_checkpoint, RankCheckpoint, ServerCheckpoint};
use super::metrics::{metrics_path, MetricsWriter};
use super::protocol::{read_message, MessageType, ProtocolError, TimeStepMessage};
use super::reception::ReceptionLog;
use super::trainer::{
    trainer_loop, TrainerContext, TrainerError, TrainerSettings, TrainingHistory, TrainingState,
};
use super::validation::ValidationSet;

const POLL: Duration = Duration::from_millis(5);

#[derive(Default)]
pub struct ServerOptions {
    pub restore: Option<ServerCheckpoint>,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_dir: Option<PathBuf>,
    pub validation: Option<Arc<ValidationSet>>,
    /// Test hook: rank 0 fails after this many batches.
    pub crash_after_batches: Option<u64>,
    /// Reference point of metrics timestamps; defaults to server start.
    pub epoch: Option<Instant>,
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("server failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint for {found} ranks cannot restore a {expected}-rank server")]
    RankMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerStatus {
    Running,
    Finished,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOutcome {
    pub histories: Vec<TrainingHistory>,
    pub state: TrainingState,
    pub buffer_stats: Vec<BufferStats>,
    /// Distinct (client, simulation, step) triples put into buffers, all ranks.
    pub unique_samples: usize,
    pub duplicates_dropped: u64,
    pub frames_rejected: u64,
}

impl ServerOutcome {
    pub fn final_val_mse(&self) -> Option<f64> {
        self.histories
            .first()
            .and_then(|h| h.final_validation())
            .map(|v| v.val_mse)
    }
}

enum AggEvent {
    Frame(TimeStepMessage),
    MarkFailed,
}

struct RankShared {
    buffer: TrainingBuffer<Sample>,
    log: Mutex<ReceptionLog>,
    done: Mutex<BTreeSet<u32>>,
    duplicates: AtomicU64,
    rejected: AtomicU64,
}

struct Shared {
    n_sims: usize,
    steps: usize,
    field_len: usize,
    design: Arc<DesignMatrix>,
    ranks: Vec<RankShared>,
    failed: Mutex<BTreeSet<u32>>,
    health: Mutex<HashMap<u32, Instant>>,
    reducer: AllReducer,
    stop: AtomicBool,
    failure: Mutex<Option<String>>,
    trainers_done: AtomicUsize,
    connections: Mutex<Vec<TcpStream>>,
    latest_checkpoint: Mutex<Option<ServerCheckpoint>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Shared {
    fn fail(&self, reason: String) {
        let mut f = lock(&self.failure);
        if f.is_none() {
            log::error!("{reason}");
            *f = Some(reason);
        }
        drop(f);
        self.halt();
    }

    fn halt(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.reducer.abort();
        for r in &self.ranks {
            r.buffer.abort();
        }
        for c in lock(&self.connections).iter() {
            let _ = c.shutdown(Shutdown::Both);
        }
    }

    fn snapshot(&self, state: &TrainingState) -> ServerCheckpoint {
        ServerCheckpoint {
            model: state.model.clone(),
            adam: state.adam.clone(),
            samples_seen: state.samples_seen,
            batches: state.batches,
            ranks: self
                .ranks
                .iter()
                .map(|r| RankCheckpoint {
                    log: lock(&r.log).clone(),
                    done: lock(&r.done).clone(),
                    buffer_rng: r.buffer.rng_state(),
                })
                .collect(),
            failed: lock(&self.failed).clone(),
        }
    }
}

type TrainerResult = Result<(TrainingHistory, TrainingState), TrainerError>;

pub struct Server {
    shared: Arc<Shared>,
    endpoints: Vec<SocketAddr>,
    senders: Vec<Sender<AggEvent>>,
    trainers: Vec<JoinHandle<TrainerResult>>,
    workers: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn start(
        cfg: &ExperimentConfig,
        design: Arc<DesignMatrix>,
        opts: ServerOptions,
    ) -> Result<Server, ServerError> {
        let n_ranks = cfg.n_ranks;
        let epoch = opts.epoch.unwrap_or_else(Instant::now);
        let (state, rank_states, failed) = match opts.restore {
            Some(ck) => {
                if ck.ranks.len() != n_ranks {
                    return Err(ServerError::RankMismatch {
                        expected: n_ranks,
                        found: ck.ranks.len(),
                    });
                }
                let state = TrainingState {
                    model: ck.model,
                    adam: ck.adam,
                    samples_seen: ck.samples_seen,
                    batches: ck.batches,
                };
                (state, Some(ck.ranks), ck.failed)
            }
            None => {
                let mut rng = rng_for(cfg.master_seed, SeedRole::ModelInit, 0);
                let model = Mlp::<f32>::init(&cfg.layer_widths(), &mut rng);
                (TrainingState::new(model), None, BTreeSet::new())
            }
        };

        let mut ranks = Vec::with_capacity(n_ranks);
        for r in 0..n_ranks {
            let mut bcfg = BufferConfig::new(
                cfg.buffer_policy,
                cfg.buffer_capacity,
                cfg.buffer_threshold,
                derive_seed(cfg.master_seed, SeedRole::Buffer, r as u64),
            );
            bcfg.paced_samples_per_batch = cfg.paced_samples_per_batch;
            let (buffer, log, done) = match &rank_states {
                Some(rs) => (
                    TrainingBuffer::with_rng(bcfg, rs[r].buffer_rng.restore())?,
                    rs[r].log.clone(),
                    rs[r].done.clone(),
                ),
                None => (
                    TrainingBuffer::new(bcfg)?,
                    ReceptionLog::new(),
                    BTreeSet::new(),
                ),
            };
            ranks.push(RankShared {
                buffer,
                log: Mutex::new(log),
                done: Mutex::new(done),
                duplicates: AtomicU64::new(0),
                rejected: AtomicU64::new(0),
            });
        }

        let shared = Arc::new(Shared {
            n_sims: cfg.n_clients_total,
            steps: cfg.steps_per_simulation,
            field_len: cfg.field_len(),
            design,
            ranks,
            failed: Mutex::new(failed),
            health: Mutex::new(HashMap::new()),
            reducer: AllReducer::new(n_ranks, Duration::from_millis(cfg.allreduce_timeout_ms)),
            stop: AtomicBool::new(false),
            failure: Mutex::new(None),
            trainers_done: AtomicUsize::new(0),
            connections: Mutex::new(Vec::new()),
            latest_checkpoint: Mutex::new(None),
        });

        let mut endpoints = Vec::with_capacity(n_ranks);
        let mut senders = Vec::with_capacity(n_ranks);
        let mut workers = Vec::new();
        for rank in 0..n_ranks {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            listener.set_nonblocking(true)?;
            endpoints.push(listener.local_addr()?);
            let (tx, rx) = mpsc::channel();
            senders.push(tx.clone());
            let s = Arc::clone(&shared);
            workers.push(
                thread::Builder::new()
                    .name(format!("accept-{rank}"))
                    .spawn(move || accept_loop(rank, listener, tx, s))?,
            );
            let s = Arc::clone(&shared);
            workers.push(
                thread::Builder::new()
                    .name(format!("aggregator-{rank}"))
                    .spawn(move || aggregator_loop(rank, rx, s))?,
            );
        }

        let settings = TrainerSettings::from_config(cfg);
        let mut trainers = Vec::with_capacity(n_ranks);
        for rank in 0..n_ranks {
            let s = Arc::clone(&shared);
            let mut state = state.clone();
            let validation = opts.validation.clone().filter(|_| rank == 0);
            let metrics = match &opts.metrics_dir {
                Some(dir) => Some(MetricsWriter::append(&metrics_path(dir, rank))?),
                None => None,
            };
            let crash = opts.crash_after_batches.filter(|_| rank == 0);
            let ck_path = opts.checkpoint_path.clone().filter(|_| rank == 0);
            let handle = thread::Builder::new()
                .name(format!("trainer-{rank}"))
                .spawn(move || {
                    let hook_shared = Arc::clone(&s);
                    let hook = move |st: &TrainingState| {
                        let ck = hook_shared.snapshot(st);
                        if let Some(path) = &ck_path {
                            save_checkpoint(path, &ck).map_err(|e| e.to_string())?;
                        }
                        *lock(&hook_shared.latest_checkpoint) = Some(ck);
                        Ok(())
                    };
                    let mut ctx = TrainerContext {
                        rank,
                        buffer: &s.ranks[rank].buffer,
                        reducer: &s.reducer,
                        settings,
                        validation: validation.as_deref(),
                        metrics,
                        epoch,
                        checkpoint: (rank == 0).then(|| Box::new(hook) as _),
                        crash_after_batches: crash,
                    };
                    let result = trainer_loop(&mut ctx, &mut state).map(|h| (h, state));
                    if let Err(e) = &result {
                        s.fail(format!("rank {rank} trainer: {e}"));
                    }
                    s.trainers_done.fetch_add(1, Ordering::SeqCst);
                    result
                })?;
            trainers.push(handle);
        }

        // a restored server may already have everything
        for tx in &senders {
            let _ = tx.send(AggEvent::MarkFailed);
        }
        Ok(Server {
            shared,
            endpoints,
            senders,
            trainers,
            workers,
        })
    }

    pub fn endpoints(&self) -> &[SocketAddr] {
        &self.endpoints
    }

    pub fn last_seen(&self, client_id: u32) -> Option<Instant> {
        lock(&self.shared.health).get(&client_id).copied()
    }

    /// Removes `sim_index` from the reception-complete condition of every rank.
    pub fn mark_failed(&self, sim_index: u32) {
        lock(&self.shared.failed).insert(sim_index);
        for tx in &self.senders {
            let _ = tx.send(AggEvent::MarkFailed);
        }
    }

    pub fn status(&self) -> ServerStatus {
        if let Some(reason) = lock(&self.shared.failure).clone() {
            return ServerStatus::Failed(reason);
        }
        if self.shared.trainers_done.load(Ordering::SeqCst) == self.trainers.len() {
            ServerStatus::Finished
        } else {
            ServerStatus::Running
        }
    }

    /// Most recent checkpoint taken by this instance.
    pub fn latest_checkpoint(&self) -> Option<ServerCheckpoint> {
        lock(&self.shared.latest_checkpoint).clone()
    }

    pub fn unique_samples(&self) -> usize {
        self.shared.ranks.iter().map(|r| lock(&r.log).len()).sum()
    }

    pub fn abort(&self, reason: &str) {
        self.shared.fail(reason.to_string());
    }

    /// Waits for the trainers, then stops every thread.
    pub fn join(mut self) -> Result<ServerOutcome, ServerError> {
        let trainers = std::mem::take(&mut self.trainers);
        let mut results = Vec::with_capacity(trainers.len());
        for h in trainers {
            results.push(h.join().unwrap_or_else(|_| {
                Err(TrainerError::Checkpoint("trainer thread panicked".into()))
            }));
        }
        self.shared.halt();
        self.senders.clear();
        for w in std::mem::take(&mut self.workers) {
            let _ = w.join();
        }
        if let Some(reason) = lock(&self.shared.failure).clone() {
            return Err(ServerError::Failed(reason));
        }
        let mut histories = Vec::with_capacity(results.len());
        let mut state = None;
        for r in results {
            let (h, s) = r.map_err(|e| ServerError::Failed(e.to_string()))?;
            histories.push(h);
            state.get_or_insert(s);
        }
        let shared = &self.shared;
        Ok(ServerOutcome {
            histories,
            state: state.expect("at least one rank"),
            buffer_stats: shared
                .ranks
                .iter()
                .map(|r| r.buffer.snapshot_stats())
                .collect(),
            unique_samples: shared.ranks.iter().map(|r| lock(&r.log).len()).sum(),
            duplicates_dropped: shared
                .ranks
                .iter()
                .map(|r| r.duplicates.load(Ordering::SeqCst))
                .sum(),
            frames_rejected: shared
                .ranks
                .iter()
                .map(|r| r.rejected.load(Ordering::SeqCst))
                .sum(),
        })
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shared.halt();
    }
}

fn accept_loop(rank: usize, listener: TcpListener, tx: Sender<AggEvent>, shared: Arc<Shared>) {
    let mut readers = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                if let Ok(c) = stream.try_clone() {
                    lock(&shared.connections).push(c);
                }
                let tx = tx.clone();
                let s = Arc::clone(&shared);
                let spawned = thread::Builder::new()
                    .name(format!("reader-{rank}"))
                    .spawn(move || reader_loop(rank, peer, stream, tx, s));
                match spawned {
                    Ok(h) => readers.push(h),
                    Err(e) => log::error!("rank {rank}: cannot start reader for {peer}: {e}"),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("rank {rank}: accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for h in readers {
        let _ = h.join();
    }
}

fn reader_loop(
    rank: usize,
    peer: SocketAddr,
    stream: TcpStream,
    tx: Sender<AggEvent>,
    shared: Arc<Shared>,
) {
    let mut input = BufReader::with_capacity(1 << 16, stream);
    loop {
        match read_message(&mut input) {
            Ok(Some(msg)) => {
                lock(&shared.health).insert(msg.client_id, Instant::now());
                if tx.send(AggEvent::Frame(msg)).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            // the whole frame was consumed, so the stream is still in sync
            Err(
                e @ (ProtocolError::UnknownType { .. }
                | ProtocolError::PayloadMismatch { .. }
                | ProtocolError::UnexpectedPayload { .. }),
            ) => {
                log::warn!("rank {rank}: dropped malformed frame from {peer}: {e}");
                shared.ranks[rank].rejected.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => {
                if !shared.stop.load(Ordering::SeqCst) {
                    log::warn!("rank {rank}: closing connection from {peer}: {e}");
                }
                return;
            }
        }
    }
}

fn aggregator_loop(rank: usize, rx: Receiver<AggEvent>, shared: Arc<Shared>) {
    let me = &shared.ranks[rank];
    let mut signalled = me.buffer.is_reception_over();
    loop {
        let event = match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(ev) => ev,
            Err(RecvTimeoutError::Timeout) => {
                if shared.stop.load(Ordering::SeqCst) {
                    return;
                }
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => return,
        };
        if let AggEvent::Frame(msg) = event {
            match accept_frame(rank, &shared, msg, signalled) {
                Ok(()) => {}
                Err(BufferError::Aborted) => return,
                Err(e) => {
                    shared.fail(format!("rank {rank} aggregator: {e}"));
                    return;
                }
            }
        }
        if !signalled && reception_complete(rank, &shared) {
            signalled = true;
            log::info!("rank {rank}: reception over");
            if let Err(e) = me.buffer.signal_reception_over() {
                shared.fail(format!("rank {rank} aggregator: {e}"));
                return;
            }
        }
    }
}

fn reception_complete(rank: usize, shared: &Shared) -> bool {
    let done = lock(&shared.ranks[rank].done);
    let failed = lock(&shared.failed);
    (0..shared.n_sims as u32).all(|s| done.contains(&s) || failed.contains(&s))
}

fn accept_frame(
    rank: usize,
    shared: &Shared,
    msg: TimeStepMessage,
    over: bool,
) -> Result<(), BufferError> {
    let me = &shared.ranks[rank];
    let reject = |why: String| {
        log::warn!(
            "rank {rank}: dropped frame from client {}: {why}",
            msg.client_id
        );
        me.rejected.fetch_add(1, Ordering::Relaxed);
    };
    if msg.sim_index as usize >= shared.n_sims {
        reject(format!("unknown simulation index {}", msg.sim_index));
        return Ok(());
    }
    match msg.msg_type {
        MessageType::Hello | MessageType::Heartbeat => {}
        MessageType::Goodbye => {
            lock(&me.done).insert(msg.sim_index);
        }
        MessageType::Data => {
            if msg.t as usize >= shared.steps || msg.payload.len() != shared.field_len {
                reject(format!("step {} with {} values", msg.t, msg.payload.len()));
                return Ok(());
            }
            // after reception is over only replays of logged steps can arrive
            if over || !lock(&me.log).insert(msg.client_id, msg.sim_index, msg.t) {
                me.duplicates.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
            me.buffer.put(Sample {
                params: shared.design.params(msg.sim_index as usize),
                t: msg.t,
                field: Arc::from(msg.payload),
                client_id: msg.client_id,
                sim_index: msg.sim_index,
            })?;
        }
    }
    Ok(())
}
