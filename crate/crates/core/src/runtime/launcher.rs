//! The launcher: starts the server, keeps a bounded pool of clients running,
//! restarts failed or silent clients and recovers from server failures.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::design::{sample_design, DesignMatrix, PARAM_DIM};
use crate::seed::{derive_seed, SeedRole};
use crate::solver::SolverOptions;
use crate::types::SimParams;

use super::checkpoint::{load_checkpoint, CheckpointError, ServerCheckpoint};
use super::client::{client_stream, ClientFault, ClientSpec};
use super::server::{Server, ServerError, ServerOptions, ServerOutcome, ServerStatus};
use super::validation::ValidationSet;

const POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq)]
pub struct ClientJob {
    pub client_id: u32,
    pub sim_index: u32,
    pub params: SimParams,
    pub endpoints: Vec<SocketAddr>,
    /// 0 for the first submission of this simulation.
    pub attempt: u32,
    pub fault: ClientFault,
}

/// A running client, in-process or not.
pub trait ClientProcess: Send {
    /// `Some(true)` once exited successfully, `Some(false)` on failure.
    fn try_wait(&mut self) -> io::Result<Option<bool>>;
    fn kill(&mut self);
}

pub trait ClientSpawner {
    fn spawn(&self, job: &ClientJob) -> io::Result<Box<dyn ClientProcess>>;
}

/// Runs clients as threads of the launcher process.
pub struct ThreadSpawner {
    template: ClientSpec,
}

impl ThreadSpawner {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        ThreadSpawner {
            template: client_template(cfg),
        }
    }
}

/// Client settings shared by every job of an experiment.
pub fn client_template(cfg: &ExperimentConfig) -> ClientSpec {
    ClientSpec {
        client_id: 0,
        sim_index: 0,
        params: SimParams::uniform(cfg.param_range[0]),
        grid: cfg.grid(),
        steps: cfg.steps_per_simulation,
        solver: SolverOptions {
            tol: cfg.solver_tol,
            max_iter: cfg.solver_max_iter(),
        },
        endpoints: Vec::new(),
        heartbeat_interval: Duration::from_millis(cfg.heartbeat_interval_ms),
        step_delay: Duration::from_millis(cfg.client_step_delay_ms),
        retries: 3,
        retry_backoff: Duration::from_millis(50),
        fault: ClientFault::None,
        checkpoint_dir: None,
    }
}

struct ThreadClient {
    kill: Arc<AtomicBool>,
    handle: Option<JoinHandle<bool>>,
    status: Option<bool>,
}

impl ClientProcess for ThreadClient {
    fn try_wait(&mut self) -> io::Result<Option<bool>> {
        if self.status.is_none() && self.handle.as_ref().is_some_and(|h| h.is_finished()) {
            let ok = self.handle.take().expect("checked").join().unwrap_or(false);
            self.status = Some(ok);
        }
        Ok(self.status)
    }

    fn kill(&mut self) {
        self.kill.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
            self.status.get_or_insert(false);
        }
    }
}

impl ClientSpawner for ThreadSpawner {
    fn spawn(&self, job: &ClientJob) -> io::Result<Box<dyn ClientProcess>> {
        let spec = ClientSpec {
            client_id: job.client_id,
            sim_index: job.sim_index,
            params: job.params,
            endpoints: job.endpoints.clone(),
            fault: job.fault,
            ..self.template.clone()
        };
        let kill = Arc::new(AtomicBool::new(false));
        let k = Arc::clone(&kill);
        let handle = thread::Builder::new()
            .name(format!("client-{}", job.sim_index))
            .spawn(move || match client_stream(&spec, &k) {
                Ok(_) => true,
                Err(e) => {
                    log::info!("client {} exited: {e}", spec.client_id);
                    false
                }
            })?;
        Ok(Box::new(ThreadClient {
            kill,
            handle: Some(handle),
            status: None,
        }))
    }
}

/// Faults injected on purpose, each at most once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultPlan {
    /// Applied to the first submission of the given simulation.
    pub client_faults: Vec<(u32, ClientFault)>,
    /// The first server instance fails after this many batches.
    pub server_crash_after_batches: Option<u64>,
}

#[derive(Default)]
pub struct LaunchOptions {
    /// Receives `server.ckpt` and per-rank metrics CSVs.
    pub out_dir: Option<PathBuf>,
    pub validation: Option<Arc<ValidationSet>>,
    pub faults: FaultPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaunchReport {
    pub completed: BTreeSet<u32>,
    /// Resubmissions per simulation.
    pub restarts: BTreeMap<u32, u32>,
    pub failed: BTreeSet<u32>,
    pub server_restarts: u32,
    /// Largest number of clients alive at once.
    pub max_alive: usize,
    pub outcome: ServerOutcome,
    pub wall_time_s: f64,
}

impl LaunchReport {
    pub fn total_restarts(&self) -> u32 {
        self.restarts.values().sum()
    }
}

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("cannot restore server: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("server failed {restarts} times; last failure: {reason}")]
    ServerGaveUp { restarts: u32, reason: String },
}

pub fn experiment_design(cfg: &ExperimentConfig) -> Result<DesignMatrix, LaunchError> {
    sample_design(
        cfg.sampler,
        cfg.n_clients_total,
        PARAM_DIM,
        cfg.param_range,
        derive_seed(cfg.master_seed, SeedRole::Design, 0),
    )
    .map_err(|e| LaunchError::Config(e.to_string()))
}

struct Running {
    sim: u32,
    process: Box<dyn ClientProcess>,
    spawned: Instant,
}

/// Runs a whole online experiment and returns once training has finished.
pub fn launcher_run(
    cfg: &ExperimentConfig,
    spawner: &dyn ClientSpawner,
    opts: LaunchOptions,
) -> Result<LaunchReport, LaunchError> {
    cfg.validate()
        .map_err(|e| LaunchError::Config(e.to_string()))?;
    let started = Instant::now();
    let design = Arc::new(experiment_design(cfg)?);
    let checkpoint_path = opts.out_dir.as_ref().map(|d| d.join("server.ckpt"));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let timeout = Duration::from_millis(cfg.client_timeout_ms);
    let mut pending_faults: BTreeMap<u32, ClientFault> =
        opts.faults.client_faults.iter().copied().collect();
    let mut server_crash = opts.faults.server_crash_after_batches;

    let mut restarts: BTreeMap<u32, u32> = BTreeMap::new();
    let mut failures: BTreeMap<u32, u32> = BTreeMap::new();
    let mut failed: BTreeSet<u32> = BTreeSet::new();
    let mut server_restarts = 0u32;
    let mut max_alive = 0usize;
    let mut restore: Option<ServerCheckpoint> = None;

    loop {
        let completed_before = restore
            .as_ref()
            .map(ServerCheckpoint::completed)
            .unwrap_or_default();
        let server = Server::start(
            cfg,
            Arc::clone(&design),
            ServerOptions {
                restore: restore.take(),
                checkpoint_path: checkpoint_path.clone(),
                metrics_dir: opts.out_dir.clone(),
                validation: opts.validation.clone(),
                crash_after_batches: server_crash.take(),
                epoch: Some(started),
            },
        )?;
        for &s in &failed {
            server.mark_failed(s);
        }
        let mut completed = completed_before;
        let mut pending: VecDeque<u32> = (0..cfg.n_clients_total as u32)
            .filter(|s| !completed.contains(s) && !failed.contains(s))
            .collect();
        let mut running: Vec<Running> = Vec::new();

        let failure = loop {
            match server.status() {
                ServerStatus::Failed(reason) => break Some(reason),
                ServerStatus::Finished => break None,
                ServerStatus::Running => {}
            }

            let mut i = 0;
            while i < running.len() {
                let r = &mut running[i];
                let exited = match r.process.try_wait() {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("client {}: cannot poll: {e}", r.sim);
                        Some(false)
                    }
                };
                let silent = exited.is_none() && {
                    let last = server
                        .last_seen(r.sim)
                        .map_or(r.spawned, |t| t.max(r.spawned));
                    last.elapsed() > timeout
                };
                if silent {
                    log::warn!("client {} silent for over {timeout:?}; killing it", r.sim);
                    r.process.kill();
                }
                match (exited, silent) {
                    (Some(true), _) => {
                        completed.insert(r.sim);
                        running.swap_remove(i);
                    }
                    (Some(false), _) | (None, true) => {
                        let sim = r.sim;
                        running.swap_remove(i);
                        let n = failures.entry(sim).or_default();
                        *n += 1;
                        if *n > cfg.max_restarts {
                            log::error!("simulation {sim} failed {n} times; giving up on it");
                            failed.insert(sim);
                            server.mark_failed(sim);
                        } else {
                            *restarts.entry(sim).or_default() += 1;
                            pending.push_front(sim);
                        }
                    }
                    (None, false) => i += 1,
                }
            }

            while running.len() < cfg.n_clients_concurrent {
                let Some(sim) = pending.pop_front() else {
                    break;
                };
                let job = ClientJob {
                    client_id: sim,
                    sim_index: sim,
                    params: design.params(sim as usize),
                    endpoints: server.endpoints().to_vec(),
                    attempt: restarts.get(&sim).copied().unwrap_or(0),
                    fault: pending_faults.remove(&sim).unwrap_or_default(),
                };
                match spawner.spawn(&job) {
                    Ok(process) => running.push(Running {
                        sim,
                        process,
                        spawned: Instant::now(),
                    }),
                    Err(e) => {
                        log::error!("cannot start client {sim}: {e}");
                        let n = failures.entry(sim).or_default();
                        *n += 1;
                        if *n > cfg.max_restarts {
                            failed.insert(sim);
                            server.mark_failed(sim);
                        } else {
                            pending.push_back(sim);
                        }
                        break;
                    }
                }
            }
            max_alive = max_alive.max(running.len());
            thread::sleep(POLL);
        };

        if failure.is_none() {
            // clients exit right after their goodbye, which may have ended training
            let deadline = Instant::now() + timeout;
            while !running.is_empty() && Instant::now() < deadline {
                running.retain_mut(|r| match r.process.try_wait() {
                    Ok(Some(ok)) => {
                        if ok {
                            completed.insert(r.sim);
                        }
                        false
                    }
                    Ok(None) => true,
                    Err(_) => false,
                });
                thread::sleep(POLL);
            }
        }
        for r in &mut running {
            r.process.kill();
        }
        match failure {
            None => {
                let outcome = server.join()?;
                return Ok(LaunchReport {
                    completed,
                    restarts,
                    failed,
                    server_restarts,
                    max_alive,
                    outcome,
                    wall_time_s: started.elapsed().as_secs_f64(),
                });
            }
            Some(reason) => {
                let in_memory = server.latest_checkpoint();
                drop(server.join());
                server_restarts += 1;
                if server_restarts > cfg.max_restarts {
                    return Err(LaunchError::ServerGaveUp {
                        restarts: server_restarts - 1,
                        reason,
                    });
                }
                restore = match (&checkpoint_path, in_memory) {
                    (Some(path), Some(_)) => Some(load_checkpoint(path)?),
                    (_, ck) => ck,
                };
                match &restore {
                    Some(ck) => log::warn!(
                        "server failed ({reason}); restoring from batch {}",
                        ck.batches
                    ),
                    None => {
                        log::warn!("server failed ({reason}) before any checkpoint; starting over")
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BufferPolicy;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Mutex;

    fn tiny(n_sims: usize, concurrent: usize, ranks: usize) -> ExperimentConfig {
        ExperimentConfig {
            nx: 6,
            ny: 6,
            dx: 0.2,
            dy: 0.2,
            steps_per_simulation: 12,
            n_clients_total: n_sims,
            n_clients_concurrent: concurrent,
            n_ranks: ranks,
            buffer_policy: BufferPolicy::Reservoir,
            buffer_capacity: 40,
            buffer_threshold: 8,
            batch_size: 4,
            hidden_layers: vec![8],
            validation_every_batches: 5,
            validation_simulations: 2,
            heartbeat_interval_ms: 20,
            client_timeout_ms: 400,
            checkpoint_every_batches: 4,
            client_step_delay_ms: 1,
            allreduce_timeout_ms: 10_000,
            ..ExperimentConfig::default()
        }
    }

    /// Counts live clients while delegating to the thread spawner.
    struct Counting {
        inner: ThreadSpawner,
        alive: Arc<AtomicUsize>,
        peak: Arc<Mutex<usize>>,
    }

    struct CountedClient {
        inner: Box<dyn ClientProcess>,
        alive: Arc<AtomicUsize>,
        done: bool,
    }

    impl ClientProcess for CountedClient {
        fn try_wait(&mut self) -> io::Result<Option<bool>> {
            let r = self.inner.try_wait()?;
            if r.is_some() && !self.done {
                self.done = true;
                self.alive.fetch_sub(1, Ordering::SeqCst);
            }
            Ok(r)
        }
        fn kill(&mut self) {
            self.inner.kill();
            if !self.done {
                self.done = true;
                self.alive.fetch_sub(1, Ordering::SeqCst);
            }
        }
    }

    impl ClientSpawner for Counting {
        fn spawn(&self, job: &ClientJob) -> io::Result<Box<dyn ClientProcess>> {
            let inner = self.inner.spawn(job)?;
            let now = self.alive.fetch_add(1, Ordering::SeqCst) + 1;
            let mut p = self.peak.lock().unwrap();
            *p = (*p).max(now);
            Ok(Box::new(CountedClient {
                inner,
                alive: Arc::clone(&self.alive),
                done: false,
            }))
        }
    }

    #[test]
    fn pool_respects_concurrency_and_completes_everything() {
        let cfg = tiny(5, 2, 1);
        let spawner = Counting {
            inner: ThreadSpawner::new(&cfg),
            alive: Arc::new(AtomicUsize::new(0)),
            peak: Arc::new(Mutex::new(0)),
        };
        let report = launcher_run(&cfg, &spawner, LaunchOptions::default()).unwrap();
        assert_eq!(report.completed.len(), 5);
        assert!(report.max_alive <= 2);
        assert!(*spawner.peak.lock().unwrap() <= 2);
        assert_eq!(report.outcome.unique_samples, 5 * 12);
        assert_eq!(report.total_restarts(), 0);
    }

    #[test]
    fn crashed_and_hung_clients_are_restarted() {
        let cfg = tiny(4, 2, 2);
        let opts = LaunchOptions {
            faults: FaultPlan {
                client_faults: vec![
                    (1, ClientFault::CrashAtStep(5)),
                    (2, ClientFault::HangAtStep(3)),
                ],
                server_crash_after_batches: None,
            },
            ..Default::default()
        };
        let report = launcher_run(&cfg, &ThreadSpawner::new(&cfg), opts).unwrap();
        assert_eq!(report.completed.len(), 4);
        assert_eq!(report.restarts.get(&1), Some(&1));
        assert_eq!(report.restarts.get(&2), Some(&1));
        assert_eq!(report.outcome.unique_samples, 4 * 12);
        assert!(report.outcome.duplicates_dropped >= 5);
    }

    struct AlwaysFails;
    impl ClientSpawner for AlwaysFails {
        fn spawn(&self, job: &ClientJob) -> io::Result<Box<dyn ClientProcess>> {
            if job.sim_index == 0 {
                Err(io::Error::other("no such binary"))
            } else {
                Err(io::Error::other("unreachable in this test"))
            }
        }
    }

    #[test]
    fn permanently_failing_simulation_is_dropped() {
        let cfg = ExperimentConfig {
            max_restarts: 1,
            ..tiny(3, 1, 1)
        };
        // sim 0 can never start; the others run as threads
        struct Mixed(ThreadSpawner);
        impl ClientSpawner for Mixed {
            fn spawn(&self, job: &ClientJob) -> io::Result<Box<dyn ClientProcess>> {
                if job.sim_index == 0 {
                    AlwaysFails.spawn(job)
                } else {
                    self.0.spawn(job)
                }
            }
        }
        let report = launcher_run(
            &cfg,
            &Mixed(ThreadSpawner::new(&cfg)),
            LaunchOptions::default(),
        )
        .unwrap();
        assert_eq!(report.failed, [0].into_iter().collect());
        assert_eq!(report.completed, [1, 2].into_iter().collect());
        assert_eq!(report.outcome.unique_samples, 2 * 12);
    }

    #[test]
    fn server_crash_resumes_from_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            checkpoint_every_batches: 2,
            ..tiny(4, 2, 2)
        };
        let opts = LaunchOptions {
            out_dir: Some(dir.path().to_path_buf()),
            faults: FaultPlan {
                client_faults: vec![],
                server_crash_after_batches: Some(3),
            },
            ..Default::default()
        };
        let report = launcher_run(&cfg, &ThreadSpawner::new(&cfg), opts).unwrap();
        assert_eq!(report.server_restarts, 1);
        assert_eq!(report.outcome.unique_samples, 4 * 12);
        assert!(report.outcome.state.batches > 3);
        assert!(dir.path().join("server.ckpt").exists());
        assert!(dir.path().join("metrics_rank1.csv").exists());
    }
}
