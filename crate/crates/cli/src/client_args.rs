//! Command line of the `heat-client` binary and the spawner that launches it.

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use clap::Args;

use surrogate_core::runtime::{ClientFault, ClientJob, ClientProcess, ClientSpawner, ClientSpec};
use surrogate_core::solver::{Grid, SolverOptions};
use surrogate_core::SimParams;

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ClientArgs {
    #[arg(long)]
    pub client_id: u32,
    #[arg(long)]
    pub sim_index: u32,
    /// Server rank addresses, rank 0 first.
    #[arg(long, value_delimiter = ',')]
    pub endpoints: Vec<SocketAddr>,
    /// T_IC,T_x1,T_y1,T_x2,T_y2 in kelvin.
    #[arg(long, value_delimiter = ',', required = true)]
    pub params: Vec<f64>,
    #[arg(long)]
    pub nx: usize,
    #[arg(long)]
    pub ny: usize,
    #[arg(long)]
    pub dx: f64,
    #[arg(long)]
    pub dy: f64,
    #[arg(long)]
    pub dt: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Experiment seed, only echoed in the log: the solver is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    pub heartbeat_ms: u64,
    #[arg(long, default_value_t = 0)]
    pub step_delay_ms: u64,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    #[arg(long, default_value_t = 50)]
    pub retry_backoff_ms: u64,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Write the time steps to a file in this directory instead of streaming.
    #[arg(long)]
    pub offline_dir: Option<PathBuf>,
    #[arg(long)]
    pub crash_at_step: Option<u32>,
    #[arg(long)]
    pub hang_at_step: Option<u32>,
}

impl ClientArgs {
    pub fn from_spec(spec: &ClientSpec, seed: Option<u64>) -> Self {
        let (crash_at_step, hang_at_step) = match spec.fault {
            ClientFault::None => (None, None),
            ClientFault::CrashAtStep(t) => (Some(t), None),
            ClientFault::HangAtStep(t) => (None, Some(t)),
        };
        ClientArgs {
            client_id: spec.client_id,
            sim_index: spec.sim_index,
            endpoints: spec.endpoints.clone(),
            params: spec.params.to_row().to_vec(),
            nx: spec.grid.nx,
            ny: spec.grid.ny,
            dx: spec.grid.dx,
            dy: spec.grid.dy,
            dt: spec.grid.dt,
            alpha: spec.grid.alpha,
            steps: spec.steps,
            tol: spec.solver.tol,
            max_iter: Some(spec.solver.max_iter),
            seed,
            heartbeat_ms: spec.heartbeat_interval.as_millis() as u64,
            step_delay_ms: spec.step_delay.as_millis() as u64,
            retries: spec.retries,
            retry_backoff_ms: spec.retry_backoff.as_millis() as u64,
            checkpoint_dir: spec.checkpoint_dir.clone(),
            offline_dir: None,
            crash_at_step,
            hang_at_step,
        }
    }

    pub fn to_spec(&self) -> Result<ClientSpec, String> {
        if self.params.len() != 5 {
            return Err(format!(
                "--params takes 5 temperatures, got {}",
                self.params.len()
            ));
        }
        let grid = Grid {
            nx: self.nx,
            ny: self.ny,
            dx: self.dx,
            dy: self.dy,
            alpha: self.alpha,
            dt: self.dt,
        };
        let fault = match (self.crash_at_step, self.hang_at_step) {
            (Some(t), _) => ClientFault::CrashAtStep(t),
            (None, Some(t)) => ClientFault::HangAtStep(t),
            (None, None) => ClientFault::None,
        };
        Ok(ClientSpec {
            client_id: self.client_id,
            sim_index: self.sim_index,
            params: SimParams::from_row(&self.params),
            grid,
            steps: self.steps,
            solver: SolverOptions {
                tol: self.tol,
                max_iter: self
                    .max_iter
                    .unwrap_or_else(|| SolverOptions::for_grid(&grid).max_iter),
            },
            endpoints: self.endpoints.clone(),
            heartbeat_interval: Duration::from_millis(self.heartbeat_ms),
            step_delay: Duration::from_millis(self.step_delay_ms),
            retries: self.retries,
            retry_backoff: Duration::from_millis(self.retry_backoff_ms),
            fault,
            checkpoint_dir: self.checkpoint_dir.clone(),
        })
    }

    /// The argument vector that parses back to `self`.
    pub fn to_args(&self) -> Vec<String> {
        let join = |v: &[String]| v.join(",");
        let mut a = vec![
            format!("--client-id={}", self.client_id),
            format!("--sim-index={}", self.sim_index),
            format!(
                "--params={}",
                join(&self.params.iter().map(f64::to_string).collect::<Vec<_>>())
            ),
            format!("--nx={}", self.nx),
            format!("--ny={}", self.ny),
            format!("--dx={}", self.dx),
            format!("--dy={}", self.dy),
            format!("--dt={}", self.dt),
            format!("--alpha={}", self.alpha),
            format!("--steps={}", self.steps),
            format!("--tol={}", self.tol),
            format!("--heartbeat-ms={}", self.heartbeat_ms),
            format!("--step-delay-ms={}", self.step_delay_ms),
            format!("--retries={}", self.retries),
            format!("--retry-backoff-ms={}", self.retry_backoff_ms),
        ];
        if !self.endpoints.is_empty() {
            a.push(format!(
                "--endpoints={}",
                join(
                    &self
                        .endpoints
                        .iter()
                        .map(|e| e.to_string())
                        .collect::<Vec<_>>()
                )
            ));
        }
        let optional = [
            ("max-iter", self.max_iter.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            (
                "checkpoint-dir",
                self.checkpoint_dir
                    .as_ref()
                    .map(|p| p.display().to_string()),
            ),
            (
                "offline-dir",
                self.offline_dir.as_ref().map(|p| p.display().to_string()),
            ),
            ("crash-at-step", self.crash_at_step.map(|v| v.to_string())),
            ("hang-at-step", self.hang_at_step.map(|v| v.to_string())),
        ];
        a.extend(
            optional
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| format!("--{k}={v}"))),
        );
        a
    }
}

/// Runs each client as a separate `heat-client` process.
pub struct ProcessSpawner {
    program: PathBuf,
    template: ClientSpec,
    seed: u64,
}

impl ProcessSpawner {
    pub fn new(program: &Path, template: ClientSpec, seed: u64) -> Self {
        ProcessSpawner {
            program: program.to_path_buf(),
            template,
            seed,
        }
    }

    /// Looks for `heat-client` next to the running executable.
    pub fn sibling_program() -> io::Result<PathBuf> {
        let exe = std::env::current_exe()?;
        let dir = exe
            .parent()
            .ok_or_else(|| io::Error::other("executable has no parent directory"))?;
        let mut candidates = vec![dir.join(format!("heat-client{}", std::env::consts::EXE_SUFFIX))];
        // test binaries live one level below the bin directory
        if let Some(up) = dir.parent() {
            candidates.push(up.join(format!("heat-client{}", std::env::consts::EXE_SUFFIX)));
        }
        candidates.into_iter().find(|p| p.is_file()).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::NotFound,
                "heat-client binary not found next to executable",
            )
        })
    }
}

struct ChildClient(Child);

impl ClientProcess for ChildClient {
    fn try_wait(&mut self) -> io::Result<Option<bool>> {
        Ok(self.0.try_wait()?.map(|s| s.success()))
    }

    fn kill(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

impl ClientSpawner for ProcessSpawner {
    fn spawn(&self, job: &ClientJob) -> io::Result<Box<dyn ClientProcess>> {
        let spec = ClientSpec {
            client_id: job.client_id,
            sim_index: job.sim_index,
            params: job.params,
            endpoints: job.endpoints.clone(),
            fault: job.fault,
            ..self.template.clone()
        };
        let child = Command::new(&self.program)
            .args(ClientArgs::from_spec(&spec, Some(self.seed)).to_args())
            .stdin(Stdio::null())
            .spawn()?;
        Ok(Box::new(ChildClient(child)))
    }
}
