//! Client side of the streaming API: runs one simulation and sends every time
//! step to the server rank chosen by [`route_rank`].

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::solver::{Field, Grid, Simulation, SimulationTag, SolverError, SolverOptions};
use crate::types::SimParams;

use super::protocol::{encode_message, MessageType, ProtocolError, TimeStepMessage};
use super::routing::route_rank;

/// Test hooks that make a client misbehave at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClientFault {
    #[default]
    None,
    /// Drop every connection and exit with an error before sending this step.
    CrashAtStep(u32),
    /// Stop computing and heartbeating before this step until killed.
    HangAtStep(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    pub client_id: u32,
    pub sim_index: u32,
    pub params: SimParams,
    pub grid: Grid,
    pub steps: usize,
    pub solver: SolverOptions,
    pub endpoints: Vec<SocketAddr>,
    pub heartbeat_interval: Duration,
    /// Artificial cost added to every solver step.
    pub step_delay: Duration,
    /// Reconnection attempts per send before giving up.
    pub retries: u32,
    pub retry_backoff: Duration,
    pub fault: ClientFault,
    /// Saves the latest sent field here so that a restart resumes from it.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("rank {rank} at {addr}: {source}")]
    Connection {
        rank: usize,
        addr: SocketAddr,
        source: io::Error,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("client checkpoint: {0}")]
    Checkpoint(io::Error),
    #[error("killed")]
    Killed,
    #[error("injected crash at step {0}")]
    InjectedCrash(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientSummary {
    /// First step sent by this run (non-zero after resuming from a checkpoint).
    pub first_step: u32,
    pub data_frames: usize,
    pub reconnects: u32,
}

struct Link {
    addr: SocketAddr,
    stream: Option<BufWriter<TcpStream>>,
}

struct Links {
    links: Vec<Link>,
    client_id: u32,
    sim_index: u32,
    retries: u32,
    backoff: Duration,
    reconnects: u32,
}

impl Links {
    fn connect(&mut self, rank: usize) -> io::Result<()> {
        let link = &mut self.links[rank];
        let stream = TcpStream::connect_timeout(&link.addr, Duration::from_secs(5))?;
        stream.set_nodelay(true)?;
        let mut w = BufWriter::with_capacity(1 << 16, stream);
        let hello = TimeStepMessage::control(MessageType::Hello, self.client_id, self.sim_index);
        w.write_all(&encode_message(&hello).map_err(io::Error::other)?)?;
        w.flush()?;
        link.stream = Some(w);
        Ok(())
    }

    /// Writes one encoded frame, reconnecting with backoff on failure.
    fn send(&mut self, rank: usize, frame: &[u8]) -> Result<(), ClientError> {
        let mut last_err = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * attempt);
                self.reconnects += 1;
            }
            if self.links[rank].stream.is_none() {
                if let Err(e) = self.connect(rank) {
                    last_err = Some(e);
                    continue;
                }
            }
            let w = self.links[rank].stream.as_mut().expect("connected");
            match w.write_all(frame).and_then(|_| w.flush()) {
                Ok(()) => return Ok(()),
                Err(e) => {
                    self.links[rank].stream = None;
                    last_err = Some(e);
                }
            }
        }
        Err(ClientError::Connection {
            rank,
            addr: self.links[rank].addr,
            source: last_err.unwrap_or_else(|| io::Error::other("no attempt made")),
        })
    }

    fn close(&mut self) {
        for l in &mut self.links {
            if let Some(w) = l.stream.take() {
                if let Ok(s) = w.into_inner() {
                    let _ = s.shutdown(Shutdown::Write);
                }
            }
        }
    }

    fn drop_abruptly(&mut self) {
        for l in &mut self.links {
            if let Some(w) = l.stream.take() {
                let _ = w.get_ref().shutdown(Shutdown::Both);
            }
        }
    }
}

fn lock(links: &Mutex<Links>) -> std::sync::MutexGuard<'_, Links> {
    links.lock().unwrap_or_else(|p| p.into_inner())
}

/// Sleeps for `d` in small slices; `false` if `flag` was raised meanwhile.
fn interruptible_sleep(d: Duration, flag: &AtomicBool) -> bool {
    let end = Instant::now() + d;
    loop {
        if flag.load(Ordering::SeqCst) {
            return false;
        }
        let now = Instant::now();
        if now >= end {
            return true;
        }
        thread::sleep((end - now).min(Duration::from_millis(10)));
    }
}

/// Streams one simulation: hello to every rank, each step to its rank, then
/// goodbye to every rank. A heartbeat goes to rank 0 every interval.
pub fn client_stream(spec: &ClientSpec, kill: &AtomicBool) -> Result<ClientSummary, ClientError> {
    let n_ranks = spec.endpoints.len();
    assert!(n_ranks > 0, "client needs at least one endpoint");
    let links = Arc::new(Mutex::new(Links {
        links: spec
            .endpoints
            .iter()
            .map(|&addr| Link { addr, stream: None })
            .collect(),
        client_id: spec.client_id,
        sim_index: spec.sim_index,
        retries: spec.retries,
        backoff: spec.retry_backoff,
        reconnects: 0,
    }));
    for rank in 0..n_ranks {
        let mut l = lock(&links);
        if let Err(source) = l.connect(rank) {
            return Err(ClientError::Connection {
                rank,
                addr: spec.endpoints[rank],
                source,
            });
        }
    }

    let stop_heartbeat = Arc::new(AtomicBool::new(false));
    let heartbeat = {
        let links = Arc::clone(&links);
        let stop = Arc::clone(&stop_heartbeat);
        let interval = spec.heartbeat_interval;
        let frame = encode_message(&TimeStepMessage::control(
            MessageType::Heartbeat,
            spec.client_id,
            spec.sim_index,
        ))?;
        thread::spawn(move || {
            while interruptible_sleep(interval, &stop) {
                let mut l = lock(&links);
                if let Some(w) = l.links[0].stream.as_mut() {
                    let _ = w.write_all(&frame).and_then(|_| w.flush());
                }
            }
        })
    };

    let result = stream_steps(spec, kill, &links, &stop_heartbeat);
    stop_heartbeat.store(true, Ordering::SeqCst);
    let _ = heartbeat.join();
    let mut l = lock(&links);
    match &result {
        Ok(_) => l.close(),
        Err(_) => l.drop_abruptly(),
    }
    result.map(|(first_step, data_frames)| ClientSummary {
        first_step,
        data_frames,
        reconnects: l.reconnects,
    })
}

fn stream_steps(
    spec: &ClientSpec,
    kill: &AtomicBool,
    links: &Mutex<Links>,
    stop_heartbeat: &AtomicBool,
) -> Result<(u32, usize), ClientError> {
    let n_ranks = spec.endpoints.len();
    let resumed = match &spec.checkpoint_dir {
        Some(dir) => {
            load_client_checkpoint(dir, spec.sim_index).map_err(ClientError::Checkpoint)?
        }
        None => None,
    };
    let (mut sim, first, mut advance) = match resumed {
        Some(field) if (field.t as usize) + 1 < spec.steps => {
            let t = field.t;
            (
                Simulation::resume(spec.params, spec.grid, spec.solver, field)?,
                t + 1,
                true,
            )
        }
        Some(field) => (
            Simulation::resume(spec.params, spec.grid, spec.solver, field)?,
            spec.steps as u32,
            false,
        ),
        None => (
            Simulation::new(spec.params, spec.grid, spec.solver)?,
            0,
            false,
        ),
    };
    let tag = SimulationTag {
        client_id: spec.client_id,
        sim_index: spec.sim_index,
    };
    let mut sent = 0;
    for t in first..spec.steps as u32 {
        if kill.load(Ordering::SeqCst) {
            return Err(ClientError::Killed);
        }
        match spec.fault {
            ClientFault::CrashAtStep(s) if s == t => return Err(ClientError::InjectedCrash(t)),
            ClientFault::HangAtStep(s) if s == t => {
                stop_heartbeat.store(true, Ordering::SeqCst);
                while !kill.load(Ordering::SeqCst) {
                    thread::sleep(Duration::from_millis(5));
                }
                return Err(ClientError::Killed);
            }
            _ => {}
        }
        if advance {
            sim.advance()?;
        }
        advance = true;
        if !spec.step_delay.is_zero() && !interruptible_sleep(spec.step_delay, kill) {
            return Err(ClientError::Killed);
        }
        let sample = sim.sample(tag);
        let frame = encode_message(&TimeStepMessage::data(
            spec.client_id,
            spec.sim_index,
            t,
            sample.field.to_vec(),
        ))?;
        lock(links).send(route_rank(spec.client_id, t, n_ranks), &frame)?;
        sent += 1;
        if let Some(dir) = &spec.checkpoint_dir {
            save_client_checkpoint(dir, spec.sim_index, sim.field())
                .map_err(ClientError::Checkpoint)?;
        }
    }
    let bye = encode_message(&TimeStepMessage::control(
        MessageType::Goodbye,
        spec.client_id,
        spec.sim_index,
    ))?;
    let mut l = lock(links);
    for rank in 0..n_ranks {
        l.send(rank, &bye)?;
    }
    Ok((first, sent))
}

fn client_checkpoint_path(dir: &Path, sim_index: u32) -> PathBuf {
    dir.join(format!("client_{sim_index}.state"))
}

/// `u32 t, u32 n, n * f64` little-endian: the last field sent.
pub fn save_client_checkpoint(dir: &Path, sim_index: u32, field: &Field) -> io::Result<()> {
    let path = client_checkpoint_path(dir, sim_index);
    let tmp = path.with_extension("tmp");
    let mut bytes = Vec::with_capacity(8 + 8 * field.values.len());
    bytes.extend_from_slice(&field.t.to_le_bytes());
    bytes.extend_from_slice(&(field.values.len() as u32).to_le_bytes());
    for v in &field.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::create_dir_all(dir)?;
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

pub fn load_client_checkpoint(dir: &Path, sim_index: u32) -> io::Result<Option<Field>> {
    let mut f = match fs::File::open(client_checkpoint_path(dir, sim_index)) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let bad = || io::Error::new(io::ErrorKind::InvalidData, "malformed client checkpoint");
    if bytes.len() < 8 {
        return Err(bad());
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + 8 * n {
        return Err(bad());
    }
    let values = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Some(Field { values, t }))
}
