//! Training buffer shared by one rank's aggregator (producer) and trainer
//! (consumer) threads.
//!
//! Three policies:
//!
//! * **FIFO**: a bounded queue. Each sample is read exactly once, in arrival
//!   order. `put` blocks while full, `get` while empty.
//! * **FIRO** (first in, random out): a bounded list read at uniformly random
//!   positions, each sample exactly once. `get` blocks while the population is
//!   at or below the threshold until reception is over.
//! * **Reservoir**: samples are split into `not_seen` and `seen`. A `get`
//!   draws uniformly over both lists; a drawn unseen sample moves to `seen`,
//!   a drawn seen sample stays (batches are drawn with replacement). A `put`
//!   into a full buffer evicts one uniformly random *seen* sample, so unseen
//!   data is never discarded; `put` blocks only while `not_seen` alone fills
//!   the capacity. Once reception is over, threshold blocking is lifted and
//!   every draw removes its sample, so the buffer drains.
//!
//! All state lives behind one mutex with condition signalling. `get` returns
//! `Ok(None)` once reception is over and the buffer is empty.
//!
//! ## Pacing
//!
//! With `paced_samples_per_batch = r > 0` the buffer also meters the producer
//! against the trainer's batches: between batches the producer may bring the
//! total put count up to a credit that grows by `r` per completed batch; during
//! a batch it may only put one sample each time the trainer is stuck in `get`.
//! [`TrainingBuffer::begin_batch`] waits until the credit is used up (or the
//! producer cannot put by policy, or reception is over). Every `get` then sees
//! a buffer state that depends only on the arrival order, not on thread timing.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::BufferPolicy;
use crate::seed::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferConfig {
    pub capacity: usize,
    pub threshold: usize,
    pub policy: BufferPolicy,
    pub seed: u64,
    pub paced_samples_per_batch: usize,
    /// Keep a record of every eviction (see [`TrainingBuffer::take_evictions`]).
    pub trace_evictions: bool,
}

impl BufferConfig {
    pub fn new(policy: BufferPolicy, capacity: usize, threshold: usize, seed: u64) -> Self {
        BufferConfig {
            capacity,
            threshold,
            policy,
            seed,
            paced_samples_per_batch: 0,
            trace_evictions: false,
        }
    }

    pub fn validate(&self) -> Result<(), BufferError> {
        if self.capacity == 0 || self.threshold >= self.capacity {
            return Err(BufferError::InvalidConfig {
                capacity: self.capacity,
                threshold: self.threshold,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BufferError {
    #[error("put after reception was signalled over")]
    PutAfterReceptionOver,
    #[error("reception over signalled twice")]
    DoubleSignal,
    #[error("buffer aborted")]
    Aborted,
    #[error("threshold {threshold} must be below capacity {capacity}")]
    InvalidConfig { capacity: usize, threshold: usize },
}

/// Outcome of a non-blocking read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TryGet<T> {
    Item(T),
    WouldBlock,
    EndOfStream,
}

/// Outcome of a non-blocking write; hands the item back when it would block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TryPut<T> {
    Stored,
    WouldBlock(T),
}

/// A seen sample removed to make room for a new one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Eviction<T> {
    pub item: T,
    /// Insertion index of the evicted sample (0-based put count).
    pub inserted_at: u64,
    /// Insertion index of the sample whose arrival caused the eviction.
    pub evicted_at: u64,
    pub draws: u32,
}

/// Point-in-time counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BufferStats {
    pub population: usize,
    pub seen_count: usize,
    pub unseen_count: usize,
    pub puts: u64,
    pub gets: u64,
    pub evictions: u64,
    /// `repeats[k]` = number of samples drawn exactly `k` times so far
    /// (departed samples plus those still held). `sum(k * repeats[k]) == gets`.
    pub repeats: Vec<u64>,
    pub reception_over: bool,
    pub threshold_crossed: bool,
}

struct Slot<T> {
    item: T,
    id: u64,
    draws: u32,
}

enum Store<T> {
    Fifo(VecDeque<Slot<T>>),
    Firo(Vec<Slot<T>>),
    Reservoir {
        seen: Vec<Slot<T>>,
        not_seen: Vec<Slot<T>>,
    },
}

impl<T> Store<T> {
    fn population(&self) -> usize {
        match self {
            Store::Fifo(q) => q.len(),
            Store::Firo(v) => v.len(),
            Store::Reservoir { seen, not_seen } => seen.len() + not_seen.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pace {
    per_batch: u64,
    credit: u64,
    in_batch: bool,
    token: bool,
}

enum GetStatus {
    Ready,
    Blocked,
    Exhausted,
}

struct State<T> {
    store: Store<T>,
    rng: ChaCha8Rng,
    reception_over: bool,
    aborted: bool,
    puts: u64,
    gets: u64,
    evictions: u64,
    departed: Vec<u64>,
    eviction_log: Vec<Eviction<T>>,
    threshold_crossed: bool,
    pace: Option<Pace>,
}

pub struct TrainingBuffer<T> {
    cfg: BufferConfig,
    state: Mutex<State<T>>,
    producer_cv: Condvar,
    consumer_cv: Condvar,
}

fn bump(hist: &mut Vec<u64>, draws: u32) {
    let k = draws as usize;
    if hist.len() <= k {
        hist.resize(k + 1, 0);
    }
    hist[k] += 1;
}

impl<T: Clone> State<T> {
    fn population(&self) -> usize {
        self.store.population()
    }

    fn can_put(&self, cfg: &BufferConfig) -> bool {
        match &self.store {
            Store::Fifo(q) => q.len() < cfg.capacity,
            Store::Firo(v) => v.len() < cfg.capacity,
            Store::Reservoir { not_seen, .. } => not_seen.len() < cfg.capacity,
        }
    }

    fn get_status(&self, cfg: &BufferConfig) -> GetStatus {
        let pop = self.population();
        if self.reception_over {
            return if pop == 0 {
                GetStatus::Exhausted
            } else {
                GetStatus::Ready
            };
        }
        let threshold = match cfg.policy {
            BufferPolicy::Fifo => 0,
            _ => cfg.threshold,
        };
        if pop > threshold {
            GetStatus::Ready
        } else {
            GetStatus::Blocked
        }
    }

    fn insert(&mut self, item: T, cfg: &BufferConfig) {
        let id = self.puts;
        let slot = Slot { item, id, draws: 0 };
        match &mut self.store {
            Store::Fifo(q) => q.push_back(slot),
            Store::Firo(v) => v.push(slot),
            Store::Reservoir { seen, not_seen } => {
                if seen.len() + not_seen.len() >= cfg.capacity {
                    // can_put guarantees not_seen < capacity, so seen is non-empty
                    let idx = self.rng.gen_range(0..seen.len());
                    let victim = seen.swap_remove(idx);
                    self.evictions += 1;
                    bump(&mut self.departed, victim.draws);
                    if cfg.trace_evictions {
                        self.eviction_log.push(Eviction {
                            item: victim.item,
                            inserted_at: victim.id,
                            evicted_at: id,
                            draws: victim.draws,
                        });
                    }
                }
                not_seen.push(slot);
            }
        }
        self.puts += 1;
        if self.population() > cfg.threshold {
            self.threshold_crossed = true;
        }
    }

    fn take(&mut self) -> T {
        let over = self.reception_over;
        let item = match &mut self.store {
            Store::Fifo(q) => {
                let mut slot = q.pop_front().expect("take on empty FIFO");
                slot.draws += 1;
                bump(&mut self.departed, slot.draws);
                slot.item
            }
            Store::Firo(v) => {
                let idx = self.rng.gen_range(0..v.len());
                let mut slot = v.swap_remove(idx);
                slot.draws += 1;
                bump(&mut self.departed, slot.draws);
                slot.item
            }
            Store::Reservoir { seen, not_seen } => {
                let idx = self.rng.gen_range(0..seen.len() + not_seen.len());
                if idx < not_seen.len() {
                    let mut slot = not_seen.swap_remove(idx);
                    slot.draws += 1;
                    if over {
                        bump(&mut self.departed, slot.draws);
                        slot.item
                    } else {
                        let item = slot.item.clone();
                        seen.push(slot);
                        item
                    }
                } else {
                    let j = idx - not_seen.len();
                    if over {
                        let mut slot = seen.swap_remove(j);
                        slot.draws += 1;
                        bump(&mut self.departed, slot.draws);
                        slot.item
                    } else {
                        let slot = &mut seen[j];
                        slot.draws += 1;
                        slot.item.clone()
                    }
                }
            }
        };
        self.gets += 1;
        item
    }
}

impl<T: Clone> TrainingBuffer<T> {
    pub fn new(cfg: BufferConfig) -> Result<Self, BufferError> {
        Self::with_rng(cfg, ChaCha8Rng::seed_from_u64(cfg.seed))
    }

    /// Builds an empty buffer whose selection stream continues from `rng`.
    pub fn with_rng(cfg: BufferConfig, rng: ChaCha8Rng) -> Result<Self, BufferError> {
        cfg.validate()?;
        let store = match cfg.policy {
            BufferPolicy::Fifo => Store::Fifo(VecDeque::with_capacity(cfg.capacity)),
            BufferPolicy::Firo => Store::Firo(Vec::with_capacity(cfg.capacity)),
            BufferPolicy::Reservoir => Store::Reservoir {
                seen: Vec::with_capacity(cfg.capacity),
                not_seen: Vec::with_capacity(cfg.capacity),
            },
        };
        let pace = (cfg.paced_samples_per_batch > 0).then_some(Pace {
            per_batch: cfg.paced_samples_per_batch as u64,
            credit: 0,
            in_batch: false,
            token: false,
        });
        Ok(TrainingBuffer {
            cfg,
            state: Mutex::new(State {
                store,
                rng,
                reception_over: false,
                aborted: false,
                puts: 0,
                gets: 0,
                evictions: 0,
                departed: Vec::new(),
                eviction_log: Vec::new(),
                threshold_crossed: false,
                pace,
            }),
            producer_cv: Condvar::new(),
            consumer_cv: Condvar::new(),
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Stores `item`, blocking while the policy (or the pacing credit) forbids it.
    pub fn put(&self, item: T) -> Result<(), BufferError> {
        let mut st = self.lock();
        loop {
            if st.aborted {
                return Err(BufferError::Aborted);
            }
            if st.reception_over {
                return Err(BufferError::PutAfterReceptionOver);
            }
            let pace_ok = match &st.pace {
                None => true,
                Some(p) if p.in_batch => p.token,
                Some(p) => st.puts < p.credit,
            };
            if pace_ok && st.can_put(&self.cfg) {
                break;
            }
            st = self.producer_cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if let Some(p) = st.pace.as_mut() {
            if p.in_batch {
                p.token = false;
            }
        }
        st.insert(item, &self.cfg);
        drop(st);
        self.consumer_cv.notify_all();
        Ok(())
    }

    /// Draws one sample; `Ok(None)` signals end of stream.
    pub fn get(&self) -> Result<Option<T>, BufferError> {
        let mut st = self.lock();
        loop {
            if st.aborted {
                return Err(BufferError::Aborted);
            }
            match st.get_status(&self.cfg) {
                GetStatus::Ready => break,
                GetStatus::Exhausted => return Ok(None),
                GetStatus::Blocked => {}
            }
            let mut wake_producer = false;
            if let Some(p) = st.pace.as_mut() {
                if p.in_batch && !p.token {
                    p.token = true;
                    wake_producer = true;
                }
            }
            if wake_producer {
                self.producer_cv.notify_all();
            }
            st = self.consumer_cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        let item = st.take();
        drop(st);
        self.producer_cv.notify_all();
        Ok(Some(item))
    }

    pub fn try_put(&self, item: T) -> Result<TryPut<T>, BufferError> {
        let mut st = self.lock();
        if st.aborted {
            return Err(BufferError::Aborted);
        }
        if st.reception_over {
            return Err(BufferError::PutAfterReceptionOver);
        }
        if !st.can_put(&self.cfg) {
            return Ok(TryPut::WouldBlock(item));
        }
        st.insert(item, &self.cfg);
        drop(st);
        self.consumer_cv.notify_all();
        Ok(TryPut::Stored)
    }

    pub fn try_get(&self) -> Result<TryGet<T>, BufferError> {
        let mut st = self.lock();
        if st.aborted {
            return Err(BufferError::Aborted);
        }
        let out = match st.get_status(&self.cfg) {
            GetStatus::Ready => TryGet::Item(st.take()),
            GetStatus::Blocked => TryGet::WouldBlock,
            GetStatus::Exhausted => TryGet::EndOfStream,
        };
        drop(st);
        self.producer_cv.notify_all();
        Ok(out)
    }

    /// Lifts threshold blocking; the buffer then drains to empty.
    pub fn signal_reception_over(&self) -> Result<(), BufferError> {
        let mut st = self.lock();
        if st.reception_over {
            return Err(BufferError::DoubleSignal);
        }
        // Under pacing the end of reception only lands at a batch boundary or
        // while the trainer is blocked waiting for a sample, so the draw
        // sequence does not depend on thread timing.
        loop {
            if st.aborted {
                return Err(BufferError::Aborted);
            }
            match &st.pace {
                Some(p) if p.in_batch && !p.token => {}
                _ => break,
            }
            st = self.producer_cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if let Some(p) = st.pace.as_mut() {
            p.token = false;
        }
        st.reception_over = true;
        drop(st);
        self.consumer_cv.notify_all();
        self.producer_cv.notify_all();
        Ok(())
    }

    pub fn is_reception_over(&self) -> bool {
        self.lock().reception_over
    }

    /// Wakes every waiter with [`BufferError::Aborted`]; used on server shutdown.
    pub fn abort(&self) {
        self.lock().aborted = true;
        self.consumer_cv.notify_all();
        self.producer_cv.notify_all();
    }

    /// Trainer hook before drawing a batch. A no-op without pacing.
    pub fn begin_batch(&self) -> Result<(), BufferError> {
        let mut st = self.lock();
        if st.pace.is_none() {
            return Ok(());
        }
        loop {
            if st.aborted {
                return Err(BufferError::Aborted);
            }
            let p = st.pace.expect("pacing enabled");
            if st.reception_over || st.puts >= p.credit || !st.can_put(&self.cfg) {
                break;
            }
            st = self.consumer_cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if let Some(p) = st.pace.as_mut() {
            p.in_batch = true;
            p.token = false;
        }
        Ok(())
    }

    /// Trainer hook after a batch: grants the producer its next credit.
    pub fn end_batch(&self) {
        let mut st = self.lock();
        let puts = st.puts;
        if let Some(p) = st.pace.as_mut() {
            p.in_batch = false;
            p.token = false;
            p.credit = p.credit.max(puts) + p.per_batch;
        }
        drop(st);
        self.producer_cv.notify_all();
    }

    /// Runs `f` while holding the buffer lock, blocking both producer and
    /// consumer for its duration.
    pub fn hold<R>(&self, f: impl FnOnce() -> R) -> R {
        let _guard = self.lock();
        f()
    }

    pub fn snapshot_stats(&self) -> BufferStats {
        let st = self.lock();
        let mut repeats = st.departed.clone();
        let (seen_count, unseen_count) = match &st.store {
            Store::Fifo(q) => (0, q.len()),
            Store::Firo(v) => (0, v.len()),
            Store::Reservoir { seen, not_seen } => {
                for s in seen {
                    bump(&mut repeats, s.draws);
                }
                (seen.len(), not_seen.len())
            }
        };
        BufferStats {
            population: st.population(),
            seen_count,
            unseen_count,
            puts: st.puts,
            gets: st.gets,
            evictions: st.evictions,
            repeats,
            reception_over: st.reception_over,
            threshold_crossed: st.threshold_crossed,
        }
    }

    pub fn take_evictions(&self) -> Vec<Eviction<T>> {
        std::mem::take(&mut self.lock().eviction_log)
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.lock().rng)
    }
}
