//! Replays put/get/signal schedules against a buffer and an executable model
//! of each policy's contract.

use std::collections::{BTreeSet, VecDeque};

use surrogate_core::buffer::{BufferConfig, TrainingBuffer, TryGet, TryPut};
use surrogate_core::BufferPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Put,
    Get,
    Signal,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Replay {
    pub puts: u64,
    pub gets: u64,
    pub blocked_puts: u64,
    pub blocked_gets: u64,
    pub evictions: u64,
}

/// Runs `ops`, then signals (if the schedule did not) and drains the buffer.
/// Puts after the signal are skipped.
pub fn replay(
    policy: BufferPolicy,
    capacity: usize,
    threshold: usize,
    seed: u64,
    ops: &[Op],
) -> Result<Replay, String> {
    let cfg = BufferConfig {
        trace_evictions: true,
        ..BufferConfig::new(policy, capacity, threshold, seed)
    };
    let buf = TrainingBuffer::new(cfg).map_err(|e| e.to_string())?;
    let mut m = Model::new(policy, capacity, threshold);
    let mut r = Replay::default();
    let tail = std::iter::once(Op::Signal);
    for (step, op) in ops.iter().copied().chain(tail).enumerate() {
        let ctx = |msg: String| format!("step {step} ({op:?}): {msg}");
        match op {
            Op::Put if m.over => continue,
            Op::Put => {
                let id = r.puts + r.blocked_puts;
                let res = buf.try_put(id).map_err(|e| ctx(e.to_string()))?;
                let evicted: Vec<u64> = buf.take_evictions().into_iter().map(|e| e.item).collect();
                match res {
                    TryPut::WouldBlock(_) => {
                        if m.put_allowed() {
                            return Err(ctx("put blocked while the contract allows it".into()));
                        }
                        r.blocked_puts += 1;
                    }
                    TryPut::Stored => {
                        if !m.put_allowed() {
                            return Err(ctx("put accepted while the contract forbids it".into()));
                        }
                        m.put(id, &evicted).map_err(ctx)?;
                        r.puts += 1;
                        r.evictions += evicted.len() as u64;
                    }
                }
            }
            Op::Get => {
                let res = buf.try_get().map_err(|e| ctx(e.to_string()))?;
                m.get(&res).map_err(ctx)?;
                match res {
                    TryGet::Item(_) => r.gets += 1,
                    TryGet::WouldBlock => r.blocked_gets += 1,
                    TryGet::EndOfStream => {}
                }
            }
            Op::Signal if m.over => continue,
            Op::Signal => {
                buf.signal_reception_over()
                    .map_err(|e| ctx(e.to_string()))?;
                m.over = true;
                m.pop_at_signal = Some(m.population());
            }
        }
        let s = buf.snapshot_stats();
        if s.population != m.population() {
            return Err(ctx(format!(
                "population {} but model holds {}",
                s.population,
                m.population()
            )));
        }
    }

    // drain
    let at_signal = m.pop_at_signal.expect("signalled");
    let held = m.population();
    let mut drain_gets = 0usize;
    loop {
        let res = buf.try_get().map_err(|e| e.to_string())?;
        m.get(&res).map_err(|e| format!("drain: {e}"))?;
        match res {
            TryGet::Item(_) => {
                r.gets += 1;
                drain_gets += 1;
            }
            TryGet::EndOfStream => break,
            TryGet::WouldBlock => return Err("drain: get blocked after reception over".into()),
        }
        if drain_gets > at_signal + 1 {
            return Err("drain: more gets than samples held".into());
        }
    }
    if drain_gets != held {
        return Err(format!("drain: {drain_gets} gets for {held} held samples"));
    }

    let all: BTreeSet<u64> = m.stored.iter().copied().collect();
    match policy {
        BufferPolicy::Fifo | BufferPolicy::Firo => {
            if m.returned.len() as u64 != r.puts
                || m.returned.iter().copied().collect::<BTreeSet<_>>() != all
            {
                return Err("samples not returned exactly once".into());
            }
        }
        BufferPolicy::Reservoir => {
            let returned: BTreeSet<u64> = m.returned.iter().copied().collect();
            if returned != all {
                let lost: Vec<_> = all.difference(&returned).collect();
                return Err(format!("samples never returned: {lost:?}"));
            }
        }
    }
    Ok(r)
}

struct Model {
    policy: BufferPolicy,
    capacity: usize,
    threshold: usize,
    over: bool,
    pop_at_signal: Option<usize>,
    fifo: VecDeque<u64>,
    unseen: BTreeSet<u64>,
    seen: BTreeSet<u64>,
    stored: Vec<u64>,
    returned: Vec<u64>,
}

impl Model {
    fn new(policy: BufferPolicy, capacity: usize, threshold: usize) -> Self {
        Model {
            policy,
            capacity,
            threshold,
            over: false,
            pop_at_signal: None,
            fifo: VecDeque::new(),
            unseen: BTreeSet::new(),
            seen: BTreeSet::new(),
            stored: Vec::new(),
            returned: Vec::new(),
        }
    }

    fn population(&self) -> usize {
        match self.policy {
            BufferPolicy::Fifo => self.fifo.len(),
            _ => self.unseen.len() + self.seen.len(),
        }
    }

    fn put_allowed(&self) -> bool {
        match self.policy {
            BufferPolicy::Reservoir => self.unseen.len() < self.capacity,
            _ => self.population() < self.capacity,
        }
    }

    fn get_ready(&self) -> bool {
        let threshold = if self.policy == BufferPolicy::Fifo {
            0
        } else {
            self.threshold
        };
        if self.over {
            self.population() > 0
        } else {
            self.population() > threshold
        }
    }

    fn put(&mut self, id: u64, evicted: &[u64]) -> Result<(), String> {
        match self.policy {
            BufferPolicy::Fifo => {
                if !evicted.is_empty() {
                    return Err("FIFO evicted a sample".into());
                }
                self.fifo.push_back(id);
            }
            BufferPolicy::Firo => {
                if !evicted.is_empty() {
                    return Err("FIRO evicted a sample".into());
                }
                self.unseen.insert(id);
            }
            BufferPolicy::Reservoir => {
                let full = self.population() >= self.capacity;
                match (full, evicted) {
                    (false, []) => {}
                    (true, [victim]) => {
                        if !self.seen.remove(victim) {
                            return Err(format!("evicted sample {victim} was not seen"));
                        }
                    }
                    _ => {
                        return Err(format!(
                            "{} evictions with the buffer full={full}",
                            evicted.len()
                        ))
                    }
                }
                self.unseen.insert(id);
            }
        }
        self.stored.push(id);
        Ok(())
    }

    fn get(&mut self, res: &TryGet<u64>) -> Result<(), String> {
        let ready = self.get_ready();
        match res {
            TryGet::WouldBlock if ready => Err("get blocked while a sample is available".into()),
            TryGet::WouldBlock if self.over => Err("get blocked after reception over".into()),
            TryGet::WouldBlock => Ok(()),
            TryGet::EndOfStream if !self.over || self.population() > 0 => {
                Err("premature end of stream".into())
            }
            TryGet::EndOfStream => Ok(()),
            TryGet::Item(_) if !ready => {
                Err("get returned a sample below the read threshold".into())
            }
            TryGet::Item(id) => {
                let id = *id;
                self.returned.push(id);
                match self.policy {
                    BufferPolicy::Fifo => match self.fifo.pop_front() {
                        Some(front) if front == id => Ok(()),
                        front => Err(format!("FIFO returned {id}, expected {front:?}")),
                    },
                    BufferPolicy::Firo => {
                        if self.unseen.remove(&id) {
                            Ok(())
                        } else {
                            Err(format!("FIRO returned {id} which it does not hold"))
                        }
                    }
                    BufferPolicy::Reservoir => {
                        let held = self.unseen.remove(&id) || self.seen.remove(&id);
                        if !held {
                            return Err(format!("reservoir returned {id} which it does not hold"));
                        }
                        if !self.over {
                            self.seen.insert(id);
                        }
                        Ok(())
                    }
                }
            }
        }
    }
}
