//! In-process all-reduce between trainer threads.
//!
//! Each round every rank deposits one [`Contribution`]; the last to arrive
//! combines them in rank-index order and every rank receives the same
//! [`RoundOutcome`]. A rank whose buffer is exhausted still takes part (with no
//! gradient) so that all replicas apply identical updates; training ends on
//! the first round with no gradient at all.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReduceError {
    #[error("all-reduce timed out after {0:?} waiting for peers")]
    Timeout(Duration),
    #[error("all-reduce aborted")]
    Aborted,
    #[error("gradient of {got} values from rank {rank}, expected {expected}")]
    Shape {
        rank: usize,
        expected: usize,
        got: usize,
    },
}

/// Element-wise mean, summed in the order given then scaled once.
pub fn allreduce_mean(vectors: &[&[f32]]) -> Vec<f32> {
    assert!(!vectors.is_empty(), "mean of no vectors");
    let mut acc = vectors[0].to_vec();
    for v in &vectors[1..] {
        assert_eq!(v.len(), acc.len(), "all-reduce shapes differ");
        for (a, b) in acc.iter_mut().zip(v.iter()) {
            *a += *b;
        }
    }
    if vectors.len() > 1 {
        let n = vectors.len() as f32;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub grads: Option<Vec<f32>>,
    pub samples: u64,
    /// Batch loss times sample count.
    pub weighted_loss: f64,
    pub param_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Mean over the ranks that supplied a gradient.
    pub mean: Option<Vec<f32>>,
    pub contributors: usize,
    pub samples: u64,
    /// Sample-weighted mean loss over contributing ranks.
    pub loss: f64,
    /// Parameter hash of every rank before this round's update.
    pub hashes: Vec<u64>,
}

impl RoundOutcome {
    pub fn replicas_agree(&self) -> bool {
        self.hashes.windows(2).all(|w| w[0] == w[1])
    }
}

struct ReduceState {
    generation: u64,
    slots: Vec<Option<Contribution>>,
    arrived: usize,
    last: Option<Arc<RoundOutcome>>,
    aborted: bool,
}

pub struct AllReducer {
    n_ranks: usize,
    timeout: Duration,
    state: Mutex<ReduceState>,
    cv: Condvar,
}

impl AllReducer {
    pub fn new(n_ranks: usize, timeout: Duration) -> Self {
        assert!(n_ranks >= 1);
        AllReducer {
            n_ranks,
            timeout,
            state: Mutex::new(ReduceState {
                generation: 0,
                slots: vec![None; n_ranks],
                arrived: 0,
                last: None,
                aborted: false,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn abort(&self) {
        self.state.lock().unwrap_or_else(|p| p.into_inner()).aborted = true;
        self.cv.notify_all();
    }

    pub fn exchange(
        &self,
        rank: usize,
        contribution: Contribution,
    ) -> Result<Arc<RoundOutcome>, ReduceError> {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if st.aborted {
            return Err(ReduceError::Aborted);
        }
        let generation = st.generation;
        debug_assert!(st.slots[rank].is_none(), "rank {rank} contributed twice");
        st.slots[rank] = Some(contribution);
        st.arrived += 1;
        if st.arrived == self.n_ranks {
            let contributions: Vec<Contribution> = st
                .slots
                .iter_mut()
                .map(|s| s.take().expect("all ranks arrived"))
                .collect();
            let outcome = combine(&contributions);
            st.arrived = 0;
            st.generation += 1;
            match outcome {
                Ok(o) => st.last = Some(Arc::new(o)),
                Err(e) => {
                    st.aborted = true;
                    self.cv.notify_all();
                    return Err(e);
                }
            }
            let out = Arc::clone(st.last.as_ref().expect("just set"));
            self.cv.notify_all();
            return Ok(out);
        }
        let deadline = Instant::now() + self.timeout;
        while st.generation == generation {
            if st.aborted {
                return Err(ReduceError::Aborted);
            }
            let now = Instant::now();
            if now >= deadline {
                st.aborted = true;
                self.cv.notify_all();
                return Err(ReduceError::Timeout(self.timeout));
            }
            st = self
                .cv
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        if st.aborted && st.last.is_none() {
            return Err(ReduceError::Aborted);
        }
        Ok(Arc::clone(st.last.as_ref().expect("round completed")))
    }
}

fn combine(contributions: &[Contribution]) -> Result<RoundOutcome, ReduceError> {
    let grads: Vec<(usize, &[f32])> = contributions
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.grads.as_deref().map(|g| (r, g)))
        .collect();
    if let Some(&(_, first)) = grads.first() {
        for &(rank, g) in &grads {
            if g.len() != first.len() {
                return Err(ReduceError::Shape {
                    rank,
                    expected: first.len(),
                    got: g.len(),
                });
            }
        }
    }
    let views: Vec<&[f32]> = grads.iter().map(|&(_, g)| g).collect();
    let samples: u64 = contributions.iter().map(|c| c.samples).sum();
    let weighted: f64 = contributions.iter().map(|c| c.weighted_loss).sum();
    Ok(RoundOutcome {
        mean: (!views.is_empty()).then(|| allreduce_mean(&views)),
        contributors: views.len(),
        samples,
        loss: if samples > 0 {
            weighted / samples as f64
        } else {
            0.0
        },
        hashes: contributions.iter().map(|c| c.param_hash).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::thread;

    fn contrib(grads: Vec<f32>) -> Contribution {
        Contribution {
            grads: Some(grads),
            samples: 1,
            weighted_loss: 0.0,
            param_hash: 0,
        }
    }

    #[test]
    fn single_rank_is_identity() {
        let g = vec![0.1f32, -3.0, 7.5];
        assert_eq!(allreduce_mean(&[&g]), g);
        let r = AllReducer::new(1, Duration::from_secs(1));
        assert_eq!(
            r.exchange(0, contrib(g.clone())).unwrap().mean.as_deref(),
            Some(&g[..])
        );
    }

    #[test]
    fn opposite_gradients_cancel() {
        let g = vec![0.25f32, -1.5, 3.0];
        let neg: Vec<f32> = g.iter().map(|v| -v).collect();
        assert!(allreduce_mean(&[&g, &neg]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn four_ranks_match_sequential_oracle_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let vs: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..257).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut oracle = vec![0.0f32; 257];
        for (i, o) in oracle.iter_mut().enumerate() {
            let mut s = vs[0][i];
            s += vs[1][i];
            s += vs[2][i];
            s += vs[3][i];
            *o = s / 4.0;
        }
        let reducer = Arc::new(AllReducer::new(4, Duration::from_secs(5)));
        let handles: Vec<_> = (0..4)
            .map(|rank| {
                let reducer = Arc::clone(&reducer);
                let g = vs[rank].clone();
                // stagger arrivals so the completing rank varies
                thread::spawn(move || {
                    thread::sleep(Duration::from_millis(((3 - rank) * 5) as u64));
                    reducer.exchange(rank, contrib(g)).unwrap()
                })
            })
            .collect();
        for h in handles {
            let out = h.join().unwrap();
            let mean = out.mean.as_ref().unwrap();
            assert!(mean
                .iter()
                .zip(&oracle)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn many_rounds_stay_in_lockstep() {
        let reducer = Arc::new(AllReducer::new(3, Duration::from_secs(5)));
        let handles: Vec<_> = (0..3)
            .map(|rank| {
                let reducer = Arc::clone(&reducer);
                thread::spawn(move || {
                    (0..200u64)
                        .map(|round| {
                            let c = Contribution {
                                grads: (rank != 2 || round % 2 == 0)
                                    .then(|| vec![(rank as u64 + round) as f32]),
                                samples: 1,
                                weighted_loss: 1.0,
                                param_hash: round,
                            };
                            let out = reducer.exchange(rank, c).unwrap();
                            assert!(out.replicas_agree());
                            assert_eq!(out.hashes[0], round);
                            out.mean.as_ref().unwrap()[0]
                        })
                        .collect::<Vec<f32>>()
                })
            })
            .collect();
        let results: Vec<Vec<f32>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(results[0], results[1]);
        assert_eq!(results[1], results[2]);
        // round 1: rank 2 abstains, mean over ranks 0 and 1 of (1, 2)
        assert_eq!(results[0][1], 1.5);
    }

    #[test]
    fn missing_peer_times_out() {
        let reducer = AllReducer::new(2, Duration::from_millis(50));
        assert_eq!(
            reducer.exchange(0, contrib(vec![1.0])),
            Err(ReduceError::Timeout(Duration::from_millis(50)))
        );
    }

    #[test]
    fn abort_releases_waiters() {
        let reducer = Arc::new(AllReducer::new(2, Duration::from_secs(10)));
        let r2 = Arc::clone(&reducer);
        let waiter = thread::spawn(move || r2.exchange(0, contrib(vec![1.0])));
        thread::sleep(Duration::from_millis(20));
        reducer.abort();
        assert_eq!(waiter.join().unwrap(), Err(ReduceError::Aborted));
    }
}
