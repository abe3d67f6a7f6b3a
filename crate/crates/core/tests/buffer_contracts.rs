mod common;

use std::sync::Arc;
use std::thread;

use proptest::prelude::*;
use surrogate_core::buffer::{BufferConfig, TrainingBuffer};
use surrogate_core::BufferPolicy;

use common::schedules::{replay, Op};

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![6 => Just(Op::Put), 5 => Just(Op::Get), 1 => Just(Op::Signal)]
}

fn schedule() -> impl Strategy<Value = (usize, usize, u64, Vec<Op>)> {
    (1usize..12).prop_flat_map(|cap| {
        (
            Just(cap),
            0..cap,
            any::<u64>(),
            prop::collection::vec(op(), 0..120),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fifo_schedules((cap, thr, seed, ops) in schedule()) {
        replay(BufferPolicy::Fifo, cap, thr, seed, &ops).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn firo_schedules((cap, thr, seed, ops) in schedule()) {
        replay(BufferPolicy::Firo, cap, thr, seed, &ops).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn reservoir_schedules((cap, thr, seed, ops) in schedule()) {
        replay(BufferPolicy::Reservoir, cap, thr, seed, &ops).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn reservoir_full_schedule_evicts() {
    let mut ops = vec![Op::Put; 4];
    ops.extend([Op::Get; 12]);
    ops.extend([Op::Put; 3]);
    let r = replay(BufferPolicy::Reservoir, 4, 1, 2, &ops).unwrap();
    assert!(r.evictions > 0);
}

/// Mean number of later insertions an element survives in a full container
/// that evicts uniformly at random.
#[test]
fn residency_is_capacity_minus_one() {
    let cap = 16;
    let cfg = BufferConfig {
        trace_evictions: true,
        ..BufferConfig::new(BufferPolicy::Reservoir, cap, 0, 5)
    };
    let b = TrainingBuffer::new(cfg).unwrap();
    let mut residency = Vec::new();
    for i in 0..20_000u64 {
        b.put(i).unwrap();
        while b.snapshot_stats().unseen_count > 0 {
            b.get().unwrap();
        }
        residency.extend(
            b.take_evictions()
                .iter()
                .map(|e| (e.evicted_at - e.inserted_at - 1) as f64),
        );
    }
    let mean = residency.iter().sum::<f64>() / residency.len() as f64;
    assert!(
        (mean - (cap - 1) as f64).abs() < 0.05 * (cap - 1) as f64,
        "mean residency {mean}"
    );
}

#[test]
fn concurrent_fifo_delivers_everything_in_order() {
    for policy in [BufferPolicy::Fifo, BufferPolicy::Firo] {
        let b = Arc::new(TrainingBuffer::new(BufferConfig::new(policy, 8, 3, 1)).unwrap());
        let producer = {
            let b = Arc::clone(&b);
            thread::spawn(move || {
                for i in 0..5000u32 {
                    b.put(i).unwrap();
                }
                b.signal_reception_over().unwrap();
            })
        };
        let mut got = Vec::new();
        while let Some(v) = b.get().unwrap() {
            got.push(v);
        }
        producer.join().unwrap();
        if policy == BufferPolicy::Fifo {
            assert_eq!(got, (0..5000).collect::<Vec<_>>());
        } else {
            got.sort_unstable();
            assert_eq!(got, (0..5000).collect::<Vec<_>>());
        }
    }
}

#[test]
fn concurrent_reservoir_loses_no_unseen_sample() {
    let b = Arc::new(
        TrainingBuffer::new(BufferConfig::new(BufferPolicy::Reservoir, 20, 5, 3)).unwrap(),
    );
    let producer = {
        let b = Arc::clone(&b);
        thread::spawn(move || {
            for i in 0..3000u32 {
                b.put(i).unwrap();
            }
            b.signal_reception_over().unwrap();
        })
    };
    let mut returned = vec![false; 3000];
    let mut gets = 0u64;
    while let Some(v) = b.get().unwrap() {
        returned[v as usize] = true;
        gets += 1;
    }
    producer.join().unwrap();
    assert!(returned.iter().all(|&r| r));
    assert_eq!(b.snapshot_stats().gets, gets);
}
