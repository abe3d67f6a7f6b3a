/// Destination rank of step `t` from `client_id`: round-robin over ranks,
/// starting at an offset given by the client id.
pub fn route_rank(client_id: u32, t: u32, n_ranks: usize) -> usize {
    assert!(n_ranks >= 1, "at least one rank");
    ((client_id as u64 + t as u64) % n_ranks as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn offset_by_client_id() {
        assert_eq!(route_rank(3, 0, 4), 3);
        assert_eq!(route_rank(3, 1, 4), 0);
        assert_eq!(route_rank(u32::MAX, u32::MAX, 1), 0);
    }

    #[test]
    fn hundred_steps_over_four_ranks_are_even() {
        let mut counts = [0; 4];
        for t in 0..100 {
            counts[route_rank(7, t, 4)] += 1;
        }
        assert_eq!(counts, [25; 4]);
    }

    proptest! {
        #[test]
        fn per_rank_counts_differ_by_at_most_one(client in any::<u32>(), steps in 0u32..500, ranks in 1usize..9) {
            let mut counts = vec![0u32; ranks];
            for t in 0..steps {
                counts[route_rank(client, t, ranks)] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
