use std::collections::{BTreeMap, BTreeSet};

/// Time steps received so far, per (client id, simulation index).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReceptionLog {
    entries: BTreeMap<(u32, u32), BTreeSet<u32>>,
    total: usize,
}

impl ReceptionLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a step; `false` if it was already present.
    pub fn insert(&mut self, client_id: u32, sim_index: u32, t: u32) -> bool {
        let fresh = self
            .entries
            .entry((client_id, sim_index))
            .or_default()
            .insert(t);
        if fresh {
            self.total += 1;
        }
        fresh
    }

    pub fn contains(&self, client_id: u32, sim_index: u32, t: u32) -> bool {
        self.entries
            .get(&(client_id, sim_index))
            .is_some_and(|s| s.contains(&t))
    }

    /// Number of unique steps recorded.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn steps(&self, client_id: u32, sim_index: u32) -> impl Iterator<Item = u32> + '_ {
        self.entries
            .get(&(client_id, sim_index))
            .into_iter()
            .flatten()
            .copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), &BTreeSet<u32>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ((u32, u32), BTreeSet<u32>)>) -> Self {
        let entries: BTreeMap<_, _> = entries.into_iter().collect();
        let total = entries.values().map(BTreeSet::len).sum();
        ReceptionLog { entries, total }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedups_exact_triples() {
        let mut log = ReceptionLog::new();
        assert!(log.insert(1, 2, 3));
        assert!(!log.insert(1, 2, 3));
        assert!(log.insert(1, 2, 4));
        assert!(log.insert(2, 2, 3));
        assert!(log.contains(1, 2, 4));
        assert!(!log.contains(1, 3, 4));
        assert_eq!(log.len(), 3);
        assert_eq!(log.steps(1, 2).collect::<Vec<_>>(), vec![3, 4]);
        let copy = ReceptionLog::from_entries(log.iter().map(|(k, v)| (k, v.clone())));
        assert_eq!(copy, log);
    }
}
