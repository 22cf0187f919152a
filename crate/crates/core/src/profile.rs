//! Per-cluster, per-agent most-recently-hit lists of local vector ids.
//!
//! A profile lets an agent that revisits a shared cluster scan the vectors it
//! hit before first, without changing the cluster layout other agents see.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    /// Local ids, most recently promoted first.
    entries: Vec<u32>,
}

impl AgentProfile {
    pub fn from_entries(entries: Vec<u32>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Moves (or inserts) `hits` to the front, keeping their order, then
    /// truncates to `p_size`.
    pub fn promote(&mut self, hits: &[u32], p_size: usize) {
        let mut next: Vec<u32> = Vec::with_capacity(p_size.min(hits.len() + self.entries.len()));
        for h in hits {
            if !next.contains(h) {
                next.push(*h);
            }
        }
        for e in &self.entries {
            if !next.contains(e) {
                next.push(*e);
            }
        }
        next.truncate(p_size);
        self.entries = next;
    }

    /// Profile entries present in `default_order` come first (profile order),
    /// the rest follow in their original relative order.
    pub fn reorder(&self, default_order: &[u32]) -> Vec<u32> {
        if self.entries.is_empty() {
            return default_order.to_vec();
        }
        let max = default_order.iter().copied().max().unwrap_or(0) as usize;
        let mut present = vec![false; max + 1];
        for id in default_order {
            present[*id as usize] = true;
        }
        let mut taken = vec![false; max + 1];
        let mut out = Vec::with_capacity(default_order.len());
        for e in &self.entries {
            let i = *e as usize;
            if i <= max && present[i] && !taken[i] {
                taken[i] = true;
                out.push(*e);
            }
        }
        out.extend(default_order.iter().filter(|id| !taken[**id as usize]));
        out
    }

    /// Local id `removed` no longer exists and the former `moved_from` now
    /// lives at `removed` (swap-with-last compaction).
    pub(crate) fn on_swap_remove(&mut self, removed: u32, moved_from: u32) {
        self.entries.retain(|e| *e != removed);
        if moved_from != removed {
            for e in &mut self.entries {
                if *e == moved_from {
                    *e = removed;
                }
            }
        }
    }
}

/// Scan order for an agent over a cluster whose default order is `default_order`.
pub fn profile_reorder(profile: Option<&AgentProfile>, default_order: &[u32]) -> Vec<u32> {
    match profile {
        Some(p) => p.reorder(default_order),
        None => default_order.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_profile_is_identity() {
        let ids: Vec<u32> = (0..10).collect();
        assert_eq!(AgentProfile::default().reorder(&ids), ids);
        assert_eq!(profile_reorder(None, &ids), ids);
    }

    #[test]
    fn stated_reorder_rule() {
        let p = AgentProfile::from_entries(vec![7, 3]);
        let ids: Vec<u32> = (0..10).collect();
        assert_eq!(p.reorder(&ids), vec![7, 3, 0, 1, 2, 4, 5, 6, 8, 9]);
    }

    #[test]
    fn dead_entries_are_skipped() {
        let p = AgentProfile::from_entries(vec![42, 2]);
        assert_eq!(p.reorder(&[0, 1, 2]), vec![2, 0, 1]);
    }

    #[test]
    fn promote_rules() {
        let mut p = AgentProfile::default();
        p.promote(&[4, 1], 8);
        assert_eq!(p.entries(), &[4, 1]);

        p.promote(&[9], 8);
        p.promote(&[1], 8);
        assert_eq!(p.entries(), &[1, 9, 4]);

        let mut p = AgentProfile::default();
        for i in 0..(8 + 5) {
            p.promote(&[i], 8);
        }
        assert_eq!(p.len(), 8);
        assert_eq!(p.entries()[0], 12);
        assert!(!p.entries().contains(&4));
        assert!(p.entries().contains(&5));
    }

    #[test]
    fn swap_remove_remaps() {
        let mut p = AgentProfile::from_entries(vec![5, 2, 9]);
        p.on_swap_remove(2, 9);
        assert_eq!(p.entries(), &[5, 2]);
    }

    proptest! {
        #[test]
        fn reorder_is_permutation(entries in proptest::collection::vec(0u32..40, 0..20),
                                  n in 1u32..30) {
            let ids: Vec<u32> = (0..n).rev().collect();
            let p = AgentProfile::from_entries(entries);
            let mut out = p.reorder(&ids);
            out.sort_unstable();
            let mut want = ids.clone();
            want.sort_unstable();
            prop_assert_eq!(out, want);
        }
    }
}
