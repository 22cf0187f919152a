//! Per-agent three-level cluster cache.
//!
//! L0 is a table of tiny clusters keyed by FSM state, holding the agent's most
//! recently touched vectors. L1 holds up to `N_p` intermediate clusters built
//! from search neighborhoods and L0 write-backs. Both levels hold copies: the
//! owning cluster of every item is always an L2 cluster. A copy carries the
//! item version it was taken from, and scans drop copies whose version is no
//! longer current.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::config::CacheConfig;
use crate::fsm::StateKey;
use crate::topk::TopK;
use crate::vector::{ItemId, Metric, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedCopy {
    pub item: ItemId,
    pub version: u64,
    pub vector: Vector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sum(Vec<f64>);

impl Sum {
    fn add(&mut self, v: &[f32]) {
        for (s, x) in self.0.iter_mut().zip(v) {
            *s += f64::from(*x);
        }
    }

    fn sub(&mut self, v: &[f32]) {
        for (s, x) in self.0.iter_mut().zip(v) {
            *s -= f64::from(*x);
        }
    }

    fn mean(&self, n: usize) -> Vec<f32> {
        self.0.iter().map(|s| (s / n.max(1) as f64) as f32).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct L0Entry {
    pub key: StateKey,
    /// Oldest first.
    copies: VecDeque<CachedCopy>,
    sum: Sum,
    pub freq: u64,
    pub last_access: u64,
}

impl L0Entry {
    pub fn copies(&self) -> impl Iterator<Item = &CachedCopy> {
        self.copies.iter()
    }

    pub fn len(&self) -> usize {
        self.copies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.copies.is_empty()
    }

    pub fn centroid(&self) -> Vec<f32> {
        self.sum.mean(self.copies.len())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct L1Cluster {
    pub slot: u64,
    copies: Vec<CachedCopy>,
    sum: Sum,
    delta: f32,
    delta_stale: bool,
}

impl L1Cluster {
    pub fn copies(&self) -> &[CachedCopy] {
        &self.copies
    }

    pub fn len(&self) -> usize {
        self.copies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.copies.is_empty()
    }

    pub fn centroid(&self) -> Vec<f32> {
        self.sum.mean(self.copies.len())
    }

    fn refresh_delta(&mut self, metric: Metric) -> f32 {
        if self.delta_stale {
            let c = self.centroid();
            let vs: Vec<&[f32]> = self.copies.iter().map(|c| &*c.vector).collect();
            self.delta = crate::vector::deviation(&vs, &c, metric).unwrap_or(0.0);
            self.delta_stale = false;
        }
        self.delta
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }
}

/// Work the engine must perform after a cache mutation.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheEvent {
    /// An L1 cluster reached capacity and left the cache; its copies whose
    /// items are still fresh must become one new L2 cluster.
    MergeDown { slot: u64, copies: Vec<CachedCopy> },
}

/// How a scan treats a cached copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyState {
    /// The copied version is no longer current; the copy is dropped.
    Dead,
    /// Live but outside the query's scope set.
    Hidden,
    Visible,
}

/// Which level a search was answered from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L0,
    L1,
    #[default]
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentCache {
    cfg: CacheConfig,
    metric: Metric,
    dimension: usize,
    l0: Vec<L0Entry>,
    l1: Vec<L1Cluster>,
    #[serde(skip)]
    l0_index: HashMap<ItemId, StateKey>,
    #[serde(skip)]
    l1_index: HashMap<ItemId, u64>,
    next_slot: u64,
    clock: u64,
    window: VecDeque<f32>,
    completed: u64,
}

impl AgentCache {
    pub fn new(cfg: CacheConfig, metric: Metric, dimension: usize) -> Self {
        Self {
            cfg,
            metric,
            dimension,
            l0: Vec::new(),
            l1: Vec::new(),
            l0_index: HashMap::new(),
            l1_index: HashMap::new(),
            next_slot: 0,
            clock: 0,
            window: VecDeque::new(),
            completed: 0,
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn l0(&self) -> &[L0Entry] {
        &self.l0
    }

    pub fn l1(&self) -> &[L1Cluster] {
        &self.l1
    }

    pub fn l0_entry(&self, key: StateKey) -> Option<&L0Entry> {
        self.l0.iter().find(|e| e.key == key)
    }

    pub fn l1_cluster(&self, slot: u64) -> Option<&L1Cluster> {
        self.l1.iter().find(|c| c.slot == slot)
    }

    pub fn has_l0(&self, key: StateKey) -> bool {
        self.l0.iter().any(|e| e.key == key && !e.is_empty())
    }

    pub fn has_l1(&self, slot: u64) -> bool {
        self.l1.iter().any(|c| c.slot == slot)
    }

    pub fn in_l0(&self, item: ItemId) -> bool {
        self.l0_index.contains_key(&item)
    }

    pub fn in_l1(&self, item: ItemId) -> bool {
        self.l1_index.contains_key(&item)
    }

    pub fn cached_vectors(&self) -> usize {
        self.l0.iter().map(L0Entry::len).sum::<usize>() + self.l1.iter().map(L1Cluster::len).sum::<usize>()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// L0 entries in scan order: `predicted` first, then by centroid distance.
    pub fn l0_order(&self, q: &[f32], predicted: Option<StateKey>) -> Vec<StateKey> {
        let mut rest: Vec<(f32, StateKey)> = self
            .l0
            .iter()
            .filter(|e| Some(e.key) != predicted && !e.is_empty())
            .map(|e| (self.metric.distance(q, &e.centroid()), e.key))
            .collect();
        rest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        predicted
            .filter(|k| self.has_l0(*k))
            .into_iter()
            .chain(rest.into_iter().map(|r| r.1))
            .collect()
    }

    /// L1 slots in scan order: `predicted` first, then by centroid distance.
    pub fn l1_order(&self, q: &[f32], predicted: Option<u64>) -> Vec<u64> {
        let mut rest: Vec<(f32, u64)> = self
            .l1
            .iter()
            .filter(|c| Some(c.slot) != predicted && !c.is_empty())
            .map(|c| (self.metric.distance(q, &c.centroid()), c.slot))
            .collect();
        rest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        predicted
            .filter(|s| self.has_l1(*s))
            .into_iter()
            .chain(rest.into_iter().map(|r| r.1))
            .collect()
    }

    /// Drops copies whose version is no longer live.
    fn purge<F: Fn(ItemId, u64) -> CopyState>(&mut self, state: &F) {
        let live = |item, version| state(item, version) != CopyState::Dead;
        for e in &mut self.l0 {
            let before = e.copies.len();
            let (sum, idx) = (&mut e.sum, &mut self.l0_index);
            e.copies.retain(|c| {
                let keep = live(c.item, c.version);
                if !keep {
                    sum.sub(&c.vector);
                    idx.remove(&c.item);
                }
                keep
            });
            if e.copies.len() != before && e.copies.is_empty() {
                e.sum = Sum(vec![0.0; self.dimension]);
            }
        }
        for c in &mut self.l1 {
            let before = c.copies.len();
            let (sum, idx) = (&mut c.sum, &mut self.l1_index);
            c.copies.retain(|cp| {
                let keep = live(cp.item, cp.version);
                if !keep {
                    sum.sub(&cp.vector);
                    idx.remove(&cp.item);
                }
                keep
            });
            if c.copies.len() != before {
                c.delta_stale = true;
            }
        }
        self.l1.retain(|c| !c.copies.is_empty());
    }

    /// Scans every visible L0 copy (predicted entry first) into `top` and
    /// records it in `seen`. Returns the number of vectors scanned.
    pub fn scan_l0<F: Fn(ItemId, u64) -> CopyState>(
        &mut self,
        q: &[f32],
        predicted: Option<StateKey>,
        state: &F,
        top: &mut TopK,
        seen: &mut HashSet<ItemId>,
    ) -> usize {
        self.purge(state);
        let mut scanned = 0;
        for key in self.l0_order(q, predicted) {
            let e = self.l0.iter().find(|e| e.key == key).expect("ordered from table");
            for c in &e.copies {
                if state(c.item, c.version) == CopyState::Visible && seen.insert(c.item) {
                    top.push(self.metric.distance(q, &c.vector), c.item);
                    scanned += 1;
                }
            }
        }
        scanned
    }

    /// Scans up to `l1_nprobe` L1 clusters (predicted first) into `top`,
    /// skipping copies already in `seen`.
    pub fn scan_l1<F: Fn(ItemId, u64) -> CopyState>(
        &mut self,
        q: &[f32],
        predicted: Option<u64>,
        state: &F,
        top: &mut TopK,
        seen: &mut HashSet<ItemId>,
    ) -> usize {
        self.purge(state);
        let mut scanned = 0;
        for slot in self.l1_order(q, predicted).into_iter().take(self.cfg.l1_nprobe.max(1)) {
            let c = self.l1.iter().find(|c| c.slot == slot).expect("ordered from table");
            for cp in &c.copies {
                if state(cp.item, cp.version) == CopyState::Visible && seen.insert(cp.item) {
                    top.push(self.metric.distance(q, &cp.vector), cp.item);
                    scanned += 1;
                }
            }
        }
        scanned
    }

    /// Records an access to an L0 entry (frequency and recency).
    pub fn touch_l0(&mut self, key: StateKey) {
        let now = self.tick();
        if let Some(e) = self.l0.iter_mut().find(|e| e.key == key) {
            e.freq += 1;
            e.last_access = now;
        }
    }

    /// Mean of the windowed per-query top-k distances, once at least `W/2`
    /// queries have completed.
    pub fn d_agent(&self) -> Option<f32> {
        if self.window.is_empty() || (self.completed as usize) * 2 < self.cfg.window_w {
            return None;
        }
        Some(self.window.iter().map(|d| f64::from(*d)).sum::<f64>() as f32 / self.window.len() as f32)
    }

    pub fn completed_queries(&self) -> u64 {
        self.completed
    }

    /// Feeds a completed (full or verified) query's top-k distances into the
    /// window.
    pub fn record_completed(&mut self, distances: &[f32]) {
        if distances.is_empty() {
            return;
        }
        let mean = distances
            .iter()
            .map(|d| f64::from(self.metric.to_length(*d)))
            .sum::<f64>()
            / distances.len() as f64;
        self.window.push_back(mean as f32);
        while self.window.len() > self.cfg.window_w.max(1) {
            self.window.pop_front();
        }
        self.completed += 1;
    }

    /// True when each of the best `k` candidates in `top` is closer than
    /// `α_et · d_agent`.
    pub fn should_terminate(&self, top: &TopK, k: usize) -> bool {
        if self.cfg.alpha_et <= 0.0 || k == 0 {
            return false;
        }
        let Some(worst) = top.as_slice().get(k - 1) else {
            return false;
        };
        let Some(d_agent) = self.d_agent() else {
            return false;
        };
        self.metric.to_length(worst.0) < self.cfg.alpha_et * d_agent
    }

    /// Appends copies to the L0 entry keyed by `key`. Entry overflow writes
    /// the oldest copies back to L1; table overflow writes the least
    /// frequently used entry back to L1.
    pub fn promote_to_l0(&mut self, key: StateKey, items: Vec<CachedCopy>) -> Vec<CacheEvent> {
        let mut events = Vec::new();
        if items.is_empty() {
            return events;
        }
        let now = self.tick();
        if !self.l0.iter().any(|e| e.key == key) {
            if self.l0.len() >= self.cfg.n_p {
                let victim = self
                    .l0
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.freq.cmp(&b.1.freq).then(a.1.last_access.cmp(&b.1.last_access)))
                    .map(|(i, _)| i)
                    .expect("table is full");
                let e = self.l0.remove(victim);
                for c in &e.copies {
                    self.l0_index.remove(&c.item);
                }
                for c in e.copies {
                    events.extend(self.write_back(c));
                }
            }
            self.l0.push(L0Entry {
                key,
                copies: VecDeque::new(),
                sum: Sum(vec![0.0; self.dimension]),
                freq: 0,
                last_access: now,
            });
        }
        let mut overflow = Vec::new();
        for c in items {
            if let Some(prev) = self.l0_index.get(&c.item).copied() {
                let e = self.l0.iter_mut().find(|e| e.key == prev).expect("indexed entry");
                if let Some(pos) = e.copies.iter().position(|x| x.item == c.item) {
                    let old = e.copies.remove(pos).expect("position is valid");
                    e.sum.sub(&old.vector);
                }
            }
            let e = self.l0.iter_mut().find(|e| e.key == key).expect("entry exists");
            e.sum.add(&c.vector);
            self.l0_index.insert(c.item, key);
            e.copies.push_back(c);
            while e.copies.len() > self.cfg.l0_capacity {
                let old = e.copies.pop_front().expect("over capacity");
                e.sum.sub(&old.vector);
                self.l0_index.remove(&old.item);
                overflow.push(old);
            }
        }
        let e = self.l0.iter_mut().find(|e| e.key == key).expect("entry exists");
        e.freq += 1;
        e.last_access = now;
        self.l0.retain(|e| !e.copies.is_empty() || e.key == key);
        for c in overflow {
            events.extend(self.write_back(c));
        }
        events
    }

    fn nearest_l1(&self, v: &[f32]) -> Option<(usize, f32)> {
        let mut best: Option<(usize, f32, u64)> = None;
        for (i, c) in self.l1.iter().enumerate() {
            let d = self.metric.length(v, &c.centroid());
            if best.is_none_or(|b| d < b.1 || (d == b.1 && c.slot < b.2)) {
                best = Some((i, d, c.slot));
            }
        }
        best.map(|b| (b.0, b.1))
    }

    /// L1 slot whose centroid is nearest to `v`.
    pub fn nearest_l1_slot(&self, v: &[f32]) -> Option<u64> {
        self.nearest_l1(v).map(|(i, _)| self.l1[i].slot)
    }

    /// Index of the cluster that should receive copies near `anchor`: the
    /// nearest one, unless it is farther than the join radius and a slot is
    /// free.
    fn target_l1(&mut self, anchor: &[f32]) -> usize {
        if let Some((i, d)) = self.nearest_l1(anchor) {
            let delta = self.l1[i].refresh_delta(self.metric);
            let joinable = d <= self.cfg.l1_join_factor * delta;
            if joinable || self.l1.len() >= self.cfg.n_p {
                return i;
            }
        }
        self.next_slot += 1;
        self.l1.push(L1Cluster {
            slot: self.next_slot,
            copies: Vec::new(),
            sum: Sum(vec![0.0; self.dimension]),
            delta: 0.0,
            delta_stale: false,
        });
        self.l1.len() - 1
    }

    /// Adds copies to cluster `i`, merging it down when it reaches capacity.
    /// Returns the number of copies added.
    fn add_to_l1(&mut self, mut i: usize, anchor: &[f32], items: Vec<CachedCopy>, events: &mut Vec<CacheEvent>) -> usize {
        let mut added = 0;
        for c in items {
            if self.l1_index.contains_key(&c.item) {
                continue;
            }
            if i >= self.l1.len() {
                i = self.target_l1(anchor);
            }
            let cl = &mut self.l1[i];
            cl.sum.add(&c.vector);
            cl.delta_stale = true;
            self.l1_index.insert(c.item, cl.slot);
            cl.copies.push(c);
            added += 1;
            if cl.copies.len() >= self.cfg.l1_capacity {
                let cl = self.l1.remove(i);
                for c in &cl.copies {
                    self.l1_index.remove(&c.item);
                }
                events.push(CacheEvent::MergeDown {
                    slot: cl.slot,
                    copies: cl.copies,
                });
                i = usize::MAX;
            }
        }
        added
    }

    fn write_back(&mut self, c: CachedCopy) -> Vec<CacheEvent> {
        let mut events = Vec::new();
        if self.l1_index.contains_key(&c.item) {
            return events;
        }
        let v = c.vector.clone();
        let i = self.target_l1(&v);
        self.add_to_l1(i, &v, vec![c], &mut events);
        events
    }

    /// Inserts a search neighborhood into the L1 cluster nearest to `q`.
    /// Returns the number of new copies and any merge-down events.
    pub fn l1_capture(&mut self, q: &[f32], results: Vec<CachedCopy>) -> (usize, Vec<CacheEvent>) {
        let mut events = Vec::new();
        let fresh: Vec<CachedCopy> = results
            .into_iter()
            .filter(|c| !self.l1_index.contains_key(&c.item))
            .collect();
        if fresh.is_empty() {
            return (0, events);
        }
        let i = self.target_l1(q);
        let added = self.add_to_l1(i, q, fresh, &mut events);
        (added, events)
    }

    /// Removes every copy of `item` from both levels.
    pub fn remove_item(&mut self, item: ItemId) {
        if let Some(key) = self.l0_index.remove(&item) {
            if let Some(e) = self.l0.iter_mut().find(|e| e.key == key) {
                if let Some(pos) = e.copies.iter().position(|c| c.item == item) {
                    let old = e.copies.remove(pos).expect("position is valid");
                    e.sum.sub(&old.vector);
                }
            }
        }
        if let Some(slot) = self.l1_index.remove(&item) {
            if let Some(c) = self.l1.iter_mut().find(|c| c.slot == slot) {
                if let Some(pos) = c.copies.iter().position(|x| x.item == item) {
                    let old = c.copies.swap_remove(pos);
                    c.sum.sub(&old.vector);
                    c.delta_stale = true;
                }
            }
            self.l1.retain(|c| !c.copies.is_empty());
        }
    }

    /// Forces every L1 cluster out as a merge-down event.
    pub fn flush_l1(&mut self) -> Vec<CacheEvent> {
        self.l1_index.clear();
        std::mem::take(&mut self.l1)
            .into_iter()
            .map(|c| CacheEvent::MergeDown {
                slot: c.slot,
                copies: c.copies,
            })
            .collect()
    }

    /// Rebuilds the item indexes (they are not serialized).
    pub fn rebuild_indexes(&mut self) {
        self.l0_index = self
            .l0
            .iter()
            .flat_map(|e| e.copies.iter().map(move |c| (c.item, e.key)))
            .collect();
        self.l1_index = self
            .l1
            .iter()
            .flat_map(|cl| cl.copies.iter().map(move |c| (c.item, cl.slot)))
            .collect();
    }

    /// Drops both levels (the window and counters are kept).
    pub fn clear(&mut self) {
        self.l0.clear();
        self.l1.clear();
        self.l0_index.clear();
        self.l1_index.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn copy(item: u64, v: &[f32]) -> CachedCopy {
        CachedCopy {
            item,
            version: 0,
            vector: Arc::from(v),
        }
    }

    fn cache(l0_cap: usize, l1_cap: usize) -> AgentCache {
        AgentCache::new(
            CacheConfig {
                l0_capacity: l0_cap,
                l1_capacity: l1_cap,
                n_p: 4,
                window_w: 4,
                ..CacheConfig::default()
            },
            Metric::SquaredEuclidean,
            2,
        )
    }

    #[test]
    fn promote_into_empty_entry() {
        let mut c = cache(8, 100);
        let ev = c.promote_to_l0(1, (0..5).map(|i| copy(i, &[i as f32, 0.0])).collect());
        assert!(ev.is_empty());
        assert_eq!(c.l0_entry(1).unwrap().len(), 5);
    }

    #[test]
    fn overflow_writes_back_exactly_one() {
        let mut c = cache(8, 100);
        c.promote_to_l0(1, (0..9).map(|i| copy(i, &[i as f32, 0.0])).collect());
        assert_eq!(c.l0_entry(1).unwrap().len(), 8);
        assert_eq!(c.l1().iter().map(L1Cluster::len).sum::<usize>(), 1);
        assert!(c.in_l1(0) && !c.in_l0(0));
        let mut top = TopK::new(1);
        c.scan_l1(&[0.0, 0.0], None, &|_, _| CopyState::Visible, &mut top, &mut HashSet::new());
        assert_eq!(top.as_slice(), &[(0.0, 0)]);
    }

    #[test]
    fn table_overflow_evicts_least_frequent() {
        let mut c = cache(8, 100);
        for key in 0..4u64 {
            c.promote_to_l0(key, vec![copy(key, &[key as f32, 0.0])]);
        }
        c.touch_l0(0);
        c.touch_l0(2);
        c.touch_l0(3);
        c.promote_to_l0(9, vec![copy(9, &[9.0, 0.0])]);
        assert!(c.l0_entry(1).is_none());
        assert!(c.in_l1(1));
        assert_eq!(c.l0().len(), 4);
    }

    #[test]
    fn capture_dedups_and_merges_down() {
        let mut c = cache(8, 6);
        let hood: Vec<CachedCopy> = (0..4).map(|i| copy(i, &[i as f32 * 0.1, 0.0])).collect();
        assert_eq!(c.l1_capture(&[0.0, 0.0], hood.clone()).0, 4);
        assert_eq!(c.l1_capture(&[0.0, 0.0], hood).0, 0);
        let more: Vec<CachedCopy> = (4..8).map(|i| copy(i, &[i as f32 * 0.1, 0.0])).collect();
        let (added, ev) = c.l1_capture(&[0.0, 0.0], more);
        assert_eq!(added, 4);
        assert_eq!(ev.len(), 1);
        let CacheEvent::MergeDown { copies, .. } = &ev[0];
        assert_eq!(copies.len(), 6);
        assert!(c.l1().iter().all(|x| x.len() < 6));
    }

    #[test]
    fn stale_copies_are_skipped() {
        let mut c = cache(8, 100);
        c.promote_to_l0(1, vec![copy(1, &[0.0, 0.0]), copy(2, &[1.0, 0.0])]);
        let mut top = TopK::new(2);
        c.scan_l0(&[0.0, 0.0], Some(1), &|item, _| if item == 1 { CopyState::Dead } else { CopyState::Visible }, &mut top, &mut HashSet::new());
        assert_eq!(top.as_slice(), &[(1.0, 2)]);
        assert!(!c.in_l0(1));
    }

    #[test]
    fn cold_start_and_threshold() {
        let mut c = cache(8, 100);
        let mut top = TopK::new(1);
        top.push(0.0, 1);
        assert!(!c.should_terminate(&top, 1));
        c.record_completed(&[4.0]);
        assert!(!c.should_terminate(&top, 1));
        c.record_completed(&[4.0]);
        assert_eq!(c.d_agent(), Some(2.0));
        assert!(c.should_terminate(&top, 1));
        let mut far = TopK::new(1);
        far.push(2.0 * 2.0, 1);
        assert!(!c.should_terminate(&far, 1));
    }

    #[test]
    fn window_is_order_insensitive() {
        let mut a = cache(8, 100);
        let mut b = cache(8, 100);
        for d in [1.0, 4.0, 9.0, 16.0] {
            a.record_completed(&[d]);
        }
        for d in [16.0, 1.0, 9.0, 4.0] {
            b.record_completed(&[d]);
        }
        assert_eq!(a.d_agent(), b.d_agent());
    }

    #[test]
    fn zero_alpha_never_terminates() {
        let mut c = AgentCache::new(
            CacheConfig {
                alpha_et: 0.0,
                window_w: 2,
                ..CacheConfig::default()
            },
            Metric::SquaredEuclidean,
            2,
        );
        c.record_completed(&[100.0]);
        let mut top = TopK::new(1);
        top.push(0.0, 1);
        assert!(!c.should_terminate(&top, 1));
    }
}
