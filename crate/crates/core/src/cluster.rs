//! L2 cluster storage: membership, lazy centroid maintenance, item locations
//! and size-triggered k-means splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ClusterConfig;
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::profile::AgentProfile;
use crate::tiering::{Executor, TierSlot};
use crate::vector::{centroid, deviation, rank_cmp, AgentId, ClusterId, ItemId, MemoryItem, Metric, ScopeId, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub item: ItemId,
    pub vector: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterKind {
    Regular,
    /// Holds an agent's fresh inserts into one scope until merge-down moves
    /// them into a coherent cluster of their own.
    Intake(AgentId),
}

#[derive(Debug)]
pub struct Cluster {
    pub id: ClusterId,
    pub scope: ScopeId,
    pub kind: ClusterKind,
    dimension: usize,
    metric: Metric,
    centroid: Vector,
    delta: f32,
    members: Vec<Member>,
    positions: HashMap<ItemId, u32>,
    profiles: BTreeMap<AgentId, AgentProfile>,
    pub(crate) tier: TierSlot,
    access_count: u64,
    mutations: u32,
    stale: bool,
    retired: bool,
}

impl Cluster {
    pub fn new(id: ClusterId, scope: ScopeId, dimension: usize, metric: Metric, members: Vec<Member>) -> Self {
        let mut c = Self {
            id,
            scope,
            kind: ClusterKind::Regular,
            dimension,
            metric,
            centroid: Arc::from(vec![0.0f32; dimension]),
            delta: 0.0,
            positions: members
                .iter()
                .enumerate()
                .map(|(i, m)| (m.item, i as u32))
                .collect(),
            members,
            profiles: BTreeMap::new(),
            tier: TierSlot::default(),
            access_count: 0,
            mutations: 0,
            stale: true,
            retired: false,
        };
        c.maintain();
        c
    }

    pub(crate) fn with_kind(mut self, kind: ClusterKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn centroid(&self) -> &Vector {
        &self.centroid
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    pub fn is_retired(&self) -> bool {
        self.retired
    }

    pub fn tier(&self) -> &TierSlot {
        &self.tier
    }

    pub fn access_count(&self) -> u64 {
        self.access_count
    }

    pub fn record_access(&mut self) {
        self.access_count += 1;
    }

    pub fn mutations_since_maintenance(&self) -> u32 {
        self.mutations
    }

    pub fn local_id(&self, item: ItemId) -> Option<u32> {
        self.positions.get(&item).copied()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.positions.contains_key(&item)
    }

    /// Appends to the host member list; returns the new local id.
    pub(crate) fn push_member(&mut self, m: Member) -> u32 {
        let local = self.members.len() as u32;
        self.positions.insert(m.item, local);
        self.members.push(m);
        self.mutations += 1;
        self.stale = true;
        local
    }

    /// Removes `item` by swapping the last member into its slot. Profiles and
    /// tier copies follow.
    pub(crate) fn remove_item(&mut self, item: ItemId) -> Option<Member> {
        let local = self.positions.remove(&item)?;
        let last = (self.members.len() - 1) as u32;
        let removed = self.members.swap_remove(local as usize);
        if local != last {
            let moved = self.members[local as usize].item;
            self.positions.insert(moved, local);
        }
        for p in self.profiles.values_mut() {
            p.on_swap_remove(local, last);
        }
        crate::tiering::remove_from_tiers(&mut self.tier, item);
        self.mutations += 1;
        self.stale = true;
        Some(removed)
    }

    /// Recomputes centroid and deviation if members changed since the last
    /// refresh. Returns true when a refresh happened.
    pub fn maintain(&mut self) -> bool {
        if !self.stale {
            return false;
        }
        if !self.members.is_empty() {
            let vs: Vec<&[f32]> = self.members.iter().map(|m| &*m.vector).collect();
            let c = centroid(&vs).expect("non-empty");
            self.delta = deviation(&vs, &c, self.metric).expect("non-empty");
            self.centroid = Arc::from(c);
        }
        self.mutations = 0;
        self.stale = false;
        true
    }

    /// Overrides the centroid (imported IVF centroids) and recomputes δ about it.
    pub(crate) fn set_centroid(&mut self, c: Vector) {
        if !self.members.is_empty() {
            let vs: Vec<&[f32]> = self.members.iter().map(|m| &*m.vector).collect();
            self.delta = deviation(&vs, &c, self.metric).expect("non-empty");
        }
        self.centroid = c;
        self.stale = false;
        self.mutations = 0;
    }

    pub(crate) fn restore_stats(&mut self, delta: f32, access_count: u64, mutations: u32, stale: bool) {
        self.delta = delta;
        self.access_count = access_count;
        self.mutations = mutations;
        self.stale = stale;
    }

    pub fn profile(&self, agent: AgentId) -> Option<&AgentProfile> {
        self.profiles.get(&agent)
    }

    pub fn profiles(&self) -> &BTreeMap<AgentId, AgentProfile> {
        &self.profiles
    }

    pub fn profile_promote(&mut self, agent: AgentId, hits: &[u32], p_size: usize) {
        let hits: Vec<u32> = hits
            .iter()
            .copied()
            .filter(|h| (*h as usize) < self.members.len())
            .collect();
        if hits.is_empty() {
            return;
        }
        self.profiles.entry(agent).or_default().promote(&hits, p_size);
    }

    pub(crate) fn set_profile(&mut self, agent: AgentId, p: AgentProfile) {
        self.profiles.insert(agent, p);
    }

    /// Local ids in scan order for `agent`: profile entries first.
    pub fn scan_order(&self, agent: Option<AgentId>) -> Vec<u32> {
        let default: Vec<u32> = (0..self.members.len() as u32).collect();
        match agent.and_then(|a| self.profiles.get(&a)) {
            Some(p) => p.reorder(&default),
            None => default,
        }
    }
}

/// Where a live item is owned, and which write produced it.
#[derive(Debug, Clone)]
pub struct ItemRecord {
    pub cluster: ClusterId,
    pub scope: ScopeId,
    /// Store-wide write sequence number; cached copies carry it so stale
    /// copies can be recognised after an update.
    pub version: u64,
    pub payload: Arc<[u8]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub retired: ClusterId,
    pub children: Vec<ClusterId>,
    pub reassignment: BTreeMap<ItemId, ClusterId>,
}

#[derive(Debug, Default)]
struct Registry {
    clusters: BTreeMap<ClusterId, Arc<RwLock<Cluster>>>,
    by_scope: BTreeMap<ScopeId, BTreeSet<ClusterId>>,
    splits: BTreeMap<ClusterId, SplitOutcome>,
}

/// Owns every L2 cluster and the item → cluster map.
#[derive(Debug)]
pub struct ClusterStore {
    dimension: usize,
    metric: Metric,
    cfg: ClusterConfig,
    registry: RwLock<Registry>,
    items: RwLock<HashMap<ItemId, ItemRecord>>,
    next_cluster: AtomicU64,
}

pub type ClusterRef = Arc<RwLock<Cluster>>;

impl ClusterStore {
    pub fn new(dimension: usize, metric: Metric, cfg: ClusterConfig) -> Self {
        let mut registry = Registry::default();
        registry.by_scope.insert(ScopeId::Static, BTreeSet::new());
        Self {
            dimension,
            metric,
            cfg,
            registry: RwLock::new(registry),
            items: RwLock::new(HashMap::new()),
            next_cluster: AtomicU64::new(1),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn register_scope(&self, scope: ScopeId) -> bool {
        let mut reg = self.registry.write();
        if reg.by_scope.contains_key(&scope) {
            return false;
        }
        reg.by_scope.insert(scope, BTreeSet::new());
        true
    }

    pub fn has_scope(&self, scope: ScopeId) -> bool {
        self.registry.read().by_scope.contains_key(&scope)
    }

    pub fn scopes(&self) -> Vec<ScopeId> {
        self.registry.read().by_scope.keys().copied().collect()
    }

    pub(crate) fn alloc_cluster_id(&self) -> ClusterId {
        ClusterId(self.next_cluster.fetch_add(1, Ordering::SeqCst))
    }

    pub(crate) fn next_cluster_id(&self) -> u64 {
        self.next_cluster.load(Ordering::SeqCst)
    }

    pub(crate) fn set_next_cluster_id(&self, v: u64) {
        self.next_cluster.store(v, Ordering::SeqCst);
    }

    pub fn get(&self, id: ClusterId) -> Option<ClusterRef> {
        self.registry.read().clusters.get(&id).cloned()
    }

    pub fn cluster_ids(&self) -> Vec<ClusterId> {
        self.registry.read().clusters.keys().copied().collect()
    }

    pub fn clusters_in(&self, scope: ScopeId) -> Vec<ClusterId> {
        self.registry
            .read()
            .by_scope
            .get(&scope)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn cluster_count(&self) -> usize {
        self.registry.read().clusters.len()
    }

    pub fn all(&self) -> Vec<ClusterRef> {
        self.registry.read().clusters.values().cloned().collect()
    }

    pub fn item_count(&self) -> usize {
        self.items.read().len()
    }

    pub fn record(&self, item: ItemId) -> Option<ItemRecord> {
        self.items.read().get(&item).cloned()
    }

    pub fn is_live(&self, item: ItemId, version: u64) -> bool {
        self.items.read().get(&item).is_some_and(|r| r.version == version)
    }

    pub(crate) fn records_snapshot(&self) -> BTreeMap<ItemId, ItemRecord> {
        self.items.read().iter().map(|(k, v)| (*k, v.clone())).collect()
    }

    pub(crate) fn put_record(&self, item: ItemId, rec: ItemRecord) -> Option<ItemRecord> {
        self.items.write().insert(item, rec)
    }

    pub(crate) fn set_record_cluster(&self, item: ItemId, cluster: ClusterId) {
        if let Some(r) = self.items.write().get_mut(&item) {
            r.cluster = cluster;
        }
    }

    /// Publishes a fully built cluster.
    pub(crate) fn publish(&self, cluster: Cluster) -> Result<ClusterRef> {
        let mut reg = self.registry.write();
        let scope = cluster.scope;
        let id = cluster.id;
        let set = reg
            .by_scope
            .get_mut(&scope)
            .ok_or_else(|| Error::usage(format!("unknown scope {scope}")))?;
        set.insert(id);
        let r = Arc::new(RwLock::new(cluster));
        reg.clusters.insert(id, r.clone());
        Ok(r)
    }

    /// Removes a cluster from the registry (it must already be empty or its
    /// members re-homed).
    pub(crate) fn unpublish(&self, id: ClusterId) -> Option<ClusterRef> {
        let mut reg = self.registry.write();
        let r = reg.clusters.remove(&id)?;
        let scope = r.read().scope;
        if let Some(s) = reg.by_scope.get_mut(&scope) {
            s.remove(&id);
        }
        Some(r)
    }

    /// Registers a new cluster seeded with `seed_items` and records their
    /// locations. The caller wires it into the coarse graph.
    pub fn create_cluster(&self, scope: ScopeId, seed_items: Vec<MemoryItem>, version: &AtomicU64) -> Result<ClusterId> {
        if seed_items.is_empty() {
            return Err(Error::usage("a cluster needs at least one seed item"));
        }
        if !self.has_scope(scope) {
            return Err(Error::usage(format!("unknown scope {scope}")));
        }
        {
            let items = self.items.read();
            for it in &seed_items {
                crate::vector::validate(&it.vector, self.dimension)?;
                if items.contains_key(&it.id) {
                    return Err(Error::usage(format!("item {} already exists", it.id)));
                }
            }
        }
        let id = self.alloc_cluster_id();
        let mut records = Vec::with_capacity(seed_items.len());
        let members: Vec<Member> = seed_items
            .into_iter()
            .map(|it| {
                records.push((
                    it.id,
                    ItemRecord {
                        cluster: id,
                        scope,
                        version: version.fetch_add(1, Ordering::SeqCst),
                        payload: Arc::from(it.payload),
                    },
                ));
                Member {
                    item: it.id,
                    vector: it.vector,
                }
            })
            .collect();
        let cluster = Cluster::new(id, scope, self.dimension, self.metric, members);
        self.publish(cluster)?;
        let mut items = self.items.write();
        for (item, rec) in records {
            items.insert(item, rec);
        }
        Ok(id)
    }

    /// Nearest candidate by centroid distance; ties go to the smaller id.
    pub fn assign_nearest(&self, v: &[f32], candidates: &[ClusterId]) -> Result<ClusterId> {
        let mut best: Option<(f32, ClusterId)> = None;
        for id in candidates {
            let Some(c) = self.get(*id) else { continue };
            let d = self.metric.distance(v, &c.read().centroid);
            let better = match best {
                None => true,
                Some(b) => rank_cmp((d, id.0), (b.0, b.1 .0)).is_lt(),
            };
            if better {
                best = Some((d, *id));
            }
        }
        best.map(|b| b.1)
            .ok_or_else(|| Error::usage("assign_nearest needs at least one live candidate"))
    }

    /// Removes an item from its owning cluster. Returns the owning cluster
    /// and the removed member, or `None` for unknown ids.
    pub fn delete_item(&self, item: ItemId) -> Option<(ClusterId, Member)> {
        loop {
            let rec = self.items.read().get(&item).cloned()?;
            let Some(cref) = self.get(rec.cluster) else {
                // Concurrent split published the children; re-read the record.
                if self.items.read().get(&item).map(|r| r.cluster) == Some(rec.cluster) {
                    self.items.write().remove(&item);
                    return None;
                }
                continue;
            };
            let mut c = cref.write();
            if c.retired {
                continue;
            }
            let removed = c.remove_item(item);
            self.items.write().remove(&item);
            return removed.map(|m| (rec.cluster, m));
        }
    }

    /// Splits `id` into `ceil(len / split_target)` (at least two) children
    /// with k-means run on `executor`. A second caller racing on the same
    /// cluster receives the first caller's outcome.
    pub fn split_cluster<R: Rng>(
        &self,
        id: ClusterId,
        executor: &dyn Executor,
        rng: &mut R,
    ) -> Result<SplitOutcome> {
        if let Some(done) = self.registry.read().splits.get(&id) {
            return Ok(done.clone());
        }
        let cref = self
            .get(id)
            .ok_or_else(|| Error::usage(format!("unknown cluster {id}")))?;
        let mut parent = cref.write();
        if parent.retired {
            drop(parent);
            return self
                .registry
                .read()
                .splits
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::usage(format!("cluster {id} was retired")));
        }
        let n = parent.members.len();
        if n < self.cfg.split_threshold.max(2) {
            return Err(Error::usage(format!(
                "cluster {id} has {n} members, below the split threshold {}",
                self.cfg.split_threshold
            )));
        }
        let k = n.div_ceil(self.cfg.split_target).max(2);
        let points: Vec<Vector> = parent.members.iter().map(|m| m.vector.clone()).collect();
        let out = kmeans(&points, k, self.cfg.kmeans_max_iters, self.metric, rng, executor)
            .map_err(|e| Error::usage(e.to_string()))?;

        let child_ids: Vec<ClusterId> = (0..k).map(|_| self.alloc_cluster_id()).collect();
        let mut groups: Vec<Vec<Member>> = vec![Vec::new(); k];
        let mut new_local: Vec<(usize, u32)> = Vec::with_capacity(n);
        for (m, g) in parent.members.iter().zip(&out.assignment) {
            new_local.push((*g, groups[*g].len() as u32));
            groups[*g].push(m.clone());
        }
        let mut children: Vec<Cluster> = groups
            .into_iter()
            .zip(&child_ids)
            .map(|(members, cid)| Cluster::new(*cid, parent.scope, self.dimension, self.metric, members))
            .collect();
        // Profile entries follow their vectors.
        for (agent, profile) in &parent.profiles {
            let mut per_child: Vec<Vec<u32>> = vec![Vec::new(); k];
            for local in profile.entries() {
                if let Some((g, l)) = new_local.get(*local as usize) {
                    per_child[*g].push(*l);
                }
            }
            for (child, entries) in children.iter_mut().zip(per_child) {
                if !entries.is_empty() {
                    child.profiles.insert(*agent, AgentProfile::from_entries(entries));
                }
            }
        }
        let mut reassignment = BTreeMap::new();
        for (m, g) in parent.members.iter().zip(&out.assignment) {
            reassignment.insert(m.item, child_ids[*g]);
        }
        let outcome = SplitOutcome {
            retired: id,
            children: child_ids.clone(),
            reassignment,
        };

        {
            let mut reg = self.registry.write();
            reg.clusters.remove(&id);
            let scope = parent.scope;
            let set = reg.by_scope.entry(scope).or_default();
            set.remove(&id);
            for c in &child_ids {
                set.insert(*c);
            }
            for child in children {
                let cid = child.id;
                reg.clusters.insert(cid, Arc::new(RwLock::new(child)));
            }
            reg.splits.insert(id, outcome.clone());
            let mut items = self.items.write();
            for (item, child) in &outcome.reassignment {
                if let Some(r) = items.get_mut(item) {
                    r.cluster = *child;
                }
            }
        }
        parent.retired = true;
        Ok(outcome)
    }

    pub(crate) fn with_record<R>(&self, item: ItemId, f: impl FnOnce(Option<&ItemRecord>) -> R) -> R {
        f(self.items.read().get(&item))
    }

    /// Children of a cluster retired by a split, if the split is remembered.
    pub(crate) fn split_children(&self, id: ClusterId) -> Option<Vec<ClusterId>> {
        self.registry.read().splits.get(&id).map(|o| o.children.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiering::{HostExecutor, SimulatedAccelerator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn item(id: u64, v: &[f32]) -> MemoryItem {
        MemoryItem {
            id,
            vector: Arc::from(v),
            payload: Vec::new(),
            scope: ScopeId::Static,
        }
    }

    fn store(threshold: usize, target: usize) -> ClusterStore {
        ClusterStore::new(
            2,
            Metric::SquaredEuclidean,
            ClusterConfig {
                split_threshold: threshold,
                split_target: target,
                ..ClusterConfig::default()
            },
        )
    }

    #[test]
    fn create_cluster_examples() {
        let s = store(8, 4);
        let v = AtomicU64::new(0);
        let a = s.create_cluster(ScopeId::Static, vec![item(1, &[3.0, 4.0])], &v).unwrap();
        let c = s.get(a).unwrap();
        assert_eq!(&*c.read().centroid().to_vec(), &[3.0, 4.0]);
        assert_eq!(c.read().delta(), 0.0);

        let b = s
            .create_cluster(ScopeId::Static, vec![item(2, &[0.0, 0.0]), item(3, &[2.0, 0.0])], &v)
            .unwrap();
        let c = s.get(b).unwrap();
        assert_eq!(&*c.read().centroid().to_vec(), &[1.0, 0.0]);
        assert_eq!(c.read().delta(), 1.0);

        let err = s
            .create_cluster(ScopeId::Agent(AgentId(9)), vec![item(4, &[0.0, 0.0])], &v)
            .unwrap_err();
        assert!(err.is_usage());
        assert!(s.create_cluster(ScopeId::Static, vec![], &v).is_err());
    }

    #[test]
    fn create_cluster_large_matches_oracles() {
        let s = ClusterStore::new(16, Metric::SquaredEuclidean, ClusterConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<MemoryItem> = (0..500)
            .map(|i| {
                let v: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                MemoryItem {
                    id: i,
                    vector: Arc::from(v),
                    payload: vec![],
                    scope: ScopeId::Static,
                }
            })
            .collect();
        let mut mean = vec![0.0f64; 16];
        for it in &items {
            for j in 0..16 {
                mean[j] += f64::from(it.vector[j]) / 500.0;
            }
        }
        let mut dev = 0.0f64;
        for it in &items {
            let s2: f64 = (0..16).map(|j| (f64::from(it.vector[j]) - mean[j]).powi(2)).sum();
            dev += s2.sqrt() / 500.0;
        }
        let id = s.create_cluster(ScopeId::Static, items, &AtomicU64::new(0)).unwrap();
        let c = s.get(id).unwrap();
        let c = c.read();
        for j in 0..16 {
            assert!((f64::from(c.centroid()[j]) - mean[j]).abs() <= 1e-5);
        }
        assert!((f64::from(c.delta()) - dev).abs() <= 1e-5 * dev);
    }

    #[test]
    fn assign_nearest_rules() {
        let s = store(8, 4);
        let v = AtomicU64::new(0);
        let a = s.create_cluster(ScopeId::Static, vec![item(1, &[-1.0, 0.0])], &v).unwrap();
        let b = s.create_cluster(ScopeId::Static, vec![item(2, &[1.0, 0.0])], &v).unwrap();
        assert_eq!(s.assign_nearest(&[1.0, 0.0], &[a, b]).unwrap(), b);
        assert_eq!(s.assign_nearest(&[0.0, 5.0], &[b, a]).unwrap(), a.min(b));
        assert!(s.assign_nearest(&[0.0, 0.0], &[]).unwrap_err().is_usage());
    }

    #[test]
    fn assign_nearest_matches_linear_scan() {
        let s = ClusterStore::new(8, Metric::SquaredEuclidean, ClusterConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = AtomicU64::new(0);
        let mut ids = Vec::new();
        let mut cents = Vec::new();
        for i in 0..32 {
            let c: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            ids.push(
                s.create_cluster(
                    ScopeId::Static,
                    vec![MemoryItem {
                        id: i,
                        vector: Arc::from(c.clone()),
                        payload: vec![],
                        scope: ScopeId::Static,
                    }],
                    &v,
                )
                .unwrap(),
            );
            cents.push(c);
        }
        for _ in 0..1000 {
            let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let mut best = 0;
            for i in 1..32 {
                let di: f32 = (0..8).map(|j| (q[j] - cents[i][j]).powi(2)).sum();
                let db: f32 = (0..8).map(|j| (q[j] - cents[best][j]).powi(2)).sum();
                if di < db {
                    best = i;
                }
            }
            assert_eq!(s.assign_nearest(&q, &ids).unwrap(), ids[best]);
        }
    }

    #[test]
    fn delete_and_lazy_centroid() {
        let s = ClusterStore::new(2, Metric::SquaredEuclidean, ClusterConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let items: Vec<MemoryItem> = (0..100)
            .map(|i| item(i, &[rng.random_range(-3.0f32..3.0), rng.random_range(-3.0f32..3.0)]))
            .collect();
        let id = s.create_cluster(ScopeId::Static, items.clone(), &AtomicU64::new(0)).unwrap();
        for i in (0..100).step_by(2) {
            assert!(s.delete_item(i).is_some());
        }
        assert!(s.delete_item(0).is_none());
        let c = s.get(id).unwrap();
        let mut c = c.write();
        assert!(c.is_stale());
        c.maintain();
        let survivors: Vec<&[f32]> = items.iter().filter(|i| i.id % 2 == 1).map(|i| &*i.vector).collect();
        let want = centroid(&survivors).unwrap();
        for j in 0..2 {
            assert!((c.centroid()[j] - want[j]).abs() <= 1e-3 * want[j].abs().max(1e-3));
        }
        let ids: BTreeSet<u64> = c.members().iter().map(|m| m.item).collect();
        assert_eq!(ids, (0..100).filter(|i| i % 2 == 1).collect());
        for (i, m) in c.members().iter().enumerate() {
            assert_eq!(c.local_id(m.item), Some(i as u32));
        }
    }

    fn two_blob_store(target: usize) -> (ClusterStore, ClusterId, Vec<usize>) {
        let s = ClusterStore::new(
            8,
            Metric::SquaredEuclidean,
            ClusterConfig {
                split_threshold: 2 * target,
                split_target: target,
                ..ClusterConfig::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let normal = Normal::new(0.0f32, 0.3).unwrap();
        let mut labels = Vec::new();
        let items: Vec<MemoryItem> = (0..2 * target as u64)
            .map(|i| {
                let label = (i % 2) as usize;
                labels.push(label);
                let base = if label == 0 { -4.0 } else { 4.0 };
                let v: Vec<f32> = (0..8).map(|_| base + normal.sample(&mut rng)).collect();
                MemoryItem {
                    id: i,
                    vector: Arc::from(v),
                    payload: vec![],
                    scope: ScopeId::Static,
                }
            })
            .collect();
        let id = s.create_cluster(ScopeId::Static, items, &AtomicU64::new(0)).unwrap();
        (s, id, labels)
    }

    #[test]
    fn split_two_gaussians_is_pure() {
        let (s, id, labels) = two_blob_store(64);
        {
            let c = s.get(id).unwrap();
            c.write().profile_promote(AgentId(1), &[0, 1, 2], 8);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = s.split_cluster(id, &HostExecutor::default(), &mut rng).unwrap();
        assert_eq!(out.children.len(), 2);
        assert_eq!(out.reassignment.len(), 128);
        for child in &out.children {
            let c = s.get(*child).unwrap();
            let c = c.read();
            let zeros = c.members().iter().filter(|m| labels[m.item as usize] == 0).count();
            let purity = zeros.max(c.len() - zeros) as f64 / c.len() as f64;
            assert!(purity >= 0.9, "purity {purity}");
        }
        // Profile entries follow their vectors.
        let mut promoted = BTreeSet::new();
        for child in &out.children {
            let c = s.get(*child).unwrap();
            let c = c.read();
            if let Some(p) = c.profile(AgentId(1)) {
                for l in p.entries() {
                    promoted.insert(c.members()[*l as usize].item);
                }
            }
        }
        assert_eq!(promoted, [0u64, 1, 2].into_iter().collect());
        assert!(s.get(id).is_none());
        // Second caller sees the first outcome.
        let again = s.split_cluster(id, &HostExecutor::default(), &mut rng).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn split_identical_points_partitions_exactly() {
        let s = store(8, 4);
        let items: Vec<MemoryItem> = (0..8).map(|i| item(i, &[1.0, 1.0])).collect();
        let id = s.create_cluster(ScopeId::Static, items, &AtomicU64::new(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = s.split_cluster(id, &HostExecutor::default(), &mut rng).unwrap();
        assert!(out.children.len() >= 2);
        let mut seen: Vec<u64> = Vec::new();
        for child in &out.children {
            let c = s.get(*child).unwrap();
            assert!(!c.read().is_empty());
            seen.extend(c.read().members().iter().map(|m| m.item));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        for i in 0..8 {
            assert_eq!(s.record(i).unwrap().cluster, out.reassignment[&i]);
        }
    }

    #[test]
    fn split_below_threshold_is_usage_error() {
        let s = store(8, 4);
        let id = s
            .create_cluster(ScopeId::Static, vec![item(1, &[0.0, 0.0])], &AtomicU64::new(0))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(s
            .split_cluster(id, &HostExecutor::default(), &mut rng)
            .unwrap_err()
            .is_usage());
    }

    #[test]
    fn split_assignment_is_executor_independent() {
        let (s1, id1, _) = two_blob_store(50);
        let (s2, id2, _) = two_blob_store(50);
        let accel = SimulatedAccelerator::default();
        let a = s1
            .split_cluster(id1, &HostExecutor::default(), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = s2
            .split_cluster(id2, &accel, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        assert!(accel.log().assigns() > 0);
    }
}
