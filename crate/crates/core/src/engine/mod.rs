//! Public store facade.
//!
//! A search runs the agent's pattern hint through the cache levels (L0, then
//! L1), stops early when the candidates are already close enough, and
//! otherwise falls through to a coarse search over the requested scopes and
//! an exact scan of the selected clusters. Side effects (L1 capture, L0
//! promotion, profile promotion, access counting, prefetch) follow the
//! foreground result.
//!
//! Lock order: update gate, agent state, graph, cluster registry, cluster,
//! item records. The tier plan and the RNG are leaves.

mod dispatch;
mod ingest;
mod persist;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{AgentCache, CacheEvent, CachedCopy, CopyState, Level};
use crate::cluster::{Cluster, ClusterKind, ClusterStore, ItemRecord, Member, SplitOutcome};
use crate::config::{AcceleratorMode, BackgroundMode, InsertPlacement, StoreConfig, WritePolicy};
use crate::error::{Error, Result};
use crate::fsm::{PatternHint, PatternTable, PredictedCluster, StateKey};
use crate::graph::HybridGraph;
use crate::tiering::{
    abort_to_host, advance_migration, begin_migration, buffered_insert, complete_migration, evict, scan_into,
    Budget, CostModel, Executor, HostExecutor, MigrationPhase, SimulatedAccelerator, TierAction, TierPlan,
};
use crate::topk::TopK;
use crate::vector::{validate, AgentId, ClusterId, ItemId, Metric, ScopeId, Vector};

pub use dispatch::{Completion, Op, OpOutput};
pub use ingest::{read_fvecs, read_jsonl, write_fvecs, JsonRecord};
pub use persist::FORMAT_VERSION;

/// L0 key used before the agent has any access pattern.
pub const COLD_KEY: StateKey = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: ItemId,
    pub distance: f32,
    pub scope: ScopeId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Vectors whose distance to the query was computed in the foreground.
    pub scanned: u64,
    pub level: Level,
    pub early_terminated: bool,
    pub coarse_computations: u64,
    pub clusters_probed: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
    pub stats: SearchStats,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<ItemId> {
        self.hits.iter().map(|h| h.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub k: usize,
    pub nprobe: usize,
    /// Coarse frontier size; `ef_search_factor * nprobe` when unset.
    pub ef_search: Option<usize>,
    /// Skip the cache levels and their side effects.
    pub bypass_cache: bool,
    /// Allow answers from the cache levels alone.
    pub terminate: bool,
}

impl SearchParams {
    pub fn new(k: usize, nprobe: usize) -> Self {
        Self {
            k,
            nprobe,
            ef_search: None,
            bypass_cache: false,
            terminate: true,
        }
    }

    /// Termination off, every cluster probed with an exhaustive coarse
    /// frontier. Results equal a brute-force scan.
    pub fn exhaustive(k: usize, clusters: usize) -> Self {
        let n = clusters.max(1);
        Self {
            k,
            nprobe: n,
            ef_search: Some(n),
            bypass_cache: false,
            terminate: false,
        }
    }
}

/// An item to insert. Ids are assigned by the store unless given.
#[derive(Debug, Clone, PartialEq)]
pub struct NewItem {
    pub id: Option<ItemId>,
    pub vector: Vector,
    pub payload: Vec<u8>,
}

impl NewItem {
    pub fn new(vector: impl Into<Vector>) -> Self {
        Self {
            id: None,
            vector: vector.into(),
            payload: Vec::new(),
        }
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }

    pub fn with_id(mut self, id: ItemId) -> Self {
        self.id = Some(id);
        self
    }
}

/// Outcome log of verify mode: every early-terminated answer is checked
/// against a full search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyLog {
    pub queries: u64,
    pub early: u64,
    /// Size of the reference top-k summed over all queries.
    pub truth: u64,
    /// Reference ids missing from the returned answer, summed.
    pub misses: u64,
}

impl VerifyLog {
    pub fn miss_rate(&self) -> f64 {
        if self.truth == 0 {
            0.0
        } else {
            self.misses as f64 / self.truth as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub searches: u64,
    pub inserts: u64,
    pub updates: u64,
    pub deletes: u64,
    pub early_l0: u64,
    pub early_l1: u64,
    pub scanned: u64,
    pub coarse_computations: u64,
    pub merge_downs: u64,
    pub merged_items: u64,
    pub splits: u64,
    pub prefetches: u64,
    pub admissions: u64,
    pub evictions: u64,
    pub migrations: u64,
    pub buffer_flushes: u64,
    pub batches: u64,
    pub clusters: usize,
    pub items: usize,
    pub resident_clusters: usize,
    pub budget_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStats {
    pub d_agent: Option<f32>,
    pub completed_queries: u64,
    pub l0_entries: usize,
    pub l1_clusters: usize,
    pub cached_vectors: usize,
    pub fsms: usize,
    pub verify: VerifyLog,
}

#[derive(Debug, Default)]
struct Counters {
    searches: AtomicU64,
    inserts: AtomicU64,
    updates: AtomicU64,
    deletes: AtomicU64,
    early_l0: AtomicU64,
    early_l1: AtomicU64,
    scanned: AtomicU64,
    coarse: AtomicU64,
    merge_downs: AtomicU64,
    merged_items: AtomicU64,
    splits: AtomicU64,
    prefetches: AtomicU64,
    admissions: AtomicU64,
    evictions: AtomicU64,
    migrations: AtomicU64,
    retired_flushes: AtomicU64,
    batches: AtomicU64,
}

fn bump(c: &AtomicU64, n: u64) {
    c.fetch_add(n, Ordering::Relaxed);
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct AgentState {
    id: AgentId,
    cache: AgentCache,
    patterns: PatternTable,
    request: Vec<Vec<f32>>,
    hint: Option<PatternHint>,
    intake: Vec<(ScopeId, ClusterId)>,
    verify: VerifyLog,
    #[serde(skip)]
    prefetching: BTreeSet<StateKey>,
}

impl AgentState {
    fn new(id: AgentId, cfg: &StoreConfig) -> Self {
        let mut cache = AgentCache::new(cfg.cache.clone(), cfg.metric, cfg.dimension);
        cache.rebuild_indexes();
        Self {
            id,
            cache,
            patterns: PatternTable::new(cfg.pattern.clone(), cfg.cache.n_p, cfg.metric),
            request: Vec::new(),
            hint: None,
            intake: Vec::new(),
            verify: VerifyLog::default(),
            prefetching: BTreeSet::new(),
        }
    }

    fn intake_of(&self, scope: ScopeId) -> Option<ClusterId> {
        self.intake.iter().find(|(s, _)| *s == scope).map(|e| e.1)
    }

    fn set_intake(&mut self, scope: ScopeId, id: Option<ClusterId>) {
        self.intake.retain(|(s, _)| *s != scope);
        if let Some(id) = id {
            self.intake.push((scope, id));
            self.intake.sort();
        }
    }

    fn predicted(&self) -> (Option<StateKey>, Option<u64>) {
        let mut l0 = None;
        let mut l1 = None;
        if let Some(h) = &self.hint {
            for p in &h.predicted_clusters {
                match p {
                    PredictedCluster::L0(k) => l0 = l0.or(Some(*k)),
                    PredictedCluster::L1(s) => l1 = l1.or(Some(*s)),
                }
            }
        }
        (l0, l1)
    }
}

type AgentRef = Arc<Mutex<AgentState>>;

pub(crate) struct Inner {
    cfg: StoreConfig,
    clusters: ClusterStore,
    graph: RwLock<HybridGraph>,
    agents: RwLock<BTreeMap<AgentId, AgentRef>>,
    tier: Mutex<TierPlan>,
    budget: Arc<Budget>,
    host: HostExecutor,
    accel: Option<SimulatedAccelerator>,
    version: AtomicU64,
    next_item: AtomicU64,
    rng: Mutex<ChaCha8Rng>,
    gate: RwLock<()>,
    counters: Counters,
    shutdown: Arc<AtomicBool>,
    lanes: dispatch::Lanes,
    pools: OnceLock<dispatch::Pools>,
}

impl std::fmt::Debug for Inner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dimension", &self.cfg.dimension)
            .field("clusters", &self.clusters.cluster_count())
            .field("items", &self.clusters.item_count())
            .finish()
    }
}

/// Handle to a memory store. Cheap to clone; clones share the store.
#[derive(Debug, Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

/// Per-query scanning outcome of the L2 path.
struct L2Scan {
    scanned: u64,
    coarse: u64,
    probed: Vec<ClusterId>,
}

impl Store {
    /// Creates an empty store with the static scope registered. The
    /// `PANCAKE_SEED` environment variable overrides the configured seed.
    pub fn new(cfg: StoreConfig) -> Result<Self> {
        let cfg = cfg.with_env_overrides()?;
        Self::with_config(cfg)
    }

    /// Like [`Store::new`] but ignores environment overrides.
    pub fn with_config(cfg: StoreConfig) -> Result<Self> {
        cfg.validate()?;
        let accel = match cfg.tier.accelerator {
            AcceleratorMode::None => None,
            AcceleratorMode::Simulated => Some(SimulatedAccelerator::new(CostModel::default())),
            AcceleratorMode::Native => {
                return Err(Error::usage("the native accelerator is not available in this build"));
            }
        };
        let mut graph = HybridGraph::new(cfg.graph.clone(), cfg.metric, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        graph.register_scope(ScopeId::Static);
        let inner = Inner {
            clusters: ClusterStore::new(cfg.dimension, cfg.metric, cfg.cluster.clone()),
            graph: RwLock::new(graph),
            agents: RwLock::new(BTreeMap::new()),
            tier: Mutex::new(TierPlan::new(cfg.tier.clone(), cfg.dimension)),
            budget: Arc::new(Budget::new(if accel.is_some() { cfg.tier.budget_bytes } else { 0 })),
            host: HostExecutor::new(CostModel::default()),
            accel,
            version: AtomicU64::new(1),
            next_item: AtomicU64::new(1),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed)),
            gate: RwLock::new(()),
            counters: Counters::default(),
            shutdown: Arc::new(AtomicBool::new(false)),
            lanes: dispatch::Lanes::default(),
            pools: OnceLock::new(),
            cfg,
        };
        Ok(Self { inner: Arc::new(inner) })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.inner.cfg
    }

    pub fn dimension(&self) -> usize {
        self.inner.cfg.dimension
    }

    pub fn metric(&self) -> Metric {
        self.inner.cfg.metric
    }

    pub fn clusters(&self) -> &ClusterStore {
        &self.inner.clusters
    }

    pub fn cluster_count(&self) -> usize {
        self.inner.clusters.cluster_count()
    }

    pub fn item_count(&self) -> usize {
        self.inner.clusters.item_count()
    }

    /// Runs `f` with shared access to the coarse graph.
    pub fn with_graph<R>(&self, f: impl FnOnce(&HybridGraph) -> R) -> R {
        f(&self.inner.graph.read())
    }

    /// Runs `f` with exclusive access to the coarse graph (test and
    /// calibration hooks such as spacing overrides).
    pub fn with_graph_mut<R>(&self, f: impl FnOnce(&mut HybridGraph) -> R) -> R {
        f(&mut self.inner.graph.write())
    }

    pub fn accelerator(&self) -> Option<&dyn Executor> {
        self.inner.accel.as_ref().map(|a| a as &dyn Executor)
    }

    pub fn host_executor(&self) -> &dyn Executor {
        &self.inner.host
    }

    pub fn hotset(&self) -> BTreeSet<ClusterId> {
        self.inner.tier.lock().hotset().clone()
    }

    pub fn register_agent(&self, agent: AgentId) -> Result<ScopeId> {
        self.inner.check_live()?;
        let mut agents = self.inner.agents.write();
        if agents.contains_key(&agent) {
            return Err(Error::usage(format!("{agent} is already registered")));
        }
        let scope = ScopeId::Agent(agent);
        self.inner.clusters.register_scope(scope);
        self.inner.graph.write().register_scope(scope);
        agents.insert(agent, Arc::new(Mutex::new(AgentState::new(agent, &self.inner.cfg))));
        Ok(scope)
    }

    /// Drops the agent's serving state (cache, patterns). Its scope and the
    /// items in it stay searchable.
    pub fn unregister_agent(&self, agent: AgentId) -> Result<()> {
        self.inner
            .agents
            .write()
            .remove(&agent)
            .map(|_| ())
            .ok_or_else(|| Error::usage(format!("{agent} is not registered")))
    }

    pub fn agents(&self) -> Vec<AgentId> {
        self.inner.agents.read().keys().copied().collect()
    }

    pub fn search(&self, agent: AgentId, scopes: &[ScopeId], q: &[f32], k: usize, nprobe: usize) -> Result<SearchResult> {
        self.inner.search(agent, scopes, q, &SearchParams::new(k, nprobe))
    }

    pub fn search_with(&self, agent: AgentId, scopes: &[ScopeId], q: &[f32], params: &SearchParams) -> Result<SearchResult> {
        self.inner.search(agent, scopes, q, params)
    }

    pub fn insert(&self, agent: AgentId, scope: ScopeId, items: Vec<NewItem>) -> Result<Vec<ItemId>> {
        self.inner.insert(agent, scope, items)
    }

    pub fn update(&self, agent: AgentId, item: ItemId, vector: impl Into<Vector>, payload: Vec<u8>) -> Result<bool> {
        self.inner.update(agent, item, vector.into(), payload)
    }

    pub fn delete(&self, agent: AgentId, item: ItemId) -> Result<bool> {
        self.inner.delete(agent, item)
    }

    /// Marks the end of the agent's current request; its access sequence is
    /// folded into the pattern table.
    pub fn complete_request(&self, agent: AgentId) -> Result<()> {
        self.inner.check_live()?;
        let st = self.inner.agent(agent)?;
        let mut st = st.lock();
        let request = std::mem::take(&mut st.request);
        if self.inner.patterns_on() {
            st.patterns.complete(&request);
        }
        st.hint = None;
        Ok(())
    }

    /// Current pattern hint of the agent (computed after its last search).
    pub fn hint(&self, agent: AgentId) -> Result<Option<PatternHint>> {
        Ok(self.inner.agent(agent)?.lock().hint.clone())
    }

    pub fn pattern_table(&self, agent: AgentId) -> Result<PatternTable> {
        Ok(self.inner.agent(agent)?.lock().patterns.clone())
    }

    pub fn cache_snapshot(&self, agent: AgentId) -> Result<AgentCache> {
        Ok(self.inner.agent(agent)?.lock().cache.clone())
    }

    /// Drops the agent's L0 and L1 contents. Fresh inserts still waiting in
    /// an intake cluster stay at L2.
    pub fn flush_cache(&self, agent: AgentId) -> Result<()> {
        let st = self.inner.agent(agent)?;
        let mut st = st.lock();
        st.cache.clear();
        Ok(())
    }

    pub fn vector(&self, item: ItemId) -> Option<Vector> {
        self.inner.fetch(item).map(|(c, _)| c.vector)
    }

    pub fn payload(&self, item: ItemId) -> Option<Arc<[u8]>> {
        self.inner.clusters.record(item).map(|r| r.payload)
    }

    pub fn scope_of(&self, item: ItemId) -> Option<ScopeId> {
        self.inner.clusters.record(item).map(|r| r.scope)
    }

    /// Every live item of the given scopes, ascending by id.
    pub fn live_items(&self, scopes: &[ScopeId]) -> Vec<(ItemId, Vector)> {
        let set: BTreeSet<ScopeId> = scopes.iter().copied().collect();
        let mut out = Vec::new();
        for c in self.inner.clusters.all() {
            let c = c.read();
            if c.is_retired() || !set.contains(&c.scope) {
                continue;
            }
            out.extend(c.members().iter().map(|m| (m.item, m.vector.clone())));
        }
        out.sort_by_key(|e| e.0);
        out
    }

    pub fn stats(&self) -> StoreStats {
        self.inner.stats()
    }

    pub fn agent_stats(&self, agent: AgentId) -> Result<AgentStats> {
        let st = self.inner.agent(agent)?;
        let st = st.lock();
        Ok(AgentStats {
            d_agent: st.cache.d_agent(),
            completed_queries: st.cache.completed_queries(),
            l0_entries: st.cache.l0().len(),
            l1_clusters: st.cache.l1().len(),
            cached_vectors: st.cache.cached_vectors(),
            fsms: st.patterns.len(),
            verify: st.verify,
        })
    }

    pub fn verify_log(&self, agent: AgentId) -> Result<VerifyLog> {
        Ok(self.inner.agent(agent)?.lock().verify)
    }

    /// Number of vectors a search would scan before every id in `truth` has
    /// been seen, following the search's own order: L0 entries, the probed
    /// L1 clusters, then every in-scope L2 cluster by exact centroid distance
    /// with each cluster's agent profile first. Dry run: no state changes.
    pub fn scan_order_to_recall(&self, agent: AgentId, scopes: &[ScopeId], q: &[f32], truth: &[ItemId]) -> Result<Option<u64>> {
        self.inner.scan_order_to_recall(agent, scopes, q, truth)
    }

    /// Recomputes stale centroids everywhere and refreshes the coarse graph.
    pub fn maintain_all(&self) {
        let ids = self.inner.clusters.cluster_ids();
        for id in ids {
            self.inner.maintain(id, true);
        }
    }

    /// Re-evaluates the accelerator hotset now.
    pub fn rebalance_tiers(&self) {
        self.inner.rebalance();
    }

    /// Stops accepting operations and cancels pending background work.
    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.inner.lanes.cancel_all();
    }

    pub fn is_shut_down(&self) -> bool {
        self.inner.shutdown.load(Ordering::SeqCst)
    }

    pub(crate) fn inner(&self) -> &Arc<Inner> {
        &self.inner
    }
}

impl Inner {
    fn check_live(&self) -> Result<()> {
        if self.shutdown.load(Ordering::SeqCst) {
            Err(Error::Shutdown)
        } else {
            Ok(())
        }
    }

    fn agent(&self, agent: AgentId) -> Result<AgentRef> {
        self.agents
            .read()
            .get(&agent)
            .cloned()
            .ok_or_else(|| Error::usage(format!("{agent} is not registered")))
    }

    fn accel(&self) -> Option<&dyn Executor> {
        self.accel.as_ref().map(|a| a as &dyn Executor)
    }

    fn cache_on(&self) -> bool {
        self.cfg.cache.enabled
    }

    fn patterns_on(&self) -> bool {
        self.cfg.cache.enabled && self.cfg.pattern.enabled
    }

    fn threaded(&self) -> bool {
        self.cfg.engine.background == BackgroundMode::Threaded
    }

    fn next_version(&self) -> u64 {
        self.version.fetch_add(1, Ordering::SeqCst)
    }

    fn scope_set(&self, scopes: &[ScopeId]) -> Result<BTreeSet<ScopeId>> {
        if scopes.is_empty() {
            return Err(Error::usage("scope set must not be empty"));
        }
        for s in scopes {
            if !self.clusters.has_scope(*s) {
                return Err(Error::usage(format!("unknown scope {s}")));
            }
        }
        Ok(scopes.iter().copied().collect())
    }

    fn check_write(&self, agent: AgentId, scope: ScopeId) -> Result<()> {
        let ok = match scope {
            ScopeId::Agent(a) => a == agent,
            ScopeId::Static => self.cfg.engine.write_policy == WritePolicy::AllowStatic,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Permission(format!("{agent} may not write scope {scope}")))
        }
    }

    fn copy_state(&self, item: ItemId, version: u64, scopes: &BTreeSet<ScopeId>) -> CopyState {
        self.clusters.with_record(item, |r| match r {
            Some(r) if r.version == version => {
                if scopes.contains(&r.scope) {
                    CopyState::Visible
                } else {
                    CopyState::Hidden
                }
            }
            _ => CopyState::Dead,
        })
    }

    /// Current vector and version of a live item, plus its owning cluster and
    /// local id.
    fn fetch(&self, item: ItemId) -> Option<(CachedCopy, (ClusterId, u32))> {
        for _ in 0..4 {
            let rec = self.clusters.record(item)?;
            let Some(c) = self.clusters.get(rec.cluster) else { continue };
            let c = c.read();
            let Some(local) = c.local_id(item) else { continue };
            let copy = CachedCopy {
                item,
                version: rec.version,
                vector: c.members()[local as usize].vector.clone(),
            };
            return Some((copy, (rec.cluster, local)));
        }
        None
    }

    fn l2_scan(&self, scopes: &BTreeSet<ScopeId>, q: &[f32], top: &mut TopK, nprobe: usize, ef: Option<usize>, skip: Option<&HashSet<ItemId>>) -> L2Scan {
        let coarse = {
            let g = self.graph.read();
            match ef {
                Some(ef) => g.coarse_search_ef(q, scopes, nprobe, ef),
                None => g.coarse_search(q, scopes, nprobe),
            }
        };
        let mut out = L2Scan {
            scanned: 0,
            coarse: coarse.computations,
            probed: Vec::with_capacity(coarse.clusters.len()),
        };
        let mut queue: Vec<ClusterId> = coarse.clusters.iter().map(|c| c.0).collect();
        let mut i = 0;
        while i < queue.len() {
            let id = queue[i];
            i += 1;
            let Some(c) = self.clusters.get(id) else {
                // Split between coarse and fine search: scan the children.
                if let Some(children) = self.clusters.split_children(id) {
                    queue.extend(children);
                }
                continue;
            };
            let c = c.read();
            if c.is_retired() {
                drop(c);
                if let Some(children) = self.clusters.split_children(id) {
                    queue.extend(children);
                }
                continue;
            }
            out.scanned += scan_into(&c, q, self.cfg.metric, &self.host, self.accel(), skip, &mut |d, id| top.push(d, id)) as u64;
            out.probed.push(id);
        }
        out
    }

    fn search(self: &Arc<Self>, agent: AgentId, scopes: &[ScopeId], q: &[f32], p: &SearchParams) -> Result<SearchResult> {
        self.check_live()?;
        validate(q, self.cfg.dimension)?;
        if p.k == 0 || p.nprobe == 0 {
            return Err(Error::usage("k and nprobe must be at least 1"));
        }
        let scopes = self.scope_set(scopes)?;
        let _gate = self.gate.read();
        let st_ref = self.agent(agent)?;
        let mut st = st_ref.lock();
        let use_cache = self.cache_on() && !p.bypass_cache;
        let kk = if use_cache { p.k.max(self.cfg.cache.kappa * p.k) } else { p.k };
        let mut top = TopK::new(kk);
        let mut stats = SearchStats::default();
        let mut terminated = false;
        let mut seen = HashSet::new();

        if use_cache && p.terminate {
            let (pl0, pl1) = st.predicted();
            let state = |item, version| self.copy_state(item, version, &scopes);
            stats.scanned += st.cache.scan_l0(q, pl0, &state, &mut top, &mut seen) as u64;
            if st.cache.should_terminate(&top, p.k) {
                terminated = true;
                stats.level = Level::L0;
            } else {
                stats.scanned += st.cache.scan_l1(q, pl1, &state, &mut top, &mut seen) as u64;
                if st.cache.should_terminate(&top, p.k) {
                    terminated = true;
                    stats.level = Level::L1;
                }
            }
        }
        let mut probed = Vec::new();
        if !terminated {
            let r = self.l2_scan(&scopes, q, &mut top, p.nprobe, p.ef_search, Some(&seen).filter(|s| !s.is_empty()));
            stats.scanned += r.scanned;
            stats.coarse_computations = r.coarse;
            stats.clusters_probed = r.probed.len() as u32;
            probed = r.probed;
        }
        stats.early_terminated = terminated;
        let ranked = top.into_vec();
        let n = ranked.len().min(p.k);
        let hits = self.to_hits(&ranked[..n]);

        bump(&self.counters.searches, 1);
        bump(&self.counters.scanned, stats.scanned);
        bump(&self.counters.coarse, stats.coarse_computations);
        match stats.level {
            Level::L0 if terminated => bump(&self.counters.early_l0, 1),
            Level::L1 if terminated => bump(&self.counters.early_l1, 1),
            _ => {}
        }

        if use_cache {
            let dists: Vec<f32> = hits.iter().map(|h| h.distance).collect();
            if !terminated {
                st.cache.record_completed(&dists);
            }
            if self.cfg.cache.verify_mode {
                st.verify.queries += 1;
                if terminated {
                    st.verify.early += 1;
                    let returned: Vec<ItemId> = hits.iter().map(|h| h.id).collect();
                    if self.threaded() {
                        let me = self.clone();
                        let (scopes, q, p) = (scopes.clone(), q.to_vec(), *p);
                        self.spawn_background(move || me.verify(agent, &scopes, &q, &p, &returned));
                    } else {
                        let (truth, dists) = self.full_topk(&scopes, q, p);
                        Self::log_verification(&mut st, &truth, &dists, &returned);
                    }
                } else {
                    st.verify.truth += hits.len() as u64;
                }
            }
        }
        self.after_search(&mut st, agent, &scopes, q, &ranked, p, use_cache)?;
        drop(st);
        self.tier_tick(&probed);
        Ok(SearchResult { hits, stats })
    }

    fn full_topk(&self, scopes: &BTreeSet<ScopeId>, q: &[f32], p: &SearchParams) -> (Vec<ItemId>, Vec<f32>) {
        let mut top = TopK::new(p.k);
        self.l2_scan(scopes, q, &mut top, p.nprobe, p.ef_search, None);
        top.into_vec().into_iter().map(|(d, id)| (id, d)).unzip()
    }

    fn log_verification(st: &mut AgentState, truth: &[ItemId], dists: &[f32], returned: &[ItemId]) {
        let got: HashSet<ItemId> = returned.iter().copied().collect();
        st.verify.truth += truth.len() as u64;
        st.verify.misses += truth.iter().filter(|id| !got.contains(id)).count() as u64;
        st.cache.record_completed(dists);
    }

    fn verify(&self, agent: AgentId, scopes: &BTreeSet<ScopeId>, q: &[f32], p: &SearchParams, returned: &[ItemId]) {
        let _gate = self.gate.read();
        let (truth, dists) = self.full_topk(scopes, q, p);
        if let Ok(st) = self.agent(agent) {
            Self::log_verification(&mut st.lock(), &truth, &dists, returned);
        }
    }

    fn to_hits(&self, ranked: &[(f32, ItemId)]) -> Vec<Hit> {
        ranked
            .iter()
            .filter_map(|(d, id)| {
                self.clusters.record(*id).map(|r| Hit {
                    id: *id,
                    distance: *d,
                    scope: r.scope,
                })
            })
            .collect()
    }

    /// Key of the L0 entry an access near `v` belongs to.
    fn l0_key(&self, st: &AgentState, v: &[f32]) -> StateKey {
        if !self.patterns_on() {
            return COLD_KEY;
        }
        st.patterns.align_key(v).unwrap_or(COLD_KEY)
    }

    #[allow(clippy::too_many_arguments)]
    fn after_search(
        self: &Arc<Self>,
        st: &mut AgentState,
        agent: AgentId,
        scopes: &BTreeSet<ScopeId>,
        q: &[f32],
        ranked: &[(f32, ItemId)],
        p: &SearchParams,
        use_cache: bool,
    ) -> Result<()> {
        let fetched: Vec<(CachedCopy, (ClusterId, u32))> = ranked.iter().filter_map(|(_, id)| self.fetch(*id)).collect();
        let k = p.k.min(fetched.len());
        if self.cfg.graph.profiles_enabled {
            let mut by_cluster: BTreeMap<ClusterId, Vec<u32>> = BTreeMap::new();
            for (_, (cid, local)) in &fetched[..k] {
                by_cluster.entry(*cid).or_default().push(*local);
            }
            for (cid, locals) in by_cluster {
                if let Some(c) = self.clusters.get(cid) {
                    c.write().profile_promote(agent, &locals, self.cfg.graph.p_size);
                }
            }
        }
        if !use_cache {
            return Ok(());
        }
        let copies: Vec<CachedCopy> = fetched.into_iter().map(|f| f.0).collect();
        let (_, mut events) = st.cache.l1_capture(q, copies.clone());
        let key = self.l0_key(st, q);
        events.extend(st.cache.promote_to_l0(key, copies[..k].to_vec()));
        self.handle_events(st, agent, events)?;

        if self.patterns_on() {
            st.request.push(q.to_vec());
            st.hint = st.patterns.predict(&st.request).map(|pred| {
                let mut clusters = vec![PredictedCluster::L0(pred.state)];
                if let Some(slot) = st.cache.nearest_l1_slot(&pred.centroid) {
                    clusters.push(PredictedCluster::L1(slot));
                }
                PatternHint {
                    matched_fsm: Some(pred.fsm),
                    predicted_state: Some(pred),
                    predicted_clusters: clusters,
                }
            });
            if self.cfg.pattern.prefetch_enabled {
                self.maybe_prefetch(st, agent, scopes, p)?;
            }
        }
        Ok(())
    }

    /// Repopulates the predicted L0 entry when it is not resident. At most
    /// one prefetch per (agent, state) is in flight.
    fn maybe_prefetch(self: &Arc<Self>, st: &mut AgentState, agent: AgentId, scopes: &BTreeSet<ScopeId>, p: &SearchParams) -> Result<()> {
        let Some(pred) = st.hint.as_ref().and_then(|h| h.predicted_state.clone()) else {
            return Ok(());
        };
        if st.cache.has_l0(pred.state) || st.prefetching.contains(&pred.state) {
            return Ok(());
        }
        bump(&self.counters.prefetches, 1);
        let kk = p.k.max(self.cfg.cache.kappa * p.k);
        if self.threaded() {
            st.prefetching.insert(pred.state);
            let me = self.clone();
            let (scopes, p) = (scopes.clone(), *p);
            self.spawn_background(move || {
                let _gate = me.gate.read();
                let copies = me.prefetch_copies(&scopes, &pred.centroid, kk, &p);
                if let Ok(st) = me.agent(agent) {
                    let mut st = st.lock();
                    st.prefetching.remove(&pred.state);
                    if !st.cache.has_l0(pred.state) {
                        let events = st.cache.promote_to_l0(pred.state, copies);
                        let _ = me.handle_events(&mut st, agent, events);
                    }
                }
            });
        } else {
            let copies = self.prefetch_copies(scopes, &pred.centroid, kk, p);
            let events = st.cache.promote_to_l0(pred.state, copies);
            self.handle_events(st, agent, events)?;
        }
        Ok(())
    }

    fn prefetch_copies(&self, scopes: &BTreeSet<ScopeId>, at: &[f32], kk: usize, p: &SearchParams) -> Vec<CachedCopy> {
        let mut top = TopK::new(kk);
        self.l2_scan(scopes, at, &mut top, p.nprobe, p.ef_search, None);
        top.into_vec().into_iter().filter_map(|(_, id)| self.fetch(id).map(|f| f.0)).collect()
    }

    fn handle_events(&self, st: &mut AgentState, agent: AgentId, events: Vec<CacheEvent>) -> Result<()> {
        for ev in events {
            let CacheEvent::MergeDown { copies, .. } = ev;
            self.merge_down(st, agent, copies)?;
        }
        Ok(())
    }

    /// Moves the still-fresh items of a merged-down L1 cluster out of the
    /// agent's intake clusters into one new L2 cluster per scope.
    fn merge_down(&self, st: &mut AgentState, agent: AgentId, copies: Vec<CachedCopy>) -> Result<()> {
        bump(&self.counters.merge_downs, 1);
        let mut groups: BTreeMap<(ScopeId, ClusterId), Vec<ItemId>> = BTreeMap::new();
        for c in &copies {
            let Some(rec) = self.clusters.record(c.item) else { continue };
            if rec.version != c.version {
                continue;
            }
            let Some(cref) = self.clusters.get(rec.cluster) else { continue };
            if cref.read().kind == ClusterKind::Intake(agent) {
                groups.entry((rec.scope, rec.cluster)).or_default().push(c.item);
            }
        }
        let mut per_scope: BTreeMap<ScopeId, Vec<(ClusterId, ItemId)>> = BTreeMap::new();
        for ((scope, cid), items) in groups {
            per_scope.entry(scope).or_default().extend(items.into_iter().map(|i| (cid, i)));
        }
        for (scope, items) in per_scope {
            let mut members = Vec::with_capacity(items.len());
            for (cid, item) in &items {
                if let Some(cref) = self.clusters.get(*cid) {
                    let c = cref.read();
                    if let Some(l) = c.local_id(*item) {
                        members.push(c.members()[l as usize].clone());
                    }
                }
            }
            if members.is_empty() {
                continue;
            }
            bump(&self.counters.merged_items, members.len() as u64);
            let new_id = self.publish_cluster(scope, members, ClusterKind::Regular)?;
            let mut sources = BTreeSet::new();
            for (cid, item) in &items {
                self.clusters.set_record_cluster(*item, new_id);
                if let Some(cref) = self.clusters.get(*cid) {
                    cref.write().remove_item(*item);
                }
                sources.insert(*cid);
            }
            for cid in sources {
                self.after_removal(cid, Some(st));
            }
            self.maybe_split(new_id, Some(st), agent)?;
        }
        Ok(())
    }

    /// Builds, publishes and links a new cluster. The caller owns the item
    /// records.
    fn publish_cluster(&self, scope: ScopeId, members: Vec<Member>, kind: ClusterKind) -> Result<ClusterId> {
        let id = self.clusters.alloc_cluster_id();
        let cluster = Cluster::new(id, scope, self.cfg.dimension, self.cfg.metric, members).with_kind(kind);
        let centroid = cluster.centroid().clone();
        let mut g = self.graph.write();
        self.clusters.publish(cluster)?;
        g.insert(scope, id, &centroid);
        Ok(id)
    }

    /// Retires an empty cluster, or refreshes its centroid when due.
    fn after_removal(&self, cid: ClusterId, st: Option<&mut AgentState>) {
        let Some(cref) = self.clusters.get(cid) else { return };
        let empty = cref.read().is_empty();
        if !empty {
            self.maintain(cid, false);
            return;
        }
        {
            let mut c = cref.write();
            if !c.is_empty() {
                return;
            }
            evict(&mut c, &self.budget);
            bump(&self.counters.retired_flushes, c.tier().flushes());
        }
        let mut g = self.graph.write();
        if self.clusters.unpublish(cid).is_some() {
            g.remove(cid);
        }
        drop(g);
        self.tier.lock().forget(cid);
        if let Some(st) = st {
            st.intake.retain(|(_, c)| *c != cid);
        }
    }

    /// Lazy centroid refresh: recomputes after `maintenance_interval`
    /// mutations (or always when `force`), then updates the coarse graph.
    fn maintain(&self, cid: ClusterId, force: bool) {
        let interval = self.cfg.cluster.maintenance_interval;
        if interval == 0 && !force {
            return;
        }
        let Some(cref) = self.clusters.get(cid) else { return };
        let centroid = {
            let mut c = cref.write();
            if c.is_retired() || c.is_empty() {
                return;
            }
            if !force && c.mutations_since_maintenance() < interval {
                return;
            }
            if !c.maintain() {
                return;
            }
            c.centroid().clone()
        };
        self.graph.write().update_centroid(cid, &centroid);
    }

    fn maybe_split(&self, cid: ClusterId, st: Option<&mut AgentState>, agent: AgentId) -> Result<Option<SplitOutcome>> {
        let _ = agent;
        if !self.cfg.cluster.split_enabled {
            return Ok(None);
        }
        let Some(cref) = self.clusters.get(cid) else { return Ok(None) };
        let use_accel = {
            let mut c = cref.write();
            if c.is_retired() || c.len() < self.cfg.cluster.split_threshold {
                return Ok(None);
            }
            let resident = c.tier().is_resident() && self.accel.is_some();
            bump(&self.counters.retired_flushes, c.tier().flushes());
            evict(&mut c, &self.budget);
            resident
        };
        let exec: &dyn Executor = match (use_accel, self.accel()) {
            (true, Some(a)) => a,
            _ => &self.host,
        };
        let outcome = {
            let mut rng = self.rng.lock();
            self.clusters.split_cluster(cid, exec, &mut *rng)?
        };
        {
            let mut g = self.graph.write();
            g.remove(cid);
            for child in &outcome.children {
                if let Some(c) = self.clusters.get(*child) {
                    let (scope, centroid) = {
                        let c = c.read();
                        (c.scope, c.centroid().clone())
                    };
                    g.insert(scope, *child, &centroid);
                }
            }
        }
        self.tier.lock().forget(cid);
        if let Some(st) = st {
            st.intake.retain(|(_, c)| *c != cid);
        }
        bump(&self.counters.splits, 1);
        Ok(Some(outcome))
    }

    fn intake_cluster(&self, st: &mut AgentState, scope: ScopeId) -> Option<ClusterId> {
        let id = st.intake_of(scope)?;
        match self.clusters.get(id) {
            Some(c) if !c.read().is_retired() => Some(id),
            _ => {
                st.set_intake(scope, None);
                None
            }
        }
    }

    /// Gives a new member its L2 home: the agent's intake cluster for the
    /// scope (cascade placement) or the nearest cluster of the scope.
    fn place(&self, st: &mut AgentState, agent: AgentId, scope: ScopeId, member: Member, rec: ItemRecord) -> Result<()> {
        let target = match self.cfg.engine.insert_placement {
            InsertPlacement::Cascade => self.intake_cluster(st, scope),
            InsertPlacement::Nearest => {
                let cands = self.clusters.clusters_in(scope);
                if cands.is_empty() {
                    None
                } else {
                    Some(self.clusters.assign_nearest(&member.vector, &cands)?)
                }
            }
        };
        let item = member.item;
        let Some(cid) = target else {
            let kind = match self.cfg.engine.insert_placement {
                InsertPlacement::Cascade => ClusterKind::Intake(agent),
                InsertPlacement::Nearest => ClusterKind::Regular,
            };
            let id = self.clusters.alloc_cluster_id();
            self.clusters.put_record(item, ItemRecord { cluster: id, ..rec });
            let cluster = Cluster::new(id, scope, self.cfg.dimension, self.cfg.metric, vec![member]).with_kind(kind);
            let centroid = cluster.centroid().clone();
            {
                let mut g = self.graph.write();
                self.clusters.publish(cluster)?;
                g.insert(scope, id, &centroid);
            }
            if kind != ClusterKind::Regular {
                st.set_intake(scope, Some(id));
            }
            return Ok(());
        };
        let cref = self.clusters.get(cid).ok_or_else(|| Error::usage(format!("cluster {cid} vanished")))?;
        self.clusters.put_record(item, ItemRecord { cluster: cid, ..rec });
        let (ticket_created, demoted, len) = {
            let mut c = cref.write();
            let out = buffered_insert(&mut c, member, &self.cfg.tier, &self.budget);
            if out.ticket_created && !self.threaded() {
                complete_migration(&mut c, &self.budget);
                bump(&self.counters.migrations, 1);
            }
            let demoted = out.ticket_created && !c.tier().is_resident() && c.tier().ticket().is_none();
            (out.ticket_created, demoted, c.len())
        };
        if demoted {
            self.tier.lock().mark_evicted(cid);
        } else if ticket_created && self.threaded() {
            self.spawn_migration(cid);
        }
        self.maintain(cid, false);
        if len >= self.cfg.cluster.split_threshold {
            if self.cfg.engine.insert_placement == InsertPlacement::Cascade && self.cache_on() {
                let events = st.cache.flush_l1();
                self.handle_events(st, agent, events)?;
            }
            self.maybe_split(cid, Some(st), agent)?;
        }
        Ok(())
    }

    fn insert(self: &Arc<Self>, agent: AgentId, scope: ScopeId, items: Vec<NewItem>) -> Result<Vec<ItemId>> {
        self.check_live()?;
        self.check_write(agent, scope)?;
        if !self.clusters.has_scope(scope) {
            return Err(Error::usage(format!("unknown scope {scope}")));
        }
        let mut explicit = HashSet::new();
        for it in &items {
            validate(&it.vector, self.cfg.dimension)?;
            if let Some(id) = it.id {
                if !explicit.insert(id) || self.clusters.record(id).is_some() {
                    return Err(Error::usage(format!("item {id} already exists")));
                }
            }
        }
        let _gate = self.gate.read();
        let st_ref = self.agent(agent)?;
        let mut st = st_ref.lock();
        let mut ids = Vec::with_capacity(items.len());
        let mut promoted: Vec<(StateKey, CachedCopy)> = Vec::new();
        for it in items {
            let id = match it.id {
                Some(id) => {
                    self.next_item.fetch_max(id + 1, Ordering::SeqCst);
                    id
                }
                None => self.alloc_item_id(),
            };
            let version = self.next_version();
            let member = Member {
                item: id,
                vector: it.vector.clone(),
            };
            let rec = ItemRecord {
                cluster: ClusterId(0),
                scope,
                version,
                payload: Arc::from(it.payload),
            };
            self.place(&mut st, agent, scope, member, rec)?;
            if self.cache_on() {
                let key = self.l0_key(&st, &it.vector);
                promoted.push((
                    key,
                    CachedCopy {
                        item: id,
                        version,
                        vector: it.vector,
                    },
                ));
            }
            ids.push(id);
        }
        let mut events = Vec::new();
        for (key, copy) in promoted {
            if self.clusters.is_live(copy.item, copy.version) {
                events.extend(st.cache.promote_to_l0(key, vec![copy]));
            }
        }
        self.handle_events(&mut st, agent, events)?;
        bump(&self.counters.inserts, ids.len() as u64);
        drop(st);
        self.tier_tick(&[]);
        Ok(ids)
    }

    fn alloc_item_id(&self) -> ItemId {
        loop {
            let id = self.next_item.fetch_add(1, Ordering::SeqCst);
            if self.clusters.record(id).is_none() {
                return id;
            }
        }
    }

    fn delete(&self, agent: AgentId, item: ItemId) -> Result<bool> {
        self.check_live()?;
        let _gate = self.gate.read();
        let Some(rec) = self.clusters.record(item) else { return Ok(false) };
        self.check_write(agent, rec.scope)?;
        let st_ref = self.agent(agent)?;
        let mut st = st_ref.lock();
        let Some((cid, _)) = self.clusters.delete_item(item) else { return Ok(false) };
        st.cache.remove_item(item);
        self.after_removal(cid, Some(&mut st));
        bump(&self.counters.deletes, 1);
        Ok(true)
    }

    fn update(&self, agent: AgentId, item: ItemId, vector: Vector, payload: Vec<u8>) -> Result<bool> {
        self.check_live()?;
        validate(&vector, self.cfg.dimension)?;
        let _gate = self.gate.write();
        let Some(rec) = self.clusters.record(item) else { return Ok(false) };
        self.check_write(agent, rec.scope)?;
        let st_ref = self.agent(agent)?;
        let mut st = st_ref.lock();
        let Some((cid, _)) = self.clusters.delete_item(item) else { return Ok(false) };
        st.cache.remove_item(item);
        self.after_removal(cid, Some(&mut st));
        let version = self.next_version();
        let member = Member {
            item,
            vector: vector.clone(),
        };
        let new_rec = ItemRecord {
            cluster: ClusterId(0),
            scope: rec.scope,
            version,
            payload: Arc::from(payload),
        };
        self.place(&mut st, agent, rec.scope, member, new_rec)?;
        if self.cache_on() {
            let key = self.l0_key(&st, &vector);
            let events = st.cache.promote_to_l0(key, vec![CachedCopy { item, version, vector }]);
            self.handle_events(&mut st, agent, events)?;
        }
        bump(&self.counters.updates, 1);
        Ok(true)
    }

    /// Counts an operation against the tier plan and re-evaluates the hotset
    /// every `hotset_interval` operations.
    fn tier_tick(&self, probed: &[ClusterId]) {
        if self.accel.is_none() {
            return;
        }
        let due = {
            let mut t = self.tier.lock();
            t.tick();
            for c in probed {
                t.record_access(*c);
            }
            t.clock() % self.cfg.tier.hotset_interval.max(1) == 0
        };
        if due {
            self.rebalance();
        }
    }

    fn rebalance(&self) {
        if self.accel.is_none() {
            return;
        }
        let mut sizes = BTreeMap::new();
        let mut resident = BTreeMap::new();
        for c in self.clusters.all() {
            let c = c.read();
            if c.is_retired() {
                continue;
            }
            sizes.insert(c.id, c.len());
            if c.tier().is_resident() {
                resident.insert(c.id, c.tier().resident_bytes);
            }
        }
        let actions = self.tier.lock().hotset_update(&sizes, &resident, self.budget.limit());
        for a in actions {
            match a {
                TierAction::Evict(id) => {
                    if let Some(c) = self.clusters.get(id) {
                        evict(&mut c.write(), &self.budget);
                        bump(&self.counters.evictions, 1);
                    }
                }
                TierAction::Admit(id) => {
                    let Some(cref) = self.clusters.get(id) else { continue };
                    let ok = {
                        let mut c = cref.write();
                        match begin_migration(&mut c, self.cfg.tier.slack_fraction, &self.budget) {
                            Ok(()) => {
                                if !self.threaded() {
                                    complete_migration(&mut c, &self.budget);
                                }
                                true
                            }
                            Err(_) => false,
                        }
                    };
                    if ok {
                        bump(&self.counters.admissions, 1);
                        if self.threaded() {
                            self.spawn_migration(id);
                        } else {
                            bump(&self.counters.migrations, 1);
                        }
                    } else {
                        self.tier.lock().mark_evicted(id);
                    }
                }
            }
        }
    }

    /// Advances a migration one phase at a time on the background pool,
    /// releasing the cluster lock between phases.
    fn spawn_migration(&self, id: ClusterId) {
        let Some(cref) = self.clusters.get(id) else { return };
        let budget = self.budget.clone();
        let shutdown = self.shutdown_flag();
        let task = move || loop {
            let mut c = cref.write();
            if shutdown.load(Ordering::SeqCst) {
                abort_to_host(&mut c, &budget);
                return;
            }
            match advance_migration(&mut c, &budget) {
                None | Some(MigrationPhase::Done) => return,
                Some(_) => {}
            }
        };
        bump(&self.counters.migrations, 1);
        self.spawn_background(task);
    }

    fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    fn spawn_background(&self, task: impl FnOnce() + Send + 'static) {
        if self.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let flag = self.shutdown_flag();
        self.pools().background.spawn(move || {
            if !flag.load(Ordering::SeqCst) {
                task();
            }
        });
    }

    fn pools(&self) -> &dispatch::Pools {
        self.pools.get_or_init(|| dispatch::Pools::new(&self.cfg.engine))
    }

    fn scan_order_to_recall(&self, agent: AgentId, scopes: &[ScopeId], q: &[f32], truth: &[ItemId]) -> Result<Option<u64>> {
        validate(q, self.cfg.dimension)?;
        let scopes = self.scope_set(scopes)?;
        let _gate = self.gate.read();
        let st_ref = self.agent(agent)?;
        let st = st_ref.lock();
        let mut need: HashSet<ItemId> = truth.iter().copied().collect();
        let mut seen: HashSet<ItemId> = HashSet::new();
        let mut count = 0u64;
        if need.is_empty() {
            return Ok(Some(0));
        }
        let mut visit = |item: ItemId| -> bool {
            count += 1;
            need.remove(&item);
            need.is_empty()
        };
        if self.cache_on() {
            let (pl0, pl1) = st.predicted();
            for key in st.cache.l0_order(q, pl0) {
                let e = st.cache.l0_entry(key).expect("ordered from table");
                for c in e.copies() {
                    if self.copy_state(c.item, c.version, &scopes) == CopyState::Visible && seen.insert(c.item) && visit(c.item) {
                        return Ok(Some(count));
                    }
                }
            }
            for slot in st.cache.l1_order(q, pl1).into_iter().take(self.cfg.cache.l1_nprobe.max(1)) {
                let cl = st.cache.l1_cluster(slot).expect("ordered from table");
                for c in cl.copies() {
                    if self.copy_state(c.item, c.version, &scopes) == CopyState::Visible && seen.insert(c.item) && visit(c.item) {
                        return Ok(Some(count));
                    }
                }
            }
        }
        let mut order: Vec<(f32, ClusterId)> = Vec::new();
        for s in &scopes {
            for id in self.clusters.clusters_in(*s) {
                if let Some(c) = self.clusters.get(id) {
                    let c = c.read();
                    if !c.is_empty() {
                        order.push((self.cfg.metric.distance(q, c.centroid()), id));
                    }
                }
            }
        }
        order.sort_by(|a, b| crate::vector::rank_cmp((a.0, a.1 .0), (b.0, b.1 .0)));
        let profile_agent = self.cfg.graph.profiles_enabled.then_some(agent);
        for (_, id) in order {
            let Some(c) = self.clusters.get(id) else { continue };
            let c = c.read();
            for local in c.scan_order(profile_agent) {
                let item = c.members()[local as usize].item;
                if !seen.contains(&item) && visit(item) {
                    return Ok(Some(count));
                }
            }
        }
        Ok(None)
    }

    fn stats(&self) -> StoreStats {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let mut flushes = get(&c.retired_flushes);
        let mut resident = 0;
        for cl in self.clusters.all() {
            let cl = cl.read();
            flushes += cl.tier().flushes();
            if cl.tier().is_resident() {
                resident += 1;
            }
        }
        StoreStats {
            searches: get(&c.searches),
            inserts: get(&c.inserts),
            updates: get(&c.updates),
            deletes: get(&c.deletes),
            early_l0: get(&c.early_l0),
            early_l1: get(&c.early_l1),
            scanned: get(&c.scanned),
            coarse_computations: get(&c.coarse),
            merge_downs: get(&c.merge_downs),
            merged_items: get(&c.merged_items),
            splits: get(&c.splits),
            prefetches: get(&c.prefetches),
            admissions: get(&c.admissions),
            evictions: get(&c.evictions),
            migrations: get(&c.migrations),
            buffer_flushes: flushes,
            batches: get(&c.batches),
            clusters: self.clusters.cluster_count(),
            items: self.clusters.item_count(),
            resident_clusters: resident,
            budget_used: self.budget.used(),
        }
    }
}
