//! Two-tier execution: a host tier that owns every cluster and an accelerator
//! tier that caches the hottest clusters under a fixed memory budget.
//!
//! The host member list of a cluster is always the authoritative logical
//! member multiset. A resident cluster additionally has an accelerator region
//! holding a copy of a prefix of that history; members inserted since the last
//! expansion sit in the host-side insertion buffer. For every resident cluster
//! `region ∪ buffer == host members` holds as multisets at every instant, which
//! is what makes the merged two-tier scan exact.
//!
//! The default build ships a simulated accelerator: it computes on the host
//! but accounts latency with a launch-overhead-dominated cost model.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, Member};
use crate::config::TierConfig;
use crate::topk::TopK;
use crate::vector::{ClusterId, ItemId, Metric, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecutorKind {
    Host,
    Accelerator,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} executor failure: {reason}")]
pub struct ExecutorError {
    pub kind: ExecutorKind,
    pub reason: String,
}

/// Latency model, in nanoseconds, for scanning `n` vectors on each tier and
/// for moving bytes between and within tiers.
///
/// Host cost grows linearly with the vector count; accelerator cost is
/// dominated by a fixed launch overhead. The defaults cross over at 128
/// vectors and give the accelerator a >3x advantage from 512 vectors on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub host_fixed_ns: f64,
    pub host_per_vector_ns: f64,
    pub accel_fixed_ns: f64,
    pub accel_per_vector_ns: f64,
    pub cross_tier_ns_per_byte: f64,
    pub intra_tier_ns_per_byte: f64,
    pub alloc_fixed_ns: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            host_fixed_ns: 2_000.0,
            host_per_vector_ns: 80.0,
            accel_fixed_ns: 12_000.0,
            accel_per_vector_ns: 2.0,
            cross_tier_ns_per_byte: 0.08,
            intra_tier_ns_per_byte: 0.002,
            alloc_fixed_ns: 20_000.0,
        }
    }
}

impl CostModel {
    pub fn host_scan_ns(&self, n: usize) -> f64 {
        self.host_fixed_ns + self.host_per_vector_ns * n as f64
    }

    pub fn accel_scan_ns(&self, n: usize) -> f64 {
        self.accel_fixed_ns + self.accel_per_vector_ns * n as f64
    }

    /// Largest buffer size whose host scan is no slower than the
    /// accelerator scan of a cluster. Returns 0 when the host is never
    /// faster.
    pub fn buffer_size_rule(&self) -> usize {
        let slope = self.host_per_vector_ns - self.accel_per_vector_ns;
        let gap = self.accel_fixed_ns - self.host_fixed_ns;
        if gap < 0.0 {
            return 0;
        }
        if slope <= 0.0 {
            return usize::MAX;
        }
        (gap / slope).floor() as usize
    }
}

/// Per-executor call accounting. Tests use it to observe dispatch.
#[derive(Debug, Default)]
pub struct CallLog {
    pub scans: AtomicU64,
    pub scanned_vectors: AtomicU64,
    pub assigns: AtomicU64,
    pub simulated_ns: AtomicU64,
}

impl CallLog {
    pub fn scans(&self) -> u64 {
        self.scans.load(Ordering::Relaxed)
    }

    pub fn assigns(&self) -> u64 {
        self.assigns.load(Ordering::Relaxed)
    }

    pub fn simulated_ns(&self) -> u64 {
        self.simulated_ns.load(Ordering::Relaxed)
    }
}

pub trait Executor: Send + Sync + fmt::Debug {
    fn kind(&self) -> ExecutorKind;

    /// Distances from `q` to every member, in member order.
    fn scan(&self, members: &[Member], q: &[f32], metric: Metric) -> Result<Vec<f32>, ExecutorError>;

    /// Nearest-centroid index per point; ties go to the lower index.
    fn assign(
        &self,
        points: &[Vector],
        centroids: &[Vec<f32>],
        metric: Metric,
    ) -> Result<Vec<usize>, ExecutorError>;

    fn log(&self) -> &CallLog;
}

pub type ExecutorHandle = Arc<dyn Executor>;

fn compute_scan(members: &[Member], q: &[f32], metric: Metric) -> Vec<f32> {
    members.iter().map(|m| metric.distance(&m.vector, q)).collect()
}

fn compute_assign(points: &[Vector], centroids: &[Vec<f32>], metric: Metric) -> Vec<usize> {
    let nearest = |p: &Vector| {
        let mut best = 0usize;
        let mut best_d = f32::INFINITY;
        for (i, c) in centroids.iter().enumerate() {
            let d = metric.distance(p, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };
    if points.len() * centroids.len() >= 1 << 16 {
        points.par_iter().map(nearest).collect()
    } else {
        points.iter().map(nearest).collect()
    }
}

#[derive(Debug, Default)]
pub struct HostExecutor {
    cost: CostModel,
    log: CallLog,
}

impl HostExecutor {
    pub fn new(cost: CostModel) -> Self {
        Self {
            cost,
            log: CallLog::default(),
        }
    }
}

impl Executor for HostExecutor {
    fn kind(&self) -> ExecutorKind {
        ExecutorKind::Host
    }

    fn scan(&self, members: &[Member], q: &[f32], metric: Metric) -> Result<Vec<f32>, ExecutorError> {
        self.log.scans.fetch_add(1, Ordering::Relaxed);
        self.log
            .scanned_vectors
            .fetch_add(members.len() as u64, Ordering::Relaxed);
        self.log
            .simulated_ns
            .fetch_add(self.cost.host_scan_ns(members.len()) as u64, Ordering::Relaxed);
        Ok(compute_scan(members, q, metric))
    }

    fn assign(
        &self,
        points: &[Vector],
        centroids: &[Vec<f32>],
        metric: Metric,
    ) -> Result<Vec<usize>, ExecutorError> {
        self.log.assigns.fetch_add(1, Ordering::Relaxed);
        let work = points.len() * centroids.len();
        self.log
            .simulated_ns
            .fetch_add(self.cost.host_scan_ns(work) as u64, Ordering::Relaxed);
        Ok(compute_assign(points, centroids, metric))
    }

    fn log(&self) -> &CallLog {
        &self.log
    }
}

/// Accelerator stand-in: host arithmetic, accelerator latency accounting,
/// and failure injection for exercising the fallback paths.
#[derive(Debug, Default)]
pub struct SimulatedAccelerator {
    cost: CostModel,
    log: CallLog,
    fail_next: AtomicU32,
}

impl SimulatedAccelerator {
    pub fn new(cost: CostModel) -> Self {
        Self {
            cost,
            log: CallLog::default(),
            fail_next: AtomicU32::new(0),
        }
    }

    /// The next `n` calls fail.
    pub fn inject_failures(&self, n: u32) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    fn check_fail(&self) -> Result<(), ExecutorError> {
        let took = self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1));
        if took.is_ok() {
            return Err(ExecutorError {
                kind: ExecutorKind::Accelerator,
                reason: "injected failure".into(),
            });
        }
        Ok(())
    }
}

impl Executor for SimulatedAccelerator {
    fn kind(&self) -> ExecutorKind {
        ExecutorKind::Accelerator
    }

    fn scan(&self, members: &[Member], q: &[f32], metric: Metric) -> Result<Vec<f32>, ExecutorError> {
        self.check_fail()?;
        self.log.scans.fetch_add(1, Ordering::Relaxed);
        self.log
            .scanned_vectors
            .fetch_add(members.len() as u64, Ordering::Relaxed);
        self.log
            .simulated_ns
            .fetch_add(self.cost.accel_scan_ns(members.len()) as u64, Ordering::Relaxed);
        Ok(compute_scan(members, q, metric))
    }

    fn assign(
        &self,
        points: &[Vector],
        centroids: &[Vec<f32>],
        metric: Metric,
    ) -> Result<Vec<usize>, ExecutorError> {
        self.check_fail()?;
        self.log.assigns.fetch_add(1, Ordering::Relaxed);
        let work = points.len() * centroids.len();
        self.log
            .simulated_ns
            .fetch_add(self.cost.accel_scan_ns(work) as u64, Ordering::Relaxed);
        Ok(compute_assign(points, centroids, metric))
    }

    fn log(&self) -> &CallLog {
        &self.log
    }
}

/// Accelerator memory budget shared by all clusters.
#[derive(Debug)]
pub struct Budget {
    limit: u64,
    used: AtomicU64,
}

impl Budget {
    pub fn new(limit: u64) -> Self {
        Self {
            limit,
            used: AtomicU64::new(0),
        }
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn try_reserve(&self, bytes: u64) -> bool {
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| {
                u.checked_add(bytes).filter(|n| *n <= self.limit)
            })
            .is_ok()
    }

    pub fn release(&self, bytes: u64) {
        let prev = self.used.fetch_sub(bytes, Ordering::SeqCst);
        debug_assert!(prev >= bytes, "budget release underflow");
    }
}

/// Accelerator-side copy of a cluster prefix.
#[derive(Debug, Clone)]
pub struct ResidentRegion {
    pub members: Vec<Member>,
    /// Allocated slots, including expansion slack.
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MigrationPhase {
    /// New region reserved in the budget.
    Allocated,
    /// Old region and buffer prefix copied into the new region.
    Copying,
    /// Serving handle switched to the new region; old region not yet released.
    Switching,
    Done,
}

#[derive(Debug)]
pub struct MigrationTicket {
    pub cluster: ClusterId,
    pub phase: MigrationPhase,
    new_region: Option<ResidentRegion>,
    new_bytes: u64,
    /// Buffer prefix length copied into the new region.
    taken: usize,
}

impl MigrationTicket {
    pub fn phase(&self) -> MigrationPhase {
        self.phase
    }
}

/// Tier state carried by every cluster.
#[derive(Debug, Default)]
pub struct TierSlot {
    pub(crate) resident: Option<Arc<ResidentRegion>>,
    pub(crate) resident_bytes: u64,
    pub(crate) buffer: Vec<Member>,
    pub(crate) ticket: Option<MigrationTicket>,
    pub(crate) flushes: u64,
}

impl TierSlot {
    pub fn is_resident(&self) -> bool {
        self.resident.is_some()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn buffer(&self) -> &[Member] {
        &self.buffer
    }

    pub fn resident_members(&self) -> Option<&[Member]> {
        self.resident.as_deref().map(|r| r.members.as_slice())
    }

    pub fn ticket(&self) -> Option<&MigrationTicket> {
        self.ticket.as_ref()
    }

    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    pub fn residency(&self) -> Residency {
        if self.resident.is_some() {
            Residency::AcceleratorCached
        } else {
            Residency::HostOnly
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Residency {
    HostOnly,
    AcceleratorCached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    BufferedHost,
    DirectHost,
}

/// Outcome of a buffered insert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertOutcome {
    pub placement: Placement,
    /// The insert filled the buffer and a migration ticket was created.
    pub ticket_created: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationAborted;

pub(crate) fn region_bytes(capacity: usize, dimension: usize) -> u64 {
    capacity as u64 * (dimension as u64 * 4 + 8)
}

fn slack_capacity(len: usize, slack: f32) -> usize {
    ((len as f64) * (1.0 + f64::from(slack))).ceil().max(1.0) as usize
}

/// Appends `member` to the cluster. Resident (or migrating) clusters stage it
/// in the insertion buffer; the insert that fills the buffer opens a
/// migration ticket.
pub fn buffered_insert(
    cluster: &mut Cluster,
    member: Member,
    cfg: &TierConfig,
    budget: &Budget,
) -> InsertOutcome {
    let staged = cluster.tier.resident.is_some() || cluster.tier.ticket.is_some();
    if !staged {
        cluster.push_member(member);
        return InsertOutcome {
            placement: Placement::DirectHost,
            ticket_created: false,
        };
    }
    if cluster.tier.buffer.len() >= cfg.b_insert && cluster.tier.ticket.is_some() {
        // Exactly one migration per cluster: finish the in-flight one first.
        complete_migration(cluster, budget);
    }
    cluster.push_member(member.clone());
    if cluster.tier.resident.is_none() && cluster.tier.ticket.is_none() {
        // The migration just completed was aborted; the cluster is host-only now.
        return InsertOutcome {
            placement: Placement::DirectHost,
            ticket_created: false,
        };
    }
    cluster.tier.buffer.push(member);
    let mut ticket_created = false;
    if cluster.tier.buffer.len() >= cfg.b_insert && cluster.tier.ticket.is_none() {
        ticket_created = true;
        let _ = begin_migration(cluster, cfg.slack_fraction, budget);
    }
    InsertOutcome {
        placement: Placement::BufferedHost,
        ticket_created,
    }
}

/// Opens a migration ticket: reserves a region sized for the resident part,
/// the buffered part and the expansion slack. Admission of a host-only
/// cluster is a migration with no old region.
pub fn begin_migration(
    cluster: &mut Cluster,
    slack: f32,
    budget: &Budget,
) -> Result<(), MigrationAborted> {
    if cluster.tier.ticket.is_some() {
        return Ok(());
    }
    let logical = match &cluster.tier.resident {
        Some(r) => r.members.len() + cluster.tier.buffer.len(),
        None => cluster.members().len(),
    };
    let capacity = slack_capacity(logical, slack);
    let bytes = region_bytes(capacity, cluster.dimension());
    if !budget.try_reserve(bytes) {
        abort_to_host(cluster, budget);
        return Err(MigrationAborted);
    }
    cluster.tier.ticket = Some(MigrationTicket {
        cluster: cluster.id,
        phase: MigrationPhase::Allocated,
        new_region: Some(ResidentRegion {
            members: Vec::with_capacity(capacity),
            capacity,
        }),
        new_bytes: bytes,
        taken: 0,
    });
    Ok(())
}

/// Moves the in-flight ticket one phase forward. Returns the phase reached,
/// or `None` when no ticket is in flight.
pub fn advance_migration(cluster: &mut Cluster, budget: &Budget) -> Option<MigrationPhase> {
    let phase = cluster.tier.ticket.as_ref()?.phase;
    match phase {
        MigrationPhase::Allocated => {
            let taken = cluster.tier.buffer.len();
            let copied: Vec<Member> = match &cluster.tier.resident {
                // Resident part moves tier-locally, buffered part crosses tiers.
                Some(old) => old
                    .members
                    .iter()
                    .chain(cluster.tier.buffer.iter())
                    .cloned()
                    .collect(),
                // Admission: the whole host list crosses tiers; anything already
                // buffered is part of that list.
                None => cluster.members().to_vec(),
            };
            let ticket = cluster.tier.ticket.as_mut().expect("ticket checked above");
            let region = ticket.new_region.as_mut().expect("region allocated");
            region.members = copied;
            ticket.taken = taken;
            ticket.phase = MigrationPhase::Copying;
        }
        MigrationPhase::Copying => {
            let ticket = cluster.tier.ticket.as_mut().expect("ticket checked above");
            let region = ticket.new_region.take().expect("copied region");
            let taken = ticket.taken;
            ticket.phase = MigrationPhase::Switching;
            cluster.tier.resident = Some(Arc::new(region));
            cluster.tier.buffer.drain(..taken);
            cluster.tier.flushes += 1;
        }
        MigrationPhase::Switching => {
            let ticket = cluster.tier.ticket.take().expect("ticket checked above");
            budget.release(cluster.tier.resident_bytes);
            cluster.tier.resident_bytes = ticket.new_bytes;
            return Some(MigrationPhase::Done);
        }
        MigrationPhase::Done => {
            cluster.tier.ticket = None;
            return Some(MigrationPhase::Done);
        }
    }
    cluster.tier.ticket.as_ref().map(|t| t.phase)
}

/// Runs the in-flight ticket to completion.
pub fn complete_migration(cluster: &mut Cluster, budget: &Budget) {
    while let Some(phase) = advance_migration(cluster, budget) {
        if phase == MigrationPhase::Done {
            break;
        }
    }
}

/// Aborts the in-flight ticket (if any) and demotes the cluster to host-only.
/// Buffered members are already part of the host list, so nothing is lost.
pub fn abort_to_host(cluster: &mut Cluster, budget: &Budget) {
    if let Some(ticket) = cluster.tier.ticket.take() {
        if ticket.phase >= MigrationPhase::Switching {
            // The new region already serves; the old one is what remains to free.
            budget.release(cluster.tier.resident_bytes);
            cluster.tier.resident_bytes = ticket.new_bytes;
        } else {
            budget.release(ticket.new_bytes);
        }
    }
    evict(cluster, budget);
}

/// Drops the accelerator copy of a cluster and releases its budget.
pub fn evict(cluster: &mut Cluster, budget: &Budget) {
    if let Some(ticket) = cluster.tier.ticket.take() {
        if ticket.phase >= MigrationPhase::Switching {
            budget.release(cluster.tier.resident_bytes);
            cluster.tier.resident_bytes = ticket.new_bytes;
        } else {
            budget.release(ticket.new_bytes);
        }
    }
    if cluster.tier.resident.take().is_some() {
        budget.release(cluster.tier.resident_bytes);
    }
    cluster.tier.resident_bytes = 0;
    cluster.tier.buffer.clear();
}

/// Removes `item` from every tier copy of the cluster (the host list is
/// handled by the cluster itself).
pub(crate) fn remove_from_tiers(slot: &mut TierSlot, item: ItemId) {
    if let Some(pos) = slot.buffer.iter().position(|m| m.item == item) {
        slot.buffer.remove(pos);
        if let Some(t) = slot.ticket.as_mut() {
            if t.phase == MigrationPhase::Copying && pos < t.taken {
                t.taken -= 1;
            }
        }
    }
    if let Some(region) = slot.resident.as_mut() {
        if region.members.iter().any(|m| m.item == item) {
            let r = Arc::make_mut(region);
            r.members.retain(|m| m.item != item);
        }
    }
    if let Some(t) = slot.ticket.as_mut() {
        if let Some(region) = t.new_region.as_mut() {
            region.members.retain(|m| m.item != item);
        }
    }
}

/// Exact top-`k` over the cluster's logical members. Resident clusters are
/// scanned on the accelerator (region) and the host (buffer) and the partial
/// results merged; an accelerator failure falls back to a host scan of the
/// full member list.
pub fn merged_search(
    cluster: &Cluster,
    q: &[f32],
    k: usize,
    metric: Metric,
    host: &dyn Executor,
    accel: Option<&dyn Executor>,
) -> Vec<(f32, ItemId)> {
    let mut top = TopK::new(k);
    scan_into(cluster, q, metric, host, accel, None, &mut |d, id| top.push(d, id));
    top.into_vec()
}

/// Feeds every (distance, id) of the cluster's logical members to `sink`.
/// Host scans leave out members in `skip`. Returns the number of vectors
/// scanned.
pub(crate) fn scan_into(
    cluster: &Cluster,
    q: &[f32],
    metric: Metric,
    host: &dyn Executor,
    accel: Option<&dyn Executor>,
    skip: Option<&HashSet<ItemId>>,
    sink: &mut dyn FnMut(f32, ItemId),
) -> usize {
    if let (Some(region), Some(accel)) = (cluster.tier.resident.as_deref(), accel) {
        if let Ok(ds) = accel.scan(&region.members, q, metric) {
            for (m, d) in region.members.iter().zip(ds) {
                sink(d, m.item);
            }
            let buf = host
                .scan(&cluster.tier.buffer, q, metric)
                .expect("host executor is infallible");
            for (m, d) in cluster.tier.buffer.iter().zip(buf) {
                sink(d, m.item);
            }
            return region.members.len() + cluster.tier.buffer.len();
        }
    }
    let filtered: Vec<Member>;
    let members = match skip {
        Some(skip) if cluster.members().iter().any(|m| skip.contains(&m.item)) => {
            filtered = cluster.members().iter().filter(|m| !skip.contains(&m.item)).cloned().collect();
            &filtered[..]
        }
        _ => cluster.members(),
    };
    let ds = host.scan(members, q, metric).expect("host executor is infallible");
    for (m, d) in members.iter().zip(ds) {
        sink(d, m.item);
    }
    members.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Decayed {
    value: f64,
    at: u64,
}

impl Decayed {
    fn at(&self, now: u64, half_life: u64) -> f64 {
        let dt = now.saturating_sub(self.at) as f64;
        self.value * (0.5f64).powf(dt / half_life.max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TierAction {
    Admit(ClusterId),
    Evict(ClusterId),
}

/// Access-frequency tracking and hotset selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TierPlan {
    cfg: TierConfig,
    dimension: usize,
    clock: u64,
    freq: BTreeMap<ClusterId, Decayed>,
    hotset: BTreeSet<ClusterId>,
}

impl TierPlan {
    pub fn new(cfg: TierConfig, dimension: usize) -> Self {
        Self {
            cfg,
            dimension,
            clock: 0,
            freq: BTreeMap::new(),
            hotset: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &TierConfig {
        &self.cfg
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn tick(&mut self) {
        self.clock += 1;
    }

    pub fn record_access(&mut self, c: ClusterId) {
        let now = self.clock;
        let hl = self.cfg.decay_half_life;
        let e = self.freq.entry(c).or_insert(Decayed { value: 0.0, at: now });
        e.value = e.at(now, hl) + 1.0;
        e.at = now;
    }

    pub fn frequency(&self, c: ClusterId) -> f64 {
        self.freq
            .get(&c)
            .map_or(0.0, |d| d.at(self.clock, self.cfg.decay_half_life))
    }

    pub fn hotset(&self) -> &BTreeSet<ClusterId> {
        &self.hotset
    }

    pub fn forget(&mut self, c: ClusterId) {
        self.freq.remove(&c);
        self.hotset.remove(&c);
    }

    /// Marks `c` resident without going through selection (split children,
    /// snapshot restore).
    pub fn mark_resident(&mut self, c: ClusterId) {
        self.hotset.insert(c);
    }

    pub fn mark_evicted(&mut self, c: ClusterId) {
        self.hotset.remove(&c);
    }

    pub fn region_cost(&self, len: usize) -> u64 {
        region_bytes(slack_capacity(len, self.cfg.slack_fraction), self.dimension)
    }

    /// Chooses admissions and evictions. `sizes` holds the logical size of
    /// every live cluster; `resident_bytes` the currently allocated bytes of
    /// each resident cluster. Greedy by decayed frequency; a resident is only
    /// displaced by a candidate more than `hysteresis` times as frequent.
    pub fn hotset_update(
        &mut self,
        sizes: &BTreeMap<ClusterId, usize>,
        resident_bytes: &BTreeMap<ClusterId, u64>,
        budget_limit: u64,
    ) -> Vec<TierAction> {
        let mut actions = Vec::new();
        // Retired clusters leave the plan.
        let dead: Vec<ClusterId> = self
            .hotset
            .iter()
            .filter(|c| !sizes.contains_key(c))
            .copied()
            .collect();
        for c in dead {
            self.hotset.remove(&c);
        }
        self.freq.retain(|c, _| sizes.contains_key(c));

        let Some(smallest) = sizes.values().map(|n| self.region_cost(*n)).min() else {
            return actions;
        };
        if budget_limit < smallest {
            if !sizes.is_empty() {
                log::warn!(
                    "accelerator budget {budget_limit}B is below the smallest cluster ({smallest}B); hotset disabled"
                );
            }
            for c in std::mem::take(&mut self.hotset) {
                actions.push(TierAction::Evict(c));
            }
            return actions;
        }

        let now = self.clock;
        let hl = self.cfg.decay_half_life;
        let mut ranked: Vec<(f64, ClusterId)> = self
            .freq
            .iter()
            .map(|(c, d)| (d.at(now, hl), *c))
            .filter(|(f, _)| *f > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut used: u64 = self
            .hotset
            .iter()
            .map(|c| resident_bytes.get(c).copied().unwrap_or_else(|| self.region_cost(sizes[c])))
            .sum();
        let mut keep: BTreeSet<ClusterId> = BTreeSet::new();
        for (f, c) in &ranked {
            if self.hotset.contains(c) {
                keep.insert(*c);
                continue;
            }
            let cost = self.region_cost(sizes[c]);
            if used + cost <= budget_limit {
                used += cost;
                self.hotset.insert(*c);
                keep.insert(*c);
                actions.push(TierAction::Admit(*c));
                continue;
            }
            // Displace the least frequent residents not yet confirmed, if the
            // candidate beats each of them by the hysteresis factor.
            let mut victims: Vec<(f64, ClusterId)> = self
                .hotset
                .iter()
                .filter(|r| !keep.contains(r))
                .map(|r| (self.frequency(*r), *r))
                .collect();
            victims.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut freed = 0u64;
            let mut chosen = Vec::new();
            for (vf, v) in victims {
                if used + cost - freed <= budget_limit {
                    break;
                }
                if *f <= f64::from(self.cfg.hysteresis) * vf {
                    break;
                }
                freed += resident_bytes.get(&v).copied().unwrap_or_else(|| self.region_cost(sizes[&v]));
                chosen.push(v);
            }
            if used + cost - freed <= budget_limit && cost <= budget_limit {
                for v in chosen {
                    self.hotset.remove(&v);
                    actions.push(TierAction::Evict(v));
                }
                used = used + cost - freed;
                self.hotset.insert(*c);
                keep.insert(*c);
                actions.push(TierAction::Admit(*c));
            }
        }
        // Evictions first so admissions find budget.
        actions.sort_by_key(|a| match a {
            TierAction::Evict(_) => 0,
            TierAction::Admit(_) => 1,
        });
        actions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TierConfig;
    use crate::vector::ScopeId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn member(id: u64, v: &[f32]) -> Member {
        Member {
            item: id,
            vector: Arc::from(v),
        }
    }

    fn cluster_with(n: u64) -> Cluster {
        let members: Vec<Member> = (0..n).map(|i| member(i, &[i as f32, 0.0])).collect();
        Cluster::new(ClusterId(1), ScopeId::Static, 2, Metric::SquaredEuclidean, members)
    }

    #[test]
    fn buffer_rule_from_cost_model_is_128() {
        let m = CostModel::default();
        assert_eq!(m.buffer_size_rule(), 128);
        assert!(m.host_scan_ns(128) <= m.accel_scan_ns(128));
        assert!(m.host_scan_ns(129) > m.accel_scan_ns(129));
        assert!(m.host_scan_ns(512) > 3.0 * m.accel_scan_ns(512));
        assert_eq!(TierConfig::default().b_insert, m.buffer_size_rule());
    }

    #[test]
    fn non_resident_insert_goes_direct() {
        let mut c = cluster_with(3);
        let budget = Budget::new(1 << 20);
        let out = buffered_insert(&mut c, member(10, &[1.0, 1.0]), &TierConfig::default(), &budget);
        assert_eq!(out.placement, Placement::DirectHost);
        assert_eq!(c.members().len(), 4);
        assert_eq!(c.tier.buffer_len(), 0);
    }

    #[test]
    fn admission_copies_host_members_and_buffer_fills_at_threshold() {
        let mut c = cluster_with(5);
        let budget = Budget::new(1 << 20);
        let cfg = TierConfig::default();
        begin_migration(&mut c, cfg.slack_fraction, &budget).unwrap();
        complete_migration(&mut c, &budget);
        let region: Vec<u64> = c.tier.resident_members().unwrap().iter().map(|m| m.item).collect();
        assert_eq!(region, vec![0, 1, 2, 3, 4]);

        let out = buffered_insert(&mut c, member(100, &[0.5, 0.5]), &cfg, &budget);
        assert_eq!(out.placement, Placement::BufferedHost);
        assert_eq!(c.tier.buffer_len(), 1);

        let mut created = 0;
        for i in 1..cfg.b_insert as u64 {
            let out = buffered_insert(&mut c, member(100 + i, &[0.5, 0.5]), &cfg, &budget);
            if out.ticket_created {
                created += 1;
                assert_eq!(i as usize + 1, cfg.b_insert);
            }
        }
        assert_eq!(created, 1);
        assert!(c.tier.ticket().is_some());
        complete_migration(&mut c, &budget);
        assert_eq!(c.tier.buffer_len(), 0);
        assert_eq!(c.tier.resident_members().unwrap().len(), 5 + cfg.b_insert);
        assert_eq!(c.tier.flushes(), 2);
    }

    #[test]
    fn allocation_failure_aborts_without_loss() {
        let mut c = cluster_with(4);
        let cfg = TierConfig {
            b_insert: 2,
            ..TierConfig::default()
        };
        // Exactly enough budget for the admission region, none for expansion.
        let admission = region_bytes(slack_capacity(4, cfg.slack_fraction), 2);
        let tight = Budget::new(admission);
        begin_migration(&mut c, cfg.slack_fraction, &tight).unwrap();
        complete_migration(&mut c, &tight);
        assert_eq!(tight.used(), admission);

        buffered_insert(&mut c, member(50, &[9.0, 9.0]), &cfg, &tight);
        let out = buffered_insert(&mut c, member(51, &[9.0, 9.0]), &cfg, &tight);
        assert!(out.ticket_created);
        assert!(!c.tier.is_resident());
        assert_eq!(c.tier.buffer_len(), 0);
        let ids: BTreeSet<u64> = c.members().iter().map(|m| m.item).collect();
        assert_eq!(ids, (0..4).chain([50, 51]).collect());
        assert_eq!(tight.used(), 0);
    }

    #[test]
    fn merged_search_equals_host_scan_with_fallback() {
        let mut c = cluster_with(20);
        let budget = Budget::new(1 << 20);
        let cfg = TierConfig::default();
        let host = HostExecutor::default();
        let accel = SimulatedAccelerator::default();
        begin_migration(&mut c, cfg.slack_fraction, &budget).unwrap();
        complete_migration(&mut c, &budget);
        buffered_insert(&mut c, member(77, &[3.0, 0.1]), &cfg, &budget);
        let q = [3.0, 0.1];
        let got = merged_search(&c, &q, 3, Metric::SquaredEuclidean, &host, Some(&accel));
        assert_eq!(got[0], (0.0, 77));
        let oracle = {
            let mut t = TopK::new(3);
            for m in c.members() {
                t.push(Metric::SquaredEuclidean.distance(&m.vector, &q), m.item);
            }
            t.into_vec()
        };
        assert_eq!(got, oracle);
        assert!(accel.log().scans() >= 1);

        accel.inject_failures(1);
        let fallback = merged_search(&c, &q, 3, Metric::SquaredEuclidean, &host, Some(&accel));
        assert_eq!(fallback, oracle);
    }

    #[test]
    fn zero_budget_keeps_hotset_empty() {
        let mut plan = TierPlan::new(TierConfig::default(), 8);
        let sizes: BTreeMap<_, _> = [(ClusterId(1), 10usize)].into();
        plan.record_access(ClusterId(1));
        let actions = plan.hotset_update(&sizes, &BTreeMap::new(), 0);
        assert!(actions.is_empty());
        assert!(plan.hotset().is_empty());
    }

    #[test]
    fn single_cluster_admitted_with_large_budget() {
        let mut plan = TierPlan::new(TierConfig::default(), 8);
        let sizes: BTreeMap<_, _> = [(ClusterId(3), 10usize)].into();
        plan.record_access(ClusterId(3));
        let actions = plan.hotset_update(&sizes, &BTreeMap::new(), u64::MAX);
        assert_eq!(actions, vec![TierAction::Admit(ClusterId(3))]);
        assert_eq!(plan.hotset().iter().copied().collect::<Vec<_>>(), vec![ClusterId(3)]);
    }

    #[test]
    fn zipf_hotset_tracks_offline_top_set() {
        let n = 1000usize;
        let size = 64usize;
        let mut plan = TierPlan::new(TierConfig::default(), 16);
        let sizes: BTreeMap<ClusterId, usize> = (0..n as u64).map(|i| (ClusterId(i), size)).collect();
        let budget = 100 * plan.region_cost(size);

        // Zipf(1.0) over a shuffled rank order.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut order: Vec<u64> = (0..n as u64).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let weights: Vec<f64> = (1..=n).map(|r| 1.0 / r as f64).collect();
        let total: f64 = weights.iter().sum();
        let cdf: Vec<f64> = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w / total;
                Some(*acc)
            })
            .collect();

        let accesses = 200_000usize;
        let mut trace = Vec::with_capacity(accesses);
        for _ in 0..accesses {
            let u: f64 = rng.random();
            let r = cdf.partition_point(|c| *c < u).min(n - 1);
            trace.push(ClusterId(order[r]));
        }

        let mut resident_bytes = BTreeMap::new();
        let mut hits = 0usize;
        let mut counted = 0usize;
        for (i, c) in trace.iter().enumerate() {
            if i >= accesses / 2 {
                counted += 1;
                if plan.hotset().contains(c) {
                    hits += 1;
                }
            }
            plan.tick();
            plan.record_access(*c);
            if i % 100 == 99 {
                for a in plan.hotset_update(&sizes, &resident_bytes, budget) {
                    match a {
                        TierAction::Admit(c) => {
                            resident_bytes.insert(c, plan.region_cost(size));
                        }
                        TierAction::Evict(c) => {
                            resident_bytes.remove(&c);
                        }
                    }
                }
                let used: u64 = resident_bytes.values().sum();
                assert!(used <= budget);
            }
        }
        let mut counts: BTreeMap<ClusterId, usize> = BTreeMap::new();
        for c in &trace {
            *counts.entry(*c).or_default() += 1;
        }
        let mut by_count: Vec<_> = counts.into_iter().collect();
        by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let top: BTreeSet<ClusterId> = by_count.iter().take(100).map(|e| e.0).collect();
        let oracle_hits = trace[accesses / 2..].iter().filter(|c| top.contains(c)).count();
        let rate = hits as f64 / counted as f64;
        let oracle = oracle_hits as f64 / counted as f64;
        assert!((rate - oracle).abs() <= 0.05, "rate {rate} vs oracle {oracle}");
    }
}
