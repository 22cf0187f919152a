//! Binary snapshot and IVF exchange format.
//!
//! Little-endian throughout:
//!
//! ```text
//! header   "PNCK" | version u32 | dimension u32 | metric u8 | cluster_count u32
//! cluster  centroid f32[d] | count u32 | (item u64, vector f32[d]) * count
//! section  tag [u8; 4] | length u64 | body
//! ```
//!
//! An IVF export carries only the header and cluster records followed by the
//! `END\0` section. A snapshot adds `CONF`, `CLMD`, `ITEM`, `GRPH`, `AGNT` and
//! `STAT` sections before `END\0`. All maps are written in key order so equal
//! stores produce equal bytes.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentState, Counters, Store, StoreStats};
use crate::cluster::{Cluster, ClusterKind, ItemRecord, Member};
use crate::config::StoreConfig;
use crate::error::{Error, Result};
use crate::graph::{GraphSnapshot, HybridGraph};
use crate::profile::AgentProfile;
use crate::tiering::{begin_migration, complete_migration, TierPlan};
use crate::vector::{AgentId, ClusterId, ItemId, Metric, ScopeId, Vector};

pub const MAGIC: &[u8; 4] = b"PNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ClusterMeta {
    id: ClusterId,
    scope: ScopeId,
    kind: ClusterKind,
    delta: f32,
    access_count: u64,
    mutations: u32,
    stale: bool,
    profiles: Vec<(AgentId, Vec<u32>)>,
    resident: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreState {
    version: u64,
    next_item: u64,
    next_cluster: u64,
    scopes: Vec<ScopeId>,
    rng: RngState,
    tier: TierPlan,
    counters: StoreStats,
    retired_flushes: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: &[u8]) {
        self.buf.extend_from_slice(tag);
        self.u64(body.len() as u64);
        self.buf.extend_from_slice(body);
    }
    fn header(&mut self, dim: usize, metric: Metric, clusters: usize) {
        self.buf.extend_from_slice(MAGIC);
        self.u32(FORMAT_VERSION);
        self.u32(dim as u32);
        self.u8(metric.to_u8());
        self.u32(clusters as u32);
    }
    fn cluster(&mut self, centroid: &[f32], members: &[Member]) {
        self.f32s(centroid);
        self.u32(members.len() as u32);
        for m in members {
            self.u64(m.item);
            self.f32s(&m.vector);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let Some(end) = end else {
            return Err(self.err(format!("unexpected end of file reading {what}")));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let at = self.pos;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?, what)?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Parse {
                offset: (at + 4 * i) as u64,
                msg: format!("non-finite value in {what}"),
            });
        }
        Ok(v)
    }
}

struct Header {
    dimension: usize,
    metric: Metric,
    clusters: usize,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos -= 4;
        return Err(r.err("bad magic (expected PNCK)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dimension = r.u32("dimension")? as usize;
    if dimension == 0 {
        r.pos -= 4;
        return Err(r.err("dimension must be at least 1"));
    }
    let m = r.u8("metric")?;
    let metric = Metric::from_u8(m).ok_or_else(|| {
        r.pos -= 1;
        r.err(format!("unknown metric tag {m}"))
    })?;
    let clusters = r.u32("cluster count")? as usize;
    Ok(Header {
        dimension,
        metric,
        clusters,
    })
}

type ClusterRecord = (Vec<f32>, Vec<Member>);

fn read_clusters(r: &mut Reader<'_>, h: &Header) -> Result<Vec<ClusterRecord>> {
    let mut out = Vec::with_capacity(h.clusters.min(1 << 16));
    for _ in 0..h.clusters {
        let centroid = r.f32s(h.dimension, "centroid")?;
        let count = r.u32("member count")? as usize;
        let mut members = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let item = r.u64("item id")?;
            let v = r.f32s(h.dimension, "vector")?;
            members.push(Member {
                item,
                vector: Vector::from(v),
            });
        }
        out.push((centroid, members));
    }
    Ok(out)
}

fn read_sections<'a>(r: &mut Reader<'a>) -> Result<BTreeMap<[u8; 4], (usize, &'a [u8])>> {
    let mut out = BTreeMap::new();
    loop {
        let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
        let len = r.u64("section length")? as usize;
        let at = r.pos;
        let body = r.take(len, "section body")?;
        if &tag == b"END\0" {
            return Ok(out);
        }
        out.insert(tag, (at, body));
    }
}

fn json_section<T: for<'de> Deserialize<'de>>(sections: &BTreeMap<[u8; 4], (usize, &[u8])>, tag: &[u8; 4]) -> Result<T> {
    let name = String::from_utf8_lossy(tag).into_owned();
    let (at, body) = sections.get(tag).ok_or_else(|| Error::Parse {
        offset: 0,
        msg: format!("missing section {name}"),
    })?;
    serde_json::from_slice(body).map_err(|e| Error::Parse {
        offset: (*at + e.column().saturating_sub(1)) as u64,
        msg: format!("section {name}: {e}"),
    })
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("in-memory state serializes")
}

fn scope_tag(s: ScopeId) -> (u8, u32) {
    match s {
        ScopeId::Static => (0, 0),
        ScopeId::Agent(a) => (1, a.0),
    }
}

impl Store {
    /// Serializes the full store state. Background work should be idle.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let inner = self.inner();
        let _gate = inner.gate.write();
        let agents: Vec<Arc<Mutex<AgentState>>> = inner.agents.read().values().cloned().collect();
        let agents: Vec<_> = agents.iter().map(|a| a.lock()).collect();
        let graph = inner.graph.read();

        let mut clusters: Vec<_> = inner.clusters.all();
        clusters.sort_by_key(|c| c.read().id);
        let clusters: Vec<_> = clusters.iter().map(|c| c.read()).collect();

        let mut w = Writer { buf: Vec::new() };
        w.header(inner.cfg.dimension, inner.cfg.metric, clusters.len());
        let mut meta = Vec::with_capacity(clusters.len());
        for c in &clusters {
            w.cluster(c.centroid(), c.members());
            meta.push(ClusterMeta {
                id: c.id,
                scope: c.scope,
                kind: c.kind,
                delta: c.delta(),
                access_count: c.access_count(),
                mutations: c.mutations_since_maintenance(),
                stale: c.is_stale(),
                profiles: c.profiles().iter().map(|(a, p)| (*a, p.entries().to_vec())).collect(),
                resident: c.tier().is_resident() || c.tier().ticket().is_some(),
            });
        }
        w.section(b"CONF", &json(&inner.cfg));
        w.section(b"CLMD", &json(&meta));

        let records = inner.clusters.records_snapshot();
        let mut items = Writer { buf: Vec::new() };
        items.u64(records.len() as u64);
        for (id, r) in &records {
            items.u64(*id);
            items.u64(r.cluster.0);
            let (tag, agent) = scope_tag(r.scope);
            items.u8(tag);
            items.u32(agent);
            items.u64(r.version);
            items.u32(r.payload.len() as u32);
            items.buf.extend_from_slice(&r.payload);
        }
        w.section(b"ITEM", &items.buf);
        w.section(b"GRPH", &json(&graph.snapshot()));
        let agent_states: Vec<&AgentState> = agents.iter().map(|a| &**a).collect();
        w.section(b"AGNT", &json(&agent_states));

        let rng = inner.rng.lock();
        let state = StoreState {
            version: inner.version.load(Ordering::SeqCst),
            next_item: inner.next_item.load(Ordering::SeqCst),
            next_cluster: inner.clusters.next_cluster_id(),
            scopes: inner.clusters.scopes(),
            rng: RngState {
                seed: rng.get_seed(),
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos(),
            },
            tier: inner.tier.lock().clone(),
            counters: inner.stats(),
            retired_flushes: inner.counters.retired_flushes.load(Ordering::Relaxed),
        };
        w.section(b"STAT", &json(&state));
        w.section(b"END\0", &[]);
        w.buf
    }

    pub fn snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.snapshot_bytes();
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn restore(path: impl AsRef<Path>) -> Result<Store> {
        let bytes = std::fs::read(path)?;
        Self::restore_bytes(&bytes)
    }

    pub fn restore_bytes(bytes: &[u8]) -> Result<Store> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let h = read_header(&mut r)?;
        let records = read_clusters(&mut r, &h)?;
        let sections = read_sections(&mut r)?;
        let cfg: StoreConfig = json_section(&sections, b"CONF")?;
        if cfg.dimension != h.dimension || cfg.metric != h.metric {
            return Err(Error::Parse {
                offset: 0,
                msg: "header and configuration disagree".into(),
            });
        }
        let meta: Vec<ClusterMeta> = json_section(&sections, b"CLMD")?;
        if meta.len() != records.len() {
            return Err(Error::Parse {
                offset: sections[b"CLMD"].0 as u64,
                msg: format!("{} cluster records but {} metadata entries", records.len(), meta.len()),
            });
        }
        let graph: GraphSnapshot = json_section(&sections, b"GRPH")?;
        let agents: Vec<AgentState> = json_section(&sections, b"AGNT")?;
        let state: StoreState = json_section(&sections, b"STAT")?;

        let store = Store::with_config(cfg.clone())?;
        let inner = store.inner();
        for s in &state.scopes {
            inner.clusters.register_scope(*s);
        }
        let (at, body) = sections.get(b"ITEM").ok_or_else(|| Error::Parse {
            offset: r.pos as u64,
            msg: "missing section ITEM".into(),
        })?;
        let mut ir = Reader { buf: body, pos: 0 };
        let n = ir.u64("item count").map_err(|e| shift(e, *at))?;
        for _ in 0..n {
            let rec = (|| -> Result<(ItemId, ItemRecord)> {
                let id = ir.u64("item id")?;
                let cluster = ClusterId(ir.u64("cluster id")?);
                let tag = ir.u8("scope tag")?;
                let agent = ir.u32("scope agent")?;
                let scope = match tag {
                    0 => ScopeId::Static,
                    1 => ScopeId::Agent(AgentId(agent)),
                    t => return Err(ir.err(format!("unknown scope tag {t}"))),
                };
                let version = ir.u64("version")?;
                let len = ir.u32("payload length")? as usize;
                let payload = Arc::from(ir.take(len, "payload")?);
                Ok((
                    id,
                    ItemRecord {
                        cluster,
                        scope,
                        version,
                        payload,
                    },
                ))
            })()
            .map_err(|e| shift(e, *at))?;
            inner.clusters.put_record(rec.0, rec.1);
        }

        let mut resident = Vec::new();
        for ((centroid, members), m) in records.into_iter().zip(meta) {
            let mut c = Cluster::new(m.id, m.scope, h.dimension, h.metric, members).with_kind(m.kind);
            c.set_centroid(Vector::from(centroid));
            c.restore_stats(m.delta, m.access_count, m.mutations, m.stale);
            for (agent, entries) in m.profiles {
                c.set_profile(agent, AgentProfile::from_entries(entries));
            }
            if m.resident {
                resident.push(m.id);
            }
            inner.clusters.publish(c)?;
        }
        inner.clusters.set_next_cluster_id(state.next_cluster);
        *inner.graph.write() = HybridGraph::restore(cfg.graph.clone(), cfg.metric, graph);
        {
            let mut map = inner.agents.write();
            for mut a in agents {
                a.cache.rebuild_indexes();
                map.insert(a.id, Arc::new(Mutex::new(a)));
            }
        }
        inner.version.store(state.version, Ordering::SeqCst);
        inner.next_item.store(state.next_item, Ordering::SeqCst);
        {
            let mut rng = ChaCha8Rng::from_seed(state.rng.seed);
            rng.set_stream(state.rng.stream);
            rng.set_word_pos(state.rng.word_pos);
            *inner.rng.lock() = rng;
        }
        *inner.tier.lock() = state.tier;
        for id in resident {
            if let Some(c) = inner.clusters.get(id) {
                let mut c = c.write();
                if begin_migration(&mut c, cfg.tier.slack_fraction, &inner.budget).is_ok() {
                    complete_migration(&mut c, &inner.budget);
                }
            }
        }
        restore_counters(&inner.counters, &state.counters, state.retired_flushes);
        Ok(store)
    }

    /// Writes the clusters of `scope` in the IVF exchange format.
    pub fn export_ivf(&self, path: impl AsRef<Path>, scope: ScopeId) -> Result<usize> {
        let bytes = self.export_ivf_bytes(scope)?;
        let n = self.inner().clusters.clusters_in(scope).len();
        std::fs::write(path, bytes)?;
        Ok(n)
    }

    pub fn export_ivf_bytes(&self, scope: ScopeId) -> Result<Vec<u8>> {
        let inner = self.inner();
        if !inner.clusters.has_scope(scope) {
            return Err(Error::usage(format!("unknown scope {scope}")));
        }
        let _gate = inner.gate.write();
        let ids = inner.clusters.clusters_in(scope);
        let mut w = Writer { buf: Vec::new() };
        w.header(inner.cfg.dimension, inner.cfg.metric, ids.len());
        for id in ids {
            let c = inner.clusters.get(id).expect("listed cluster");
            let c = c.read();
            w.cluster(c.centroid(), c.members());
        }
        w.section(b"END\0", &[]);
        Ok(w.buf)
    }

    /// Imports the clusters of an IVF exchange file into `scope`, keeping
    /// the file's centroids. Returns the number of clusters imported.
    pub fn load_external_ivf(&self, path: impl AsRef<Path>, scope: ScopeId) -> Result<usize> {
        let bytes = std::fs::read(path)?;
        self.load_external_ivf_bytes(&bytes, scope)
    }

    pub fn load_external_ivf_bytes(&self, bytes: &[u8], scope: ScopeId) -> Result<usize> {
        let inner = self.inner();
        inner.check_live()?;
        if !inner.clusters.has_scope(scope) {
            return Err(Error::usage(format!("unknown scope {scope}")));
        }
        let mut r = Reader { buf: bytes, pos: 0 };
        let h = read_header(&mut r)?;
        if h.dimension != inner.cfg.dimension {
            return Err(Error::DimensionMismatch {
                expected: inner.cfg.dimension,
                got: h.dimension,
            });
        }
        if h.metric != inner.cfg.metric {
            return Err(Error::usage(format!("file metric {} differs from store metric {}", h.metric, inner.cfg.metric)));
        }
        let records = read_clusters(&mut r, &h)?;
        let mut seen = HashSet::new();
        for (_, members) in &records {
            for m in members {
                if !seen.insert(m.item) || inner.clusters.record(m.item).is_some() {
                    return Err(Error::usage(format!("item {} already exists", m.item)));
                }
            }
        }
        let _gate = inner.gate.write();
        let mut imported = 0;
        for (centroid, members) in records {
            if members.is_empty() {
                continue;
            }
            for m in &members {
                inner.next_item.fetch_max(m.item + 1, Ordering::SeqCst);
            }
            let members = members.into_iter().map(|m| (m, Vec::new())).collect();
            self.load_cluster(scope, members, Some(Vector::from(centroid)))?;
            imported += 1;
        }
        Ok(imported)
    }
}

fn shift(e: Error, by: usize) -> Error {
    match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset: offset + by as u64,
            msg,
        },
        other => other,
    }
}

fn restore_counters(c: &Counters, s: &StoreStats, retired_flushes: u64) {
    let set = |a: &std::sync::atomic::AtomicU64, v: u64| a.store(v, Ordering::Relaxed);
    set(&c.searches, s.searches);
    set(&c.inserts, s.inserts);
    set(&c.updates, s.updates);
    set(&c.deletes, s.deletes);
    set(&c.early_l0, s.early_l0);
    set(&c.early_l1, s.early_l1);
    set(&c.scanned, s.scanned);
    set(&c.coarse, s.coarse_computations);
    set(&c.merge_downs, s.merge_downs);
    set(&c.merged_items, s.merged_items);
    set(&c.splits, s.splits);
    set(&c.prefetches, s.prefetches);
    set(&c.admissions, s.admissions);
    set(&c.evictions, s.evictions);
    set(&c.migrations, s.migrations);
    set(&c.retired_flushes, retired_flushes);
    set(&c.batches, s.batches);
}
