//! Vector ingestion: fvecs and line-delimited JSON readers, and bulk IVF
//! construction for a scope.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NewItem, Store};
use crate::cluster::{Cluster, ItemRecord, Member};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::vector::{validate, ClusterId, ScopeId, Vector};

/// Reads `d: i32` followed by `d` little-endian f32 values, repeated.
pub fn read_fvecs(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0usize;
    let mut dim: Option<usize> = None;
    while pos < bytes.len() {
        let head = bytes.get(pos..pos + 4).ok_or_else(|| Error::Parse {
            offset: pos as u64,
            msg: "truncated dimension field".into(),
        })?;
        let d = i32::from_le_bytes(head.try_into().expect("4 bytes"));
        if d <= 0 {
            return Err(Error::Parse {
                offset: pos as u64,
                msg: format!("invalid dimension {d}"),
            });
        }
        let d = d as usize;
        if dim.is_some_and(|x| x != d) {
            return Err(Error::Parse {
                offset: pos as u64,
                msg: format!("dimension {d} differs from the first record's {}", dim.unwrap_or(0)),
            });
        }
        dim = Some(d);
        let body = bytes.get(pos + 4..pos + 4 + 4 * d).ok_or_else(|| Error::Parse {
            offset: (pos + 4) as u64,
            msg: "truncated vector".into(),
        })?;
        out.push(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
        pos += 4 + 4 * d;
    }
    Ok(out)
}

pub fn write_fvecs<V: AsRef<[f32]>>(path: impl AsRef<Path>, vectors: &[V]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in vectors {
        let v = v.as_ref();
        w.write_all(&(v.len() as i32).to_le_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One line of a JSONL ingestion file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonRecord {
    #[serde(default)]
    pub id: Option<u64>,
    pub vector: Vec<f32>,
    #[serde(default)]
    pub payload: String,
    /// `static` or `agent:<n>`.
    #[serde(default = "static_scope")]
    pub scope: String,
}

fn static_scope() -> String {
    "static".into()
}

impl JsonRecord {
    pub fn scope_id(&self) -> Result<ScopeId> {
        self.scope.parse()
    }

    pub fn into_item(self) -> NewItem {
        NewItem {
            id: self.id,
            vector: Vector::from(self.vector),
            payload: self.payload.into_bytes(),
        }
    }
}

/// Reads one JSON record per non-empty line. Parse errors carry the byte
/// offset of the offending line.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<JsonRecord>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        if !line.trim().is_empty() {
            let rec: JsonRecord = serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse {
                offset,
                msg: e.to_string(),
            })?;
            out.push(rec);
        }
        offset += n as u64;
    }
    Ok(out)
}

/// Training sample cap for bulk IVF construction.
const TRAIN_PER_LIST: usize = 64;
const TRAIN_MAX: usize = 50_000;

impl Store {
    /// Bulk-loads `items` into `scope` as an IVF of (at most) `nlist`
    /// clusters: k-means is trained on a sample and every item is assigned to
    /// its nearest trained centroid. Bypasses agent write permissions.
    pub fn build_ivf(&self, scope: ScopeId, items: Vec<NewItem>, nlist: usize) -> Result<Vec<ClusterId>> {
        let inner = self.inner();
        inner.check_live()?;
        if !inner.clusters.has_scope(scope) {
            return Err(Error::usage(format!("unknown scope {scope}")));
        }
        if items.is_empty() {
            return Ok(Vec::new());
        }
        if nlist == 0 {
            return Err(Error::usage("nlist must be at least 1"));
        }
        let mut seen = HashSet::new();
        for it in &items {
            validate(&it.vector, inner.cfg.dimension)?;
            if let Some(id) = it.id {
                if !seen.insert(id) || inner.clusters.record(id).is_some() {
                    return Err(Error::usage(format!("item {id} already exists")));
                }
            }
        }
        let _gate = inner.gate.write();
        let metric = inner.cfg.metric;
        let n = items.len();
        let k = nlist.min(n);
        let points: Vec<Vector> = items.iter().map(|it| it.vector.clone()).collect();
        let centroids = {
            let mut rng = inner.rng.lock();
            let m = n.min((k * TRAIN_PER_LIST).max(k)).min(TRAIN_MAX.max(k));
            let mut idx = sample(&mut *rng, n, m).into_vec();
            idx.sort_unstable();
            let train: Vec<Vector> = idx.iter().map(|i| points[*i].clone()).collect();
            kmeans(&train, k, inner.cfg.cluster.kmeans_max_iters, metric, &mut *rng, &inner.host)
                .map_err(|e| Error::usage(e.to_string()))?
                .centroids
        };
        let assignment: Vec<usize> = points
            .par_iter()
            .map(|p| {
                let mut best = (f32::INFINITY, 0usize);
                for (i, c) in centroids.iter().enumerate() {
                    let d = metric.distance(p, c);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                best.1
            })
            .collect();
        let mut groups: Vec<Vec<(Member, Vec<u8>)>> = vec![Vec::new(); k];
        for (it, g) in items.into_iter().zip(assignment) {
            let id = match it.id {
                Some(id) => {
                    inner.next_item.fetch_max(id + 1, std::sync::atomic::Ordering::SeqCst);
                    id
                }
                None => inner.alloc_item_id(),
            };
            groups[g].push((
                Member {
                    item: id,
                    vector: it.vector,
                },
                it.payload,
            ));
        }
        let mut ids = Vec::new();
        for group in groups.into_iter().filter(|g| !g.is_empty()) {
            ids.push(self.load_cluster(scope, group, None)?);
        }
        Ok(ids)
    }

    /// Static-scope convenience for [`Store::build_ivf`].
    pub fn build_static_ivf(&self, items: Vec<NewItem>, nlist: usize) -> Result<Vec<ClusterId>> {
        self.build_ivf(ScopeId::Static, items, nlist)
    }

    /// Loads every record of a JSONL file. Records are grouped by scope and
    /// each scope is built as an IVF with about `sqrt(n)` lists.
    pub fn ingest_jsonl(&self, path: impl AsRef<Path>) -> Result<usize> {
        let records = read_jsonl(path)?;
        let mut by_scope: std::collections::BTreeMap<ScopeId, Vec<NewItem>> = Default::default();
        for r in records {
            let scope = r.scope_id()?;
            by_scope.entry(scope).or_default().push(r.into_item());
        }
        let mut total = 0;
        for (scope, items) in by_scope {
            if let Some(agent) = scope.agent() {
                if !self.agents().contains(&agent) {
                    self.register_agent(agent)?;
                }
            }
            total += items.len();
            let nlist = (items.len() as f64).sqrt().ceil() as usize;
            self.build_ivf(scope, items, nlist)?;
        }
        Ok(total)
    }

    /// Loads an fvecs file into the static scope with `nlist` lists.
    pub fn ingest_fvecs(&self, path: impl AsRef<Path>, nlist: usize) -> Result<usize> {
        let vs = read_fvecs(path)?;
        let n = vs.len();
        self.build_static_ivf(vs.into_iter().map(NewItem::new).collect(), nlist)?;
        Ok(n)
    }

    /// Publishes one cluster with fresh item versions and links it into the
    /// coarse graph. `centroid` overrides the computed mean.
    pub(crate) fn load_cluster(&self, scope: ScopeId, members: Vec<(Member, Vec<u8>)>, centroid: Option<Vector>) -> Result<ClusterId> {
        let inner = self.inner();
        let id = inner.clusters.alloc_cluster_id();
        let mut ms = Vec::with_capacity(members.len());
        for (m, payload) in members {
            inner.clusters.put_record(
                m.item,
                ItemRecord {
                    cluster: id,
                    scope,
                    version: inner.next_version(),
                    payload: Arc::from(payload),
                },
            );
            ms.push(m);
        }
        let mut cluster = Cluster::new(id, scope, inner.cfg.dimension, inner.cfg.metric, ms);
        if let Some(c) = centroid {
            cluster.set_centroid(c);
        }
        let c = cluster.centroid().clone();
        let mut g = inner.graph.write();
        inner.clusters.publish(cluster)?;
        g.insert(scope, id, &c);
        Ok(id)
    }
}
