//! Per-scope navigable graphs over cluster centroids, linked into the static
//! graph by probabilistic portal edges.
//!
//! Each scope owns a layered bounded-degree graph. An agent-scope insert also
//! links the new node to its nearest static node with probability
//! `1 / max(α_ic · d_static / d_agent, 1)`, where the `d` values are running
//! means of the nearest-centroid spacing seen at insert time. Portals are
//! traversable both ways, so one traversal starting at the static entry can
//! reach every agent graph in the query's scope set.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CoarseMode, GraphConfig};
use crate::vector::{rank_cmp, ClusterId, Metric, ScopeId};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand(f32, ClusterId);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp((self.0, self.1 .0), (other.0, other.1 .0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Node {
    scope: ScopeId,
    centroid: Vec<f32>,
    links: Vec<Vec<ClusterId>>,
    portals: Vec<ClusterId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct ScopeGraph {
    entry: Option<ClusterId>,
    max_level: usize,
    members: BTreeSet<ClusterId>,
    spacing_sum: f64,
    spacing_n: u64,
    spacing_override: Option<f32>,
    portal_count: u64,
}

impl ScopeGraph {
    fn spacing(&self) -> Option<f32> {
        self.spacing_override.or_else(|| {
            (self.spacing_n > 0).then(|| (self.spacing_sum / self.spacing_n as f64) as f32)
        })
    }
}

/// Outcome of a coarse search: clusters ascending by centroid distance plus
/// the number of centroid distance computations spent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoarseResult {
    pub clusters: Vec<(ClusterId, f32)>,
    pub computations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    nodes: Vec<(ClusterId, Node)>,
    scopes: Vec<(ScopeId, ScopeGraph)>,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
    portal_attempts: u64,
    portal_created: u64,
}

#[derive(Debug, Clone)]
pub struct HybridGraph {
    cfg: GraphConfig,
    metric: Metric,
    nodes: HashMap<ClusterId, Node>,
    scopes: BTreeMap<ScopeId, ScopeGraph>,
    rng: ChaCha8Rng,
    portal_attempts: u64,
    portal_created: u64,
}

impl HybridGraph {
    pub fn new(cfg: GraphConfig, metric: Metric, seed: u64) -> Self {
        let mut scopes = BTreeMap::new();
        scopes.insert(ScopeId::Static, ScopeGraph::default());
        Self {
            cfg,
            metric,
            nodes: HashMap::new(),
            scopes,
            rng: ChaCha8Rng::seed_from_u64(seed),
            portal_attempts: 0,
            portal_created: 0,
        }
    }

    pub fn config(&self) -> &GraphConfig {
        &self.cfg
    }

    pub fn register_scope(&mut self, scope: ScopeId) {
        self.scopes.entry(scope).or_default();
    }

    pub fn contains(&self, id: ClusterId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn scope_len(&self, scope: ScopeId) -> usize {
        self.scopes.get(&scope).map_or(0, |g| g.members.len())
    }

    pub fn scope_nodes(&self, scope: ScopeId) -> Vec<ClusterId> {
        self.scopes
            .get(&scope)
            .map(|g| g.members.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn entry(&self, scope: ScopeId) -> Option<ClusterId> {
        self.scopes.get(&scope).and_then(|g| g.entry)
    }

    pub fn neighbors(&self, id: ClusterId, layer: usize) -> &[ClusterId] {
        self.nodes
            .get(&id)
            .and_then(|n| n.links.get(layer))
            .map_or(&[], |v| v.as_slice())
    }

    pub fn levels(&self, id: ClusterId) -> usize {
        self.nodes.get(&id).map_or(0, |n| n.links.len())
    }

    pub fn portals(&self, id: ClusterId) -> &[ClusterId] {
        self.nodes.get(&id).map_or(&[], |n| n.portals.as_slice())
    }

    pub fn centroid(&self, id: ClusterId) -> Option<&[f32]> {
        self.nodes.get(&id).map(|n| n.centroid.as_slice())
    }

    /// (agent-scope inserts that drew a portal coin, portals created).
    pub fn portal_stats(&self) -> (u64, u64) {
        (self.portal_attempts, self.portal_created)
    }

    pub fn spacing(&self, scope: ScopeId) -> Option<f32> {
        self.scopes.get(&scope).and_then(ScopeGraph::spacing)
    }

    /// Pins the spacing estimate of a scope (`None` restores the running mean).
    pub fn set_spacing_override(&mut self, scope: ScopeId, spacing: Option<f32>) {
        self.scopes.entry(scope).or_default().spacing_override = spacing;
    }

    /// Portal probability for the next insert into `scope`.
    pub fn portal_probability(&self, scope: ScopeId) -> f64 {
        portal_probability(
            self.cfg.alpha_ic,
            self.spacing(ScopeId::Static),
            self.spacing(scope),
        )
    }

    pub fn update_centroid(&mut self, id: ClusterId, centroid: &[f32]) {
        if let Some(n) = self.nodes.get_mut(&id) {
            n.centroid.clear();
            n.centroid.extend_from_slice(centroid);
        }
    }

    fn dist(&self, q: &[f32], id: ClusterId, count: &mut u64) -> f32 {
        *count += 1;
        self.metric.distance(q, &self.nodes[&id].centroid)
    }

    fn random_level(&mut self) -> usize {
        let mut l = 0;
        while l < MAX_LEVEL && self.rng.random::<f64>() < 0.5 {
            l += 1;
        }
        l
    }

    /// Greedy descent from the scope entry down to (and excluding) `stop`.
    fn descend(&self, scope: ScopeId, q: &[f32], stop: usize, count: &mut u64) -> Option<Cand> {
        let g = self.scopes.get(&scope)?;
        let entry = g.entry?;
        let mut cur = Cand(self.dist(q, entry, count), entry);
        for layer in (stop + 1..=g.max_level).rev() {
            loop {
                let mut moved = false;
                for nb in self.nodes[&cur.1].links.get(layer).into_iter().flatten() {
                    let d = self.dist(q, *nb, count);
                    let c = Cand(d, *nb);
                    if c < cur {
                        cur = c;
                        moved = true;
                    }
                }
                if !moved {
                    break;
                }
            }
        }
        Some(cur)
    }

    /// Best-first search on one layer. `portal_ok` decides which portal
    /// targets may be entered (`None` disables portals). Returns every
    /// visited node with its distance, plus the `ef` best in order.
    fn search_layer(
        &self,
        q: &[f32],
        seeds: &[Cand],
        ef: usize,
        layer: usize,
        portal_ok: Option<&dyn Fn(&Node) -> bool>,
        count: &mut u64,
    ) -> (Vec<Cand>, Vec<Cand>) {
        let ef = ef.max(1);
        let mut visited: HashSet<ClusterId> = HashSet::new();
        let mut all = Vec::new();
        let mut frontier: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for s in seeds {
            if visited.insert(s.1) {
                all.push(*s);
                frontier.push(Reverse(*s));
                best.push(*s);
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c > *best.peek().expect("non-empty") {
                break;
            }
            let node = &self.nodes[&c.1];
            let same = node.links.get(layer).into_iter().flatten();
            let via_portal = portal_ok
                .filter(|_| layer == 0)
                .map(|ok| node.portals.iter().filter(move |p| ok(&self.nodes[*p])));
            for nb in same.chain(via_portal.into_iter().flatten()) {
                if !visited.insert(*nb) {
                    continue;
                }
                let cand = Cand(self.dist(q, *nb, count), *nb);
                all.push(cand);
                if best.len() < ef || cand < *best.peek().expect("non-empty") {
                    frontier.push(Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        (all, best.into_sorted_vec())
    }

    fn closest(&self, of: &[f32], cands: impl IntoIterator<Item = ClusterId>, m: usize) -> Vec<ClusterId> {
        let mut v: Vec<Cand> = cands
            .into_iter()
            .map(|c| Cand(self.metric.distance(of, &self.nodes[&c].centroid), c))
            .collect();
        v.sort();
        v.dedup_by_key(|c| c.1);
        v.truncate(m);
        v.into_iter().map(|c| c.1).collect()
    }

    /// Adds a cluster node to its scope graph. Duplicate inserts are no-ops.
    /// Returns the portal target when one was created.
    pub fn insert(&mut self, scope: ScopeId, id: ClusterId, centroid: &[f32]) -> Option<ClusterId> {
        if self.nodes.contains_key(&id) {
            return None;
        }
        self.scopes.entry(scope).or_default();
        let m = self.cfg.m.max(1);
        let level = self.random_level();
        let entry = self.scopes[&scope].entry;
        self.nodes.insert(
            id,
            Node {
                scope,
                centroid: centroid.to_vec(),
                links: vec![Vec::new(); level + 1],
                portals: Vec::new(),
            },
        );
        let mut scratch = 0u64;
        if let Some(entry) = entry {
            let max_level = self.scopes[&scope].max_level;
            let mut ep = vec![self
                .descend(scope, centroid, level.min(max_level), &mut scratch)
                .unwrap_or(Cand(0.0, entry))];
            let mut nearest: Option<Cand> = None;
            for layer in (0..=level.min(max_level)).rev() {
                let (_, found) = self.search_layer(centroid, &ep, self.cfg.ef_construction, layer, None, &mut scratch);
                let found: Vec<Cand> = found.into_iter().filter(|c| c.1 != id).collect();
                if layer == 0 {
                    nearest = found.first().copied();
                }
                let chosen: Vec<ClusterId> = found.iter().take(m).map(|c| c.1).collect();
                for nb in &chosen {
                    let nb_centroid = self.nodes[nb].centroid.clone();
                    let mut list = self.nodes[nb].links[layer].clone();
                    list.push(id);
                    if list.len() > m {
                        list = self.closest(&nb_centroid, list, m);
                    }
                    self.nodes.get_mut(nb).expect("live").links[layer] = list;
                }
                self.nodes.get_mut(&id).expect("just inserted").links[layer] = chosen;
                if !found.is_empty() {
                    ep = found;
                }
            }
            if let Some(n) = nearest {
                let g = self.scopes.get_mut(&scope).expect("registered");
                g.spacing_sum += f64::from(self.metric.to_length(n.0));
                g.spacing_n += 1;
            }
        }
        {
            let g = self.scopes.get_mut(&scope).expect("registered");
            g.members.insert(id);
            if g.entry.is_none() || level > g.max_level {
                g.entry = Some(id);
                g.max_level = level;
            }
        }
        self.repair_reachability(scope);

        if scope.is_static() {
            return None;
        }
        self.portal_attempts += 1;
        let p = self.portal_probability(scope);
        if self.rng.random::<f64>() >= p {
            return None;
        }
        let target = self.nearest_static(centroid)?;
        self.link_portal(id, target);
        self.portal_created += 1;
        Some(target)
    }

    fn nearest_static(&self, q: &[f32]) -> Option<ClusterId> {
        let mut scratch = 0;
        let start = self.descend(ScopeId::Static, q, 0, &mut scratch)?;
        let (_, found) = self.search_layer(q, &[start], self.cfg.ef_construction, 0, None, &mut scratch);
        found.first().map(|c| c.1)
    }

    fn link_portal(&mut self, agent_node: ClusterId, static_node: ClusterId) {
        let a = self.nodes.get_mut(&agent_node).expect("live");
        if a.portals.contains(&static_node) {
            return;
        }
        a.portals.push(static_node);
        let scope = a.scope;
        self.nodes
            .get_mut(&static_node)
            .expect("live")
            .portals
            .push(agent_node);
        self.scopes.get_mut(&scope).expect("registered").portal_count += 1;
    }

    /// Removes a node and its edges, repairing the neighbors it served.
    pub fn remove(&mut self, id: ClusterId) -> bool {
        let Some(node) = self.nodes.remove(&id) else {
            return false;
        };
        let scope = node.scope;
        let m = self.cfg.m.max(1);
        let members: Vec<ClusterId> = {
            let g = self.scopes.get_mut(&scope).expect("registered");
            g.members.remove(&id);
            g.members.iter().copied().collect()
        };
        for u in &members {
            let layers = self.nodes[u].links.len();
            for layer in 0..layers.min(node.links.len()) {
                if !self.nodes[u].links[layer].contains(&id) {
                    continue;
                }
                let mut cands: Vec<ClusterId> = self.nodes[u].links[layer]
                    .iter()
                    .chain(&node.links[layer])
                    .copied()
                    .filter(|c| *c != id && c != u && self.nodes[c].links.len() > layer)
                    .collect();
                cands.sort_unstable();
                cands.dedup();
                let uc = self.nodes[u].centroid.clone();
                let list = self.closest(&uc, cands, m);
                self.nodes.get_mut(u).expect("live").links[layer] = list;
            }
        }
        let g = self.scopes.get_mut(&scope).expect("registered");
        if g.entry == Some(id) {
            let best = members
                .iter()
                .map(|c| (self.nodes[c].links.len() - 1, *c))
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            g.entry = best.map(|b| b.1);
            g.max_level = best.map_or(0, |b| b.0);
        }
        for t in &node.portals {
            let Some(tn) = self.nodes.get_mut(t) else { continue };
            tn.portals.retain(|p| *p != id);
            if scope.is_static() {
                // The agent node keeps its bridge: retarget to the nearest static node.
                let agent_scope = tn.scope;
                self.scopes.get_mut(&agent_scope).expect("registered").portal_count -= 1;
                let tc = tn.centroid.clone();
                if let Some(nt) = self.nearest_static(&tc) {
                    self.link_portal(*t, nt);
                }
            }
        }
        if !scope.is_static() {
            self.scopes.get_mut(&scope).expect("registered").portal_count -= node.portals.len() as u64;
        }
        self.repair_reachability(scope);
        true
    }

    /// Nodes of `scope` reachable from its entry on the bottom layer.
    pub fn reachable(&self, scope: ScopeId) -> BTreeSet<ClusterId> {
        let mut seen = BTreeSet::new();
        let Some(entry) = self.entry(scope) else {
            return seen;
        };
        let mut stack = vec![entry];
        seen.insert(entry);
        while let Some(u) = stack.pop() {
            for nb in &self.nodes[&u].links[0] {
                if seen.insert(*nb) {
                    stack.push(*nb);
                }
            }
        }
        seen
    }

    /// Degree pruning can strand a node with no incoming bottom-layer edge.
    /// Link every stranded node from its nearest reachable node.
    fn repair_reachability(&mut self, scope: ScopeId) {
        let m = self.cfg.m.max(1);
        let total = self.scope_len(scope);
        for _ in 0..total.max(1) {
            let reached = self.reachable(scope);
            if reached.len() == total {
                return;
            }
            let Some(u) = self.scopes[&scope]
                .members
                .iter()
                .find(|c| !reached.contains(c))
                .copied()
            else {
                return;
            };
            let uc = self.nodes[&u].centroid.clone();
            let by_dist = self.closest(&uc, reached.iter().copied(), reached.len());
            let spare = by_dist
                .iter()
                .find(|r| self.nodes[*r].links[0].len() < m)
                .copied();
            let r = spare.unwrap_or(by_dist[0]);
            let rc = self.nodes[&r].centroid.clone();
            let mut list = self.nodes[&r].links[0].clone();
            list.push(u);
            if list.len() > m {
                // Keep `u`; drop the farthest other neighbor.
                let mut others: Vec<ClusterId> = list.into_iter().filter(|c| *c != u).collect();
                others = self.closest(&rc, others, m - 1);
                others.insert(0, u);
                list = others;
            }
            self.nodes.get_mut(&r).expect("live").links[0] = list;
            let un = self.nodes.get_mut(&u).expect("live");
            if un.links[0].len() < m && !un.links[0].contains(&r) {
                un.links[0].push(r);
            }
        }
    }

    /// The `nprobe` in-scope clusters nearest to `q` by centroid distance.
    pub fn coarse_search(&self, q: &[f32], scopes: &BTreeSet<ScopeId>, nprobe: usize) -> CoarseResult {
        let nprobe = nprobe.max(1);
        let ef = self
            .cfg
            .ef_search
            .unwrap_or(self.cfg.ef_search_factor * nprobe)
            .max(nprobe);
        match self.cfg.mode {
            CoarseMode::Hybrid => self.hybrid_search(q, scopes, nprobe, ef),
            CoarseMode::Independent => self.independent_search(q, scopes, nprobe, ef),
        }
    }

    /// Same as [`coarse_search`](Self::coarse_search) with an explicit frontier size.
    pub fn coarse_search_ef(&self, q: &[f32], scopes: &BTreeSet<ScopeId>, nprobe: usize, ef: usize) -> CoarseResult {
        let nprobe = nprobe.max(1);
        let ef = ef.max(nprobe);
        match self.cfg.mode {
            CoarseMode::Hybrid => self.hybrid_search(q, scopes, nprobe, ef),
            CoarseMode::Independent => self.independent_search(q, scopes, nprobe, ef),
        }
    }

    fn hybrid_search(&self, q: &[f32], scopes: &BTreeSet<ScopeId>, nprobe: usize, ef: usize) -> CoarseResult {
        let mut count = 0u64;
        let mut seeds = Vec::new();
        let static_live = self.entry(ScopeId::Static).is_some();
        if let Some(s) = self.descend(ScopeId::Static, q, 0, &mut count) {
            seeds.push(s);
        }
        for scope in scopes {
            if scope.is_static() {
                continue;
            }
            let Some(g) = self.scopes.get(scope) else { continue };
            let Some(entry) = g.entry else { continue };
            if !static_live || g.portal_count == 0 {
                // No bridge from the static graph: enter this graph directly.
                seeds.push(Cand(self.dist(q, entry, &mut count), entry));
            }
        }
        let in_scope = |n: &Node| n.scope.is_static() || scopes.contains(&n.scope);
        let (all, _) = self.search_layer(q, &seeds, ef, 0, Some(&in_scope), &mut count);
        let mut out: Vec<Cand> = all
            .into_iter()
            .filter(|c| scopes.contains(&self.nodes[&c.1].scope))
            .collect();
        out.sort();
        out.truncate(nprobe);
        CoarseResult {
            clusters: out.into_iter().map(|c| (c.1, c.0)).collect(),
            computations: count,
        }
    }

    fn independent_search(&self, q: &[f32], scopes: &BTreeSet<ScopeId>, nprobe: usize, ef: usize) -> CoarseResult {
        let mut count = 0u64;
        let mut out = Vec::new();
        for scope in scopes {
            let Some(start) = self.descend(*scope, q, 0, &mut count) else { continue };
            let (_, best) = self.search_layer(q, &[start], ef, 0, None, &mut count);
            out.extend(best);
        }
        out.sort();
        out.truncate(nprobe);
        CoarseResult {
            clusters: out.into_iter().map(|c| (c.1, c.0)).collect(),
            computations: count,
        }
    }

    /// Edge list per scope followed by the portal list.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (scope, g) in &self.scopes {
            let _ = writeln!(out, "scope {scope} entry={:?} max_level={}", g.entry.map(|e| e.0), g.max_level);
            for id in &g.members {
                let n = &self.nodes[id];
                for (layer, links) in n.links.iter().enumerate() {
                    let ls: Vec<String> = links.iter().map(|c| c.to_string()).collect();
                    let _ = writeln!(out, "  {id} L{layer}: {}", ls.join(" "));
                }
            }
        }
        let _ = writeln!(out, "portals");
        let mut ids: Vec<&ClusterId> = self.nodes.keys().collect();
        ids.sort();
        for id in ids {
            let n = &self.nodes[id];
            if n.scope.is_static() {
                continue;
            }
            for p in &n.portals {
                let _ = writeln!(out, "  {id} <-> {p}");
            }
        }
        out
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            nodes: self
                .nodes
                .iter()
                .map(|(k, v)| (*k, v.clone()))
                .collect::<BTreeMap<_, _>>()
                .into_iter()
                .collect(),
            scopes: self.scopes.iter().map(|(k, v)| (*k, v.clone())).collect(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            portal_attempts: self.portal_attempts,
            portal_created: self.portal_created,
        }
    }

    pub fn restore(cfg: GraphConfig, metric: Metric, snap: GraphSnapshot) -> Self {
        let mut rng = ChaCha8Rng::from_seed(snap.rng_seed);
        rng.set_stream(snap.rng_stream);
        rng.set_word_pos(snap.rng_word_pos);
        Self {
            cfg,
            metric,
            nodes: snap.nodes.into_iter().collect(),
            scopes: snap.scopes.into_iter().collect(),
            rng,
            portal_attempts: snap.portal_attempts,
            portal_created: snap.portal_created,
        }
    }
}

/// `1 / max(α · d_static / d_agent, 1)`; 1 when either spacing is unknown or
/// the agent spacing is zero.
pub fn portal_probability(alpha_ic: f32, d_static: Option<f32>, d_agent: Option<f32>) -> f64 {
    match (d_static, d_agent) {
        (Some(ds), Some(da)) if da > 0.0 && ds.is_finite() && da.is_finite() => {
            let ef_connect = (f64::from(alpha_ic) * f64::from(ds) / f64::from(da)).max(1.0);
            1.0 / ef_connect
        }
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::AgentId;

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn graph(m: usize) -> HybridGraph {
        HybridGraph::new(
            GraphConfig {
                m,
                ..GraphConfig::default()
            },
            Metric::SquaredEuclidean,
            7,
        )
    }

    #[test]
    fn first_node_is_entry() {
        let mut g = graph(4);
        g.insert(ScopeId::Static, ClusterId(1), &[0.0, 0.0]);
        assert_eq!(g.entry(ScopeId::Static), Some(ClusterId(1)));
        assert!(g.neighbors(ClusterId(1), 0).is_empty());
        g.insert(ScopeId::Static, ClusterId(1), &[5.0, 5.0]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn probability_boundaries() {
        assert_eq!(portal_probability(6.0, Some(1.0), Some(6.0)), 1.0);
        assert_eq!(portal_probability(6.0, Some(1.0), Some(12.0)), 1.0);
        assert!((portal_probability(6.0, Some(1.0), Some(1.0)) - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(portal_probability(6.0, None, Some(1.0)), 1.0);
        assert_eq!(portal_probability(6.0, Some(1.0), Some(0.0)), 1.0);
    }

    #[test]
    fn degree_bound_and_reachability_under_churn() {
        let mut g = graph(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..400 {
            g.insert(ScopeId::Static, ClusterId(i), &rand_vec(&mut rng, 8));
        }
        let mut live: Vec<u64> = (0..400).collect();
        for _ in 0..100 {
            let k = rng.random_range(0..live.len());
            let id = live.swap_remove(k);
            assert!(g.remove(ClusterId(id)));
        }
        assert!(!g.remove(ClusterId(100_000)));
        let reach = g.reachable(ScopeId::Static);
        assert_eq!(reach.len(), live.len());
        for id in &live {
            for layer in 0..g.levels(ClusterId(*id)) {
                assert!(g.neighbors(ClusterId(*id), layer).len() <= 6);
            }
        }
    }

    #[test]
    fn remove_sole_node_empties_graph() {
        let mut g = graph(4);
        g.insert(ScopeId::Static, ClusterId(1), &[0.0]);
        g.remove(ClusterId(1));
        assert_eq!(g.entry(ScopeId::Static), None);
        let r = g.coarse_search(&[0.0], &[ScopeId::Static].into_iter().collect(), 3);
        assert!(r.clusters.is_empty());
    }

    #[test]
    fn static_recall_at_default_ef() {
        let mut g = HybridGraph::new(GraphConfig::default(), Metric::SquaredEuclidean, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cents: Vec<Vec<f32>> = (0..1000).map(|_| rand_vec(&mut rng, 16)).collect();
        for (i, c) in cents.iter().enumerate() {
            g.insert(ScopeId::Static, ClusterId(i as u64), c);
        }
        let scopes: BTreeSet<ScopeId> = [ScopeId::Static].into_iter().collect();
        let nprobe = 10;
        let mut hit = 0;
        for _ in 0..200 {
            let q = rand_vec(&mut rng, 16);
            let mut truth: Vec<(f32, usize)> = cents
                .iter()
                .enumerate()
                .map(|(i, c)| (c.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f32>(), i))
                .collect();
            truth.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: BTreeSet<u64> = truth[..nprobe].iter().map(|t| t.1 as u64).collect();
            let got = g.coarse_search(&q, &scopes, nprobe);
            hit += got.clusters.iter().filter(|c| want.contains(&c.0 .0)).count();
        }
        let recall = hit as f64 / (200 * nprobe) as f64;
        assert!(recall >= 0.95, "recall {recall}");
    }

    #[test]
    fn exhaustive_frontier_is_exact_across_scopes() {
        let mut g = graph(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut all = Vec::new();
        for i in 0..200u64 {
            let scope = if i % 4 == 0 { ScopeId::Static } else { ScopeId::Agent(AgentId((i % 3) as u32)) };
            let c = rand_vec(&mut rng, 4);
            g.insert(scope, ClusterId(i), &c);
            all.push((scope, c));
        }
        let scopes: BTreeSet<ScopeId> = all.iter().map(|a| a.0).collect();
        for _ in 0..50 {
            let q = rand_vec(&mut rng, 4);
            let got = g.coarse_search_ef(&q, &scopes, 20, 200);
            let mut truth: Vec<(f32, u64)> = all
                .iter()
                .enumerate()
                .map(|(i, (_, c))| (Metric::SquaredEuclidean.distance(c, &q), i as u64))
                .collect();
            truth.sort_by(|a, b| rank_cmp(*a, *b));
            let want: Vec<u64> = truth[..20].iter().map(|t| t.1).collect();
            let have: Vec<u64> = got.clusters.iter().map(|c| c.0 .0).collect();
            assert_eq!(have, want);
        }
    }

    #[test]
    fn no_cross_scope_leakage() {
        let mut g = graph(8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..120u64 {
            let scope = match i % 3 {
                0 => ScopeId::Static,
                1 => ScopeId::Agent(AgentId(1)),
                _ => ScopeId::Agent(AgentId(2)),
            };
            g.insert(scope, ClusterId(i), &rand_vec(&mut rng, 4));
        }
        let scopes: BTreeSet<ScopeId> = [ScopeId::Agent(AgentId(1))].into_iter().collect();
        for _ in 0..30 {
            let r = g.coarse_search(&rand_vec(&mut rng, 4), &scopes, 10);
            assert!(!r.clusters.is_empty());
            assert!(r.clusters.iter().all(|c| c.0 .0 % 3 == 1));
        }
    }

    #[test]
    fn agent_centroid_query_ranks_first() {
        let mut g = graph(8);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for i in 0..50u64 {
            g.insert(ScopeId::Static, ClusterId(i), &rand_vec(&mut rng, 4));
        }
        let target = rand_vec(&mut rng, 4);
        for i in 50..60u64 {
            g.insert(ScopeId::Agent(AgentId(1)), ClusterId(i), &rand_vec(&mut rng, 4));
        }
        g.insert(ScopeId::Agent(AgentId(1)), ClusterId(60), &target);
        let scopes: BTreeSet<ScopeId> = [ScopeId::Static, ScopeId::Agent(AgentId(1))].into_iter().collect();
        let r = g.coarse_search(&target, &scopes, 5);
        assert_eq!(r.clusters[0], (ClusterId(60), 0.0));
    }

    #[test]
    fn static_removal_retargets_portals() {
        let mut g = graph(8);
        g.insert(ScopeId::Static, ClusterId(1), &[0.0, 0.0]);
        g.insert(ScopeId::Static, ClusterId(2), &[10.0, 0.0]);
        let a = ScopeId::Agent(AgentId(1));
        // The first agent node has no spacing estimate yet, so p = 1.
        assert_eq!(g.insert(a, ClusterId(3), &[1.0, 0.0]), Some(ClusterId(1)));
        g.remove(ClusterId(1));
        assert_eq!(g.portals(ClusterId(3)), &[ClusterId(2)]);
        assert_eq!(g.portals(ClusterId(2)), &[ClusterId(3)]);
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut g = graph(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..30 {
            g.insert(ScopeId::Static, ClusterId(i), &rand_vec(&mut rng, 3));
        }
        let snap = g.snapshot();
        let mut h = HybridGraph::restore(g.cfg.clone(), g.metric, snap.clone());
        assert_eq!(h.snapshot(), snap);
        g.insert(ScopeId::Static, ClusterId(99), &[0.1, 0.2, 0.3]);
        h.insert(ScopeId::Static, ClusterId(99), &[0.1, 0.2, 0.3]);
        assert_eq!(g.snapshot(), h.snapshot());
    }
}
