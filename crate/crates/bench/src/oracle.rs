//! Brute-force ground truth over the exact live set at a trace position.

use std::collections::HashMap;

use agentmem::{ItemId, Metric, ScopeId};
use rayon::prelude::*;

use crate::workload::{OpKind, Trace};

/// Flat list of live vectors, updated as a trace is replayed.
#[derive(Debug, Clone)]
pub struct StreamingOracle {
    metric: Metric,
    ids: Vec<ItemId>,
    scopes: Vec<ScopeId>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<ItemId, usize>,
}

const PARALLEL_MIN: usize = 4096;

impl StreamingOracle {
    pub fn new(metric: Metric) -> Self {
        Self {
            metric,
            ids: Vec::new(),
            scopes: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: ItemId, scope: ScopeId, v: Vec<f32>) {
        if let Some(&i) = self.index.get(&id) {
            self.scopes[i] = scope;
            self.vectors[i] = v;
            return;
        }
        self.index.insert(id, self.ids.len());
        self.ids.push(id);
        self.scopes.push(scope);
        self.vectors.push(v);
    }

    pub fn delete(&mut self, id: ItemId) -> bool {
        let Some(i) = self.index.remove(&id) else { return false };
        self.ids.swap_remove(i);
        self.scopes.swap_remove(i);
        self.vectors.swap_remove(i);
        if i < self.ids.len() {
            self.index.insert(self.ids[i], i);
        }
        true
    }

    /// Exact top-`k` over live items in `scopes` (all scopes when `None`),
    /// ascending by distance, ties by id.
    pub fn topk(&self, q: &[f32], k: usize, scopes: Option<&[ScopeId]>) -> Vec<(ItemId, f32)> {
        if k == 0 {
            return Vec::new();
        }
        let keep = |i: usize| scopes.is_none_or(|s| s.contains(&self.scopes[i]));
        let better = |a: &(f32, ItemId), b: &(f32, ItemId)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let local = |range: std::ops::Range<usize>| {
            let mut best: Vec<(f32, ItemId)> = Vec::with_capacity(k + 1);
            for i in range {
                if !keep(i) {
                    continue;
                }
                let d = self.metric.distance(&self.vectors[i], q);
                let cand = (d, self.ids[i]);
                if best.len() == k && better(&cand, &best[k - 1]).is_ge() {
                    continue;
                }
                let pos = best.partition_point(|b| better(b, &cand).is_lt());
                best.insert(pos, cand);
                best.truncate(k);
            }
            best
        };
        let n = self.ids.len();
        let mut all = if n >= PARALLEL_MIN {
            let chunk = n.div_ceil(rayon::current_num_threads() * 4).max(1024);
            (0..n.div_ceil(chunk))
                .into_par_iter()
                .map(|c| local(c * chunk..((c + 1) * chunk).min(n)))
                .reduce(Vec::new, |mut a, b| {
                    a.extend(b);
                    a
                })
        } else {
            local(0..n)
        };
        all.sort_by(better);
        all.truncate(k);
        all.into_iter().map(|(d, id)| (id, d)).collect()
    }
}

/// Ground truth for the search at `position` of a trace replayed over
/// `base`: every earlier insert is live. Trace inserts get ids
/// `first_id + (insert ordinal)`.
pub fn oracle_topk(base: &[(ItemId, Vec<f32>)], trace: &Trace, first_id: ItemId, position: usize, q: &[f32], k: usize, metric: Metric) -> Vec<(ItemId, f32)> {
    let mut o = StreamingOracle::new(metric);
    for (id, v) in base {
        o.insert(*id, ScopeId::Static, v.clone());
    }
    let mut next = first_id;
    for op in trace.ops.iter().take(position) {
        if op.kind == OpKind::Insert {
            o.insert(next, ScopeId::Static, op.vector.clone());
            next += 1;
        }
    }
    o.topk(q, k, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_exact_hit() {
        let mut o = StreamingOracle::new(Metric::SquaredEuclidean);
        assert!(o.topk(&[0.0, 0.0], 3, None).is_empty());
        o.insert(7, ScopeId::Static, vec![1.0, 1.0]);
        o.insert(8, ScopeId::Static, vec![0.0, 1.0]);
        assert_eq!(o.topk(&[1.0, 1.0], 1, None), vec![(7, 0.0)]);
        assert!(o.delete(7));
        assert!(!o.delete(7));
        assert_eq!(o.topk(&[1.0, 1.0], 1, None)[0].0, 8);
    }

    #[test]
    fn scope_filter_and_ties() {
        let mut o = StreamingOracle::new(Metric::SquaredEuclidean);
        o.insert(5, ScopeId::Agent(agentmem::AgentId(1)), vec![0.0]);
        o.insert(3, ScopeId::Static, vec![1.0]);
        o.insert(2, ScopeId::Static, vec![-1.0]);
        let ids: Vec<_> = o.topk(&[0.0], 2, Some(&[ScopeId::Static])).into_iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![2, 3]);
        assert_eq!(o.topk(&[0.0], 1, None)[0].0, 5);
    }

    #[test]
    fn parallel_path_matches_sequential() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut o = StreamingOracle::new(Metric::SquaredEuclidean);
        for i in 0..20_000u64 {
            o.insert(i, ScopeId::Static, vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        }
        let q = [0.1f32, -0.2];
        let mut all: Vec<(f32, u64)> = (0..20_000usize).map(|i| (Metric::SquaredEuclidean.distance(&o.vectors[i], &q), o.ids[i])).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want: Vec<u64> = all.iter().take(10).map(|x| x.1).collect();
        let got: Vec<u64> = o.topk(&q, 10, None).into_iter().map(|x| x.0).collect();
        assert_eq!(got, want);
    }
}
