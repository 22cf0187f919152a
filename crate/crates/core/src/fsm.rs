//! Finite-state models of per-agent access sequences.
//!
//! A request's accesses are clustered into at most `N_S` states linked by the
//! observed step transitions. Each agent keeps a table of at most `N_p` such
//! machines; a running request is aligned against them to predict the state
//! of its next access.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::PatternConfig;
use crate::vector::Metric;

pub type StateKey = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsmState {
    /// Stable identity; survives merges (the larger constituent keeps its key).
    pub key: StateKey,
    pub centroid: Vec<f32>,
    pub delta: f32,
    /// Accesses merged into this state.
    pub count: u64,
    pub hits: u64,
    /// Sequences that started in this state.
    pub entry_count: u64,
    members: Vec<Vec<f32>>,
}

impl FsmState {
    fn single(key: StateKey, v: &[f32]) -> Self {
        Self {
            key,
            centroid: v.to_vec(),
            delta: 0.0,
            count: 1,
            hits: 0,
            entry_count: 0,
            members: vec![v.to_vec()],
        }
    }

    pub fn members(&self) -> &[Vec<f32>] {
        &self.members
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessPatternFsm {
    states: Vec<FsmState>,
    #[serde(with = "crate::vector::map_as_pairs")]
    transitions: BTreeMap<(usize, usize), u64>,
    d_merge: f32,
    metric: Metric,
}

impl AccessPatternFsm {
    /// Assembles a machine from parts; transition endpoints must be valid.
    pub fn from_parts(
        states: Vec<FsmState>,
        transitions: BTreeMap<(usize, usize), u64>,
        d_merge: f32,
        metric: Metric,
    ) -> Self {
        assert!(transitions.keys().all(|(a, b)| *a < states.len() && *b < states.len()));
        Self {
            states,
            transitions,
            d_merge,
            metric,
        }
    }

    pub fn states(&self) -> &[FsmState] {
        &self.states
    }

    pub fn transitions(&self) -> &BTreeMap<(usize, usize), u64> {
        &self.transitions
    }

    pub fn has_transition(&self, from: usize, to: usize) -> bool {
        self.transitions.contains_key(&(from, to))
    }

    pub fn d_merge(&self) -> f32 {
        self.d_merge
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Index of the state whose centroid is nearest to `v` (ties: lower index).
    pub fn align(&self, v: &[f32]) -> Option<usize> {
        let mut best: Option<(f32, usize)> = None;
        for (i, s) in self.states.iter().enumerate() {
            let d = self.metric.distance(&s.centroid, v);
            if best.is_none_or(|b| d < b.0) {
                best = Some((d, i));
            }
        }
        best.map(|b| b.1)
    }

    /// Most frequent successor of `state` (ties: lower index).
    pub fn successor(&self, state: usize) -> Option<usize> {
        let mut best: Option<(u64, usize)> = None;
        for ((_, to), n) in self.transitions.range((state, 0)..=(state, usize::MAX)) {
            if best.is_none_or(|b| *n > b.0) {
                best = Some((*n, *to));
            }
        }
        best.map(|b| b.1)
    }

    fn rekey(&mut self, offset: u64) {
        for s in &mut self.states {
            s.key += offset;
        }
    }

    /// Merges the closest state pair while there are more than `n_s` states or
    /// the closest pair is within `d_merge`.
    fn compact(&mut self, n_s: usize, member_cap: usize) {
        let n_s = n_s.max(1);
        loop {
            let n = self.states.len();
            if n < 2 {
                return;
            }
            let mut best: Option<(f32, usize, usize)> = None;
            for i in 0..n {
                for j in i + 1..n {
                    let d = self.metric.length(&self.states[i].centroid, &self.states[j].centroid);
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, i, j));
                    }
                }
            }
            let (d, i, j) = best.expect("n >= 2");
            if n <= n_s && d > self.d_merge {
                return;
            }
            self.merge_states(i, j, member_cap);
        }
    }

    /// Merges state `j` into state `i` (`i < j`) and remaps transitions.
    fn merge_states(&mut self, i: usize, j: usize, member_cap: usize) {
        let b = self.states.remove(j);
        let a = &mut self.states[i];
        let total = (a.count + b.count) as f64;
        let (wa, wb) = (a.count as f64 / total, b.count as f64 / total);
        for (x, y) in a.centroid.iter_mut().zip(&b.centroid) {
            *x = (f64::from(*x) * wa + f64::from(*y) * wb) as f32;
        }
        if b.count > a.count || (b.count == a.count && b.key < a.key) {
            a.key = b.key;
        }
        a.count += b.count;
        a.hits += b.hits;
        a.entry_count += b.entry_count;
        a.members.extend(b.members);
        while a.members.len() > member_cap.max(1) {
            // Deterministic thinning keeps every other sample.
            let mut k = 0;
            a.members.retain(|_| {
                k += 1;
                k % 2 == 1
            });
        }
        a.delta = crate::vector::deviation(&a.members, &a.centroid, self.metric).unwrap_or(0.0);

        let remap = |s: usize| -> usize {
            match s.cmp(&j) {
                std::cmp::Ordering::Less => s,
                std::cmp::Ordering::Equal => i,
                std::cmp::Ordering::Greater => s - 1,
            }
        };
        let old = std::mem::take(&mut self.transitions);
        for ((from, to), n) in old {
            *self.transitions.entry((remap(from), remap(to))).or_default() += n;
        }
    }

    /// Plain-text adjacency listing with centroid norms.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.states.iter().enumerate() {
            let norm = s.centroid.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            let succ: Vec<String> = self
                .transitions
                .range((i, 0)..=(i, usize::MAX))
                .map(|((_, to), n)| format!("{to}x{n}"))
                .collect();
            let _ = writeln!(
                out,
                "s{i} key={} |c|={norm:.6} delta={:.6} count={} entry={} -> [{}]",
                s.key,
                s.delta,
                s.count,
                s.entry_count,
                succ.join(", ")
            );
        }
        out
    }
}

/// `factor` times the median pairwise distance of `seq` (0 for fewer than two
/// accesses).
pub fn d_merge_for(seq: &[Vec<f32>], factor: f32, metric: Metric) -> f32 {
    let mut ds = Vec::new();
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            ds.push(metric.length(&seq[i], &seq[j]));
        }
    }
    if ds.is_empty() {
        return 0.0;
    }
    ds.sort_by(f32::total_cmp);
    factor * ds[ds.len() / 2]
}

/// One state per access, then closest-pair merging down to `n_s` states and
/// until no pair is within `d_merge`. State keys are `0..seq.len()` before
/// merging.
pub fn build_fsm(seq: &[Vec<f32>], n_s: usize, d_merge: f32, metric: Metric) -> AccessPatternFsm {
    build_capped(seq, n_s, d_merge, metric, usize::MAX)
}

fn build_capped(seq: &[Vec<f32>], n_s: usize, d_merge: f32, metric: Metric, cap: usize) -> AccessPatternFsm {
    let mut states: Vec<FsmState> = seq
        .iter()
        .enumerate()
        .map(|(i, v)| FsmState::single(i as u64, v))
        .collect();
    if let Some(first) = states.first_mut() {
        first.entry_count = 1;
    }
    let mut transitions = BTreeMap::new();
    for i in 1..seq.len() {
        *transitions.entry((i - 1, i)).or_default() += 1;
    }
    let mut fsm = AccessPatternFsm {
        states,
        transitions,
        d_merge,
        metric,
    };
    fsm.compact(n_s, cap);
    fsm
}

/// Union of both machines' states and transitions, compacted with the larger
/// of the two merge distances.
pub fn merge_fsms(a: &AccessPatternFsm, b: &AccessPatternFsm, n_s: usize) -> AccessPatternFsm {
    merge_capped(a, b, n_s, usize::MAX)
}

fn merge_capped(a: &AccessPatternFsm, b: &AccessPatternFsm, n_s: usize, cap: usize) -> AccessPatternFsm {
    let off = a.states.len();
    let mut states = a.states.clone();
    states.extend(b.states.iter().cloned());
    let mut transitions = a.transitions.clone();
    for ((from, to), n) in &b.transitions {
        *transitions.entry((from + off, to + off)).or_default() += n;
    }
    let mut fsm = AccessPatternFsm {
        states,
        transitions,
        d_merge: a.d_merge.max(b.d_merge),
        metric: a.metric,
    };
    fsm.compact(n_s, cap);
    fsm
}

/// Σ_k I[(c_{k−1}→c_k) ∈ T] · δ_k / (1 + ‖c_k − v_k‖), each access aligned to
/// its nearest state. The first term's indicator is whether c_1 has ever
/// started a sequence.
pub fn fsm_similarity(p: &AccessPatternFsm, prefix: &[Vec<f32>]) -> f32 {
    score_and_perfect(p, prefix).0
}

/// (score, perfect score), the latter being Σ δ_k over the aligned states.
fn score_and_perfect(p: &AccessPatternFsm, prefix: &[Vec<f32>]) -> (f32, f32) {
    if p.states.is_empty() {
        return (0.0, 0.0);
    }
    let mut score = 0.0f32;
    let mut perfect = 0.0f32;
    let mut prev: Option<usize> = None;
    for v in prefix {
        let c = p.align(v).expect("non-empty");
        let s = &p.states[c];
        let on = match prev {
            None => s.entry_count > 0,
            Some(pc) => p.has_transition(pc, c),
        };
        if on {
            score += s.delta / (1.0 + p.metric.length(&s.centroid, v));
        }
        perfect += s.delta;
        prev = Some(c);
    }
    (score, perfect)
}

/// Symmetrised mean best-match kernel 1/(1+‖c_a − c_b‖) between state sets.
pub fn pair_similarity(a: &AccessPatternFsm, b: &AccessPatternFsm) -> f32 {
    fn one_way(a: &AccessPatternFsm, b: &AccessPatternFsm) -> f32 {
        if a.states.is_empty() || b.states.is_empty() {
            return 0.0;
        }
        let sum: f32 = a
            .states
            .iter()
            .map(|sa| {
                b.states
                    .iter()
                    .map(|sb| 1.0 / (1.0 + a.metric.length(&sa.centroid, &sb.centroid)))
                    .fold(0.0, f32::max)
            })
            .sum();
        sum / a.states.len() as f32
    }
    0.5 * (one_way(a, b) + one_way(b, a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fsm: usize,
    pub score: f32,
    pub state: StateKey,
    pub centroid: Vec<f32>,
    pub delta: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredictedCluster {
    /// L0 entry keyed by an FSM state.
    L0(StateKey),
    /// L1 slot id.
    L1(u64),
}

/// What the pattern table expects the agent's next access to touch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternHint {
    pub matched_fsm: Option<usize>,
    pub predicted_state: Option<Prediction>,
    pub predicted_clusters: Vec<PredictedCluster>,
}

impl PatternHint {
    pub fn is_empty(&self) -> bool {
        self.predicted_state.is_none()
    }
}

/// Per-agent table of at most `N_p` machines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternTable {
    fsms: Vec<AccessPatternFsm>,
    next_key: u64,
    cfg: PatternConfig,
    n_p: usize,
    metric: Metric,
}

impl PatternTable {
    pub fn new(cfg: PatternConfig, n_p: usize, metric: Metric) -> Self {
        Self {
            fsms: Vec::new(),
            next_key: 0,
            cfg,
            n_p: n_p.max(1),
            metric,
        }
    }

    pub fn fsms(&self) -> &[AccessPatternFsm] {
        &self.fsms
    }

    pub fn len(&self) -> usize {
        self.fsms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fsms.is_empty()
    }

    /// Best machine by similarity (ties: lower index) if it clears the match
    /// threshold: a positive score of at least `theta_match` times the perfect
    /// on-pattern score.
    pub fn best_match(&self, prefix: &[Vec<f32>]) -> Option<(usize, f32)> {
        if prefix.is_empty() {
            return None;
        }
        let mut best: Option<(usize, f32, f32)> = None;
        for (i, f) in self.fsms.iter().enumerate() {
            let (s, p) = score_and_perfect(f, prefix);
            if best.is_none_or(|b| s > b.1) {
                best = Some((i, s, p));
            }
        }
        let (i, s, p) = best?;
        (s > 0.0 && s >= self.cfg.theta_match * p).then_some((i, s))
    }

    pub fn predict(&self, prefix: &[Vec<f32>]) -> Option<Prediction> {
        let (fsm, score) = self.best_match(prefix)?;
        let f = &self.fsms[fsm];
        let cur = f.align(prefix.last()?)?;
        let next = f.successor(cur)?;
        let s = &f.states[next];
        Some(Prediction {
            fsm,
            score,
            state: s.key,
            centroid: s.centroid.clone(),
            delta: s.delta,
        })
    }

    /// Key of the state nearest to `v` over all machines (ties: earlier machine,
    /// lower index).
    pub fn align_key(&self, v: &[f32]) -> Option<StateKey> {
        let mut best: Option<(f32, StateKey)> = None;
        for f in &self.fsms {
            for s in &f.states {
                let d = self.metric.distance(&s.centroid, v);
                if best.is_none_or(|b| d < b.0) {
                    best = Some((d, s.key));
                }
            }
        }
        best.map(|b| b.1)
    }

    pub fn state(&self, key: StateKey) -> Option<&FsmState> {
        self.fsms.iter().flat_map(|f| f.states.iter()).find(|s| s.key == key)
    }

    /// Folds a finished request into the table.
    pub fn complete(&mut self, request: &[Vec<f32>]) {
        if request.is_empty() {
            return;
        }
        let d_merge = d_merge_for(request, self.cfg.d_merge_factor, self.metric);
        let cap = self.cfg.state_member_cap;
        let mut built = build_capped(request, self.cfg.n_s, d_merge, self.metric, cap);
        built.rekey(self.next_key);
        self.next_key += request.len() as u64;

        match self.best_match(request) {
            Some((i, _)) => {
                let f = &mut self.fsms[i];
                for v in request {
                    if let Some(c) = f.align(v) {
                        f.states[c].hits += 1;
                    }
                }
                self.fsms[i] = merge_capped(&self.fsms[i], &built, self.cfg.n_s, cap);
            }
            None => self.fsms.push(built),
        }
        while self.fsms.len() > self.n_p {
            let mut best: Option<(f32, usize, usize)> = None;
            for i in 0..self.fsms.len() {
                for j in i + 1..self.fsms.len() {
                    let s = pair_similarity(&self.fsms[i], &self.fsms[j]);
                    if best.is_none_or(|b| s > b.0) {
                        best = Some((s, i, j));
                    }
                }
            }
            let (_, i, j) = best.expect("at least two machines");
            let b = self.fsms.remove(j);
            self.fsms[i] = merge_capped(&self.fsms[i], &b, self.cfg.n_s, cap);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f32]) -> Vec<f32> {
        x.to_vec()
    }

    #[test]
    fn identical_accesses_collapse() {
        let seq = vec![v(&[1.0, 2.0]); 5];
        let f = build_fsm(&seq, 8, d_merge_for(&seq, 0.5, Metric::SquaredEuclidean), Metric::SquaredEuclidean);
        assert_eq!(f.states().len(), 1);
        assert!(f.has_transition(0, 0));
        assert_eq!(f.states()[0].delta, 0.0);
    }

    #[test]
    fn two_groups_two_states() {
        let seq = vec![v(&[0.0, 0.0]), v(&[0.1, 0.0]), v(&[10.0, 0.0]), v(&[10.1, 0.0]), v(&[0.0, 0.1])];
        let f = build_fsm(&seq, 2, 0.0, Metric::SquaredEuclidean);
        assert_eq!(f.states().len(), 2);
        let a = f.align(&[0.0, 0.0]).unwrap();
        let b = f.align(&[10.0, 0.0]).unwrap();
        assert_eq!(f.transitions()[&(a, b)], 1);
        assert_eq!(f.transitions()[&(b, a)], 1);
    }

    #[test]
    fn on_pattern_chain_scores_t() {
        let mut states: Vec<FsmState> = (0..4).map(|i| FsmState::single(i, &[i as f32 * 5.0, 0.0])).collect();
        for s in &mut states {
            s.delta = 1.0;
        }
        states[0].entry_count = 1;
        let t: BTreeMap<(usize, usize), u64> = [((0, 1), 1), ((1, 2), 1), ((2, 3), 1)].into_iter().collect();
        let f = AccessPatternFsm::from_parts(states, t, 0.0, Metric::SquaredEuclidean);
        let prefix: Vec<Vec<f32>> = (0..4).map(|i| v(&[i as f32 * 5.0, 0.0])).collect();
        assert_eq!(fsm_similarity(&f, &prefix), 4.0);
        let off: Vec<Vec<f32>> = vec![v(&[15.0, 0.0]), v(&[0.0, 0.0])];
        assert_eq!(fsm_similarity(&f, &off), 0.0);
        let empty = AccessPatternFsm::from_parts(vec![], BTreeMap::new(), 0.0, Metric::SquaredEuclidean);
        assert_eq!(fsm_similarity(&empty, &prefix), 0.0);
    }

    #[test]
    fn self_merge_keeps_states() {
        let seq = vec![v(&[0.0]), v(&[5.0]), v(&[10.0]), v(&[0.2])];
        let a = build_fsm(&seq, 8, 1.0, Metric::SquaredEuclidean);
        let m = merge_fsms(&a, &a, 8);
        assert_eq!(m.states().len(), a.states().len());
        for (from, to) in a.transitions().keys() {
            assert!(m.has_transition(*from, *to));
        }
    }

    #[test]
    fn disjoint_singletons_merge_to_two() {
        let a = build_fsm(&[v(&[0.0, 0.0])], 8, 0.0, Metric::SquaredEuclidean);
        let b = build_fsm(&[v(&[9.0, 9.0])], 8, 0.0, Metric::SquaredEuclidean);
        let m = merge_fsms(&a, &b, 8);
        assert_eq!(m.states().len(), 2);
        assert!(m.transitions().is_empty());
    }

    #[test]
    fn keys_survive_merges() {
        let seq = vec![v(&[0.0]), v(&[0.1]), v(&[0.05]), v(&[9.0])];
        let f = build_fsm(&seq, 2, 0.0, Metric::SquaredEuclidean);
        let keys: Vec<u64> = f.states().iter().map(|s| s.key).collect();
        assert_eq!(keys, vec![0, 3]);
    }

    #[test]
    fn dump_lists_edges() {
        let seq = vec![v(&[3.0, 4.0]), v(&[0.0, 0.0])];
        let f = build_fsm(&seq, 8, 0.0, Metric::SquaredEuclidean);
        let d = f.dump();
        assert!(d.contains("s0 key=0 |c|=5.000000"));
        assert!(d.contains("-> [1x1]"));
    }
}
