use std::collections::BTreeSet;

use agentmem::engine::{Op, OpOutput};
use agentmem::{AgentId, Error, Metric, NewItem, ScopeId, SearchParams, Store, StoreConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const A: AgentId = AgentId(1);
const B: AgentId = AgentId(2);

fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
}

fn brute_force(items: &[(u64, Vec<f32>)], q: &[f32], k: usize) -> Vec<u64> {
    let mut d: Vec<(f32, u64)> = items
        .iter()
        .map(|(id, v)| (v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), *id))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|x| x.1).collect()
}

fn store(d: usize) -> Store {
    let s = Store::with_config(StoreConfig::new(d)).unwrap();
    s.register_agent(A).unwrap();
    s.register_agent(B).unwrap();
    s
}

#[test]
fn exhaustive_search_matches_brute_force() {
    let d = 16;
    let s = store(d);
    let vs = random_vectors(2000, d, 7);
    let ids = s
        .build_static_ivf(vs.iter().cloned().map(NewItem::new).collect(), 40)
        .unwrap();
    assert!(!ids.is_empty());
    let live: Vec<(u64, Vec<f32>)> = s.live_items(&[ScopeId::Static]).into_iter().map(|(i, v)| (i, v.to_vec())).collect();
    assert_eq!(live.len(), 2000);
    let params = SearchParams::exhaustive(10, s.cluster_count());
    for q in random_vectors(100, d, 8) {
        let r = s.search_with(A, &[ScopeId::Static], &q, &params).unwrap();
        assert_eq!(r.ids(), brute_force(&live, &q, 10));
    }
}

#[test]
fn insert_is_visible_to_the_next_search() {
    let d = 8;
    let s = store(d);
    s.build_static_ivf(random_vectors(500, d, 1).into_iter().map(NewItem::new).collect(), 10).unwrap();
    let scope = ScopeId::Agent(A);
    for (i, v) in random_vectors(300, d, 2).into_iter().enumerate() {
        let id = s.insert(A, scope, vec![NewItem::new(v.clone()).with_payload(format!("p{i}"))]).unwrap()[0];
        let r = s.search(A, &[ScopeId::Static, scope], &v, 1, 4).unwrap();
        assert_eq!(r.hits[0].id, id, "insert {i} not visible");
        assert_eq!(r.hits[0].scope, scope);
        assert_eq!(&*s.payload(id).unwrap(), format!("p{i}").as_bytes());
    }
    assert_eq!(s.item_count(), 800);
}

#[test]
fn deleted_items_never_come_back() {
    let d = 8;
    let s = store(d);
    let scope = ScopeId::Agent(A);
    let vs = random_vectors(400, d, 3);
    let ids = s.insert(A, scope, vs.iter().cloned().map(NewItem::new).collect()).unwrap();
    for q in vs.iter().take(50) {
        s.search(A, &[scope], q, 5, 4).unwrap();
    }
    let gone: BTreeSet<u64> = ids.iter().step_by(2).copied().collect();
    for id in &gone {
        assert!(s.delete(A, *id).unwrap());
        assert!(!s.delete(A, *id).unwrap());
    }
    let params = SearchParams::exhaustive(20, s.cluster_count());
    for q in &vs {
        let r = s.search_with(A, &[scope], q, &params).unwrap();
        assert!(r.ids().iter().all(|i| !gone.contains(i)));
        assert_eq!(r.hits.len(), 20);
    }
}

#[test]
fn writes_outside_own_scope_are_rejected() {
    let s = store(4);
    let e = s.insert(A, ScopeId::Agent(B), vec![NewItem::new(vec![0.0; 4])]).unwrap_err();
    assert!(matches!(e, Error::Permission { .. }), "{e:?}");
    let e = s.insert(A, ScopeId::Static, vec![NewItem::new(vec![0.0; 4])]).unwrap_err();
    assert!(matches!(e, Error::Permission { .. }), "{e:?}");
    let id = s.insert(B, ScopeId::Agent(B), vec![NewItem::new(vec![1.0; 4])]).unwrap()[0];
    assert!(matches!(s.delete(A, id).unwrap_err(), Error::Permission { .. }));
    assert!(matches!(s.update(A, id, vec![0.0; 4], vec![]).unwrap_err(), Error::Permission { .. }));
    // Reads across scopes are allowed.
    let r = s.search(A, &[ScopeId::Agent(B)], &[1.0; 4], 1, 1).unwrap();
    assert_eq!(r.ids(), vec![id]);
}

#[test]
fn invalid_vectors_are_rejected_without_side_effects() {
    let s = store(4);
    let scope = ScopeId::Agent(A);
    let e = s
        .insert(A, scope, vec![NewItem::new(vec![0.0; 4]), NewItem::new(vec![0.0; 3])])
        .unwrap_err();
    assert!(matches!(e, Error::DimensionMismatch { .. }));
    let e = s.insert(A, scope, vec![NewItem::new(vec![0.0, f32::NAN, 0.0, 0.0])]).unwrap_err();
    assert!(matches!(e, Error::NonFinite { .. }));
    assert_eq!(s.item_count(), 0);
    assert!(s.search(A, &[scope], &[0.0; 5], 1, 1).is_err());
    assert!(s.search(AgentId(99), &[scope], &[0.0; 4], 1, 1).unwrap_err().is_usage());
}

#[test]
fn update_replays_like_delete_then_insert() {
    let d = 8;
    let s = store(d);
    let scope = ScopeId::Agent(A);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vs = random_vectors(300, d, 12);
    let ids = s.insert(A, scope, vs.iter().cloned().map(NewItem::new).collect()).unwrap();
    let mut oracle: Vec<(u64, Vec<f32>)> = ids.iter().copied().zip(vs).collect();
    for step in 0..400 {
        let i = rng.random_range(0..oracle.len());
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        assert!(s.update(A, oracle[i].0, v.clone(), vec![]).unwrap());
        oracle[i].1 = v.clone();
        let r = s.search(A, &[scope], &v, 1, 2).unwrap();
        assert_eq!(r.ids(), vec![oracle[i].0], "step {step}");
        if step % 50 == 0 {
            let params = SearchParams::exhaustive(10, s.cluster_count());
            let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let r = s.search_with(A, &[scope], &q, &params).unwrap();
            assert_eq!(r.ids(), brute_force(&oracle, &q, 10));
        }
    }
    assert_eq!(s.item_count(), 300);
}

#[test]
fn explicit_ids_are_kept_and_duplicates_rejected() {
    let s = store(2);
    let scope = ScopeId::Agent(A);
    assert_eq!(s.insert(A, scope, vec![NewItem::new(vec![0.0, 0.0]).with_id(42)]).unwrap(), vec![42]);
    assert!(s.insert(A, scope, vec![NewItem::new(vec![1.0, 0.0]).with_id(42)]).unwrap_err().is_usage());
    let next = s.insert(A, scope, vec![NewItem::new(vec![1.0, 1.0])]).unwrap()[0];
    assert_ne!(next, 42);
}

#[test]
fn same_seed_gives_same_results() {
    let run = || {
        let s = store(8);
        s.build_static_ivf(random_vectors(1000, 8, 5).into_iter().map(NewItem::new).collect(), 20).unwrap();
        let mut out = Vec::new();
        for (i, q) in random_vectors(200, 8, 6).into_iter().enumerate() {
            if i % 2 == 0 {
                s.insert(A, ScopeId::Agent(A), vec![NewItem::new(q.clone())]).unwrap();
            }
            out.push(s.search(A, &[ScopeId::Static, ScopeId::Agent(A)], &q, 5, 3).unwrap());
            if i % 4 == 3 {
                s.complete_request(A).unwrap();
            }
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn lanes_preserve_per_agent_order() {
    let mut cfg = StoreConfig::new(4);
    cfg.engine.search_threads = 4;
    let s = Store::with_config(cfg).unwrap();
    s.register_agent(A).unwrap();
    s.register_agent(B).unwrap();
    let mut pending = Vec::new();
    for i in 0..200 {
        let agent = if i % 2 == 0 { A } else { B };
        let v = vec![i as f32, 0.0, 0.0, 0.0];
        pending.push((
            i,
            s.submit(
                agent,
                Op::Insert {
                    scope: ScopeId::Agent(agent),
                    items: vec![NewItem::new(v.clone())],
                },
            ),
            s.submit(
                agent,
                Op::Search {
                    scopes: vec![ScopeId::Agent(agent)],
                    query: v,
                    params: SearchParams::new(1, 4),
                },
            ),
        ));
    }
    for (i, ins, search) in pending {
        let OpOutput::Inserted(ids) = ins.wait().unwrap() else { panic!("insert output") };
        let OpOutput::Search(r) = search.wait().unwrap() else { panic!("search output") };
        assert_eq!(r.ids(), ids, "op {i}");
    }
    assert!(s.stats().batches > 0);
}

#[test]
fn shutdown_rejects_new_work() {
    let s = store(2);
    s.shutdown();
    assert!(matches!(s.insert(A, ScopeId::Agent(A), vec![NewItem::new(vec![0.0, 0.0])]), Err(Error::Shutdown)));
    assert!(matches!(
        s.submit(A, Op::CompleteRequest).wait(),
        Err(Error::Shutdown)
    ));
}

#[test]
fn other_metrics_return_exact_results_exhaustively() {
    for metric in [Metric::InnerProduct, Metric::Cosine] {
        let mut cfg = StoreConfig::new(6);
        cfg.metric = metric;
        let s = Store::with_config(cfg).unwrap();
        s.register_agent(A).unwrap();
        let vs = random_vectors(600, 6, 9);
        s.build_static_ivf(vs.iter().cloned().map(NewItem::new).collect(), 12).unwrap();
        let live = s.live_items(&[ScopeId::Static]);
        let params = SearchParams::exhaustive(5, s.cluster_count());
        for q in random_vectors(30, 6, 10) {
            let mut truth: Vec<(f32, u64)> = live.iter().map(|(i, v)| (metric.distance(v, &q), *i)).collect();
            truth.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<u64> = truth.iter().take(5).map(|x| x.1).collect();
            let r = s.search_with(A, &[ScopeId::Static], &q, &params).unwrap();
            assert_eq!(r.ids(), want, "{metric}");
        }
    }
}
