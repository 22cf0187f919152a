use agentmem::engine::FORMAT_VERSION;
use agentmem::{AgentId, Error, NewItem, ScopeId, SearchParams, Store, StoreConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const A: AgentId = AgentId(3);

fn vectors(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
}

fn populated(d: usize) -> (Store, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cfg = StoreConfig::new(d);
    cfg.cluster.split_threshold = 64;
    cfg.cluster.split_target = 32;
    let s = Store::with_config(cfg).unwrap();
    s.register_agent(A).unwrap();
    s.build_static_ivf(vectors(1500, d, &mut rng).into_iter().map(NewItem::new).collect(), 30).unwrap();
    let scope = ScopeId::Agent(A);
    for (i, v) in vectors(400, d, &mut rng).into_iter().enumerate() {
        s.insert(A, scope, vec![NewItem::new(v.clone()).with_payload(vec![i as u8; i % 7])]).unwrap();
        s.search(A, &[ScopeId::Static, scope], &v, 5, 4).unwrap();
        if i % 5 == 4 {
            s.complete_request(A).unwrap();
        }
    }
    (s, rng)
}

#[test]
fn restore_gives_identical_results_and_bytes() {
    let d = 12;
    let (s, mut rng) = populated(d);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.pnck");
    s.snapshot(&path).unwrap();
    let r = Store::restore(&path).unwrap();
    assert_eq!(r.item_count(), s.item_count());
    assert_eq!(r.cluster_count(), s.cluster_count());
    assert_same(&r.snapshot_bytes(), &std::fs::read(&path).unwrap());

    let scopes = [ScopeId::Static, ScopeId::Agent(A)];
    for (i, q) in vectors(100, d, &mut rng).into_iter().enumerate() {
        let p = if i % 2 == 0 {
            SearchParams::new(5, 3)
        } else {
            SearchParams::exhaustive(10, s.cluster_count())
        };
        let a = s.search_with(A, &scopes, &q, &p).unwrap();
        let b = r.search_with(A, &scopes, &q, &p).unwrap();
        assert_eq!(a, b, "probe {i}");
        if i % 3 == 0 {
            let na = s.insert(A, scopes[1], vec![NewItem::new(q.clone())]).unwrap();
            let nb = r.insert(A, scopes[1], vec![NewItem::new(q.clone())]).unwrap();
            assert_eq!(na, nb);
        }
    }
    assert_same(&s.snapshot_bytes(), &r.snapshot_bytes());
}

fn assert_same(a: &[u8], b: &[u8]) {
    if let Some(i) = a.iter().zip(b).position(|(x, y)| x != y) {
        let lo = i.saturating_sub(200);
        panic!(
            "snapshots differ at byte {i} (lengths {} and {}):\n{}\n{}",
            a.len(),
            b.len(),
            String::from_utf8_lossy(&a[lo..(i + 200).min(a.len())]),
            String::from_utf8_lossy(&b[lo..(i + 200).min(b.len())])
        );
    }
    assert_eq!(a.len(), b.len());
}

#[test]
fn export_import_keeps_search_results() {
    let d = 12;
    let (s, mut rng) = populated(d);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("static.ivf");
    let n = s.export_ivf(&path, ScopeId::Static).unwrap();
    assert_eq!(n, s.clusters().clusters_in(ScopeId::Static).len());

    let t = Store::with_config(StoreConfig::new(d)).unwrap();
    t.register_agent(A).unwrap();
    assert_eq!(t.load_external_ivf(&path, ScopeId::Static).unwrap(), n);
    assert_eq!(t.export_ivf_bytes(ScopeId::Static).unwrap(), std::fs::read(&path).unwrap());
    for q in vectors(100, d, &mut rng) {
        let p = SearchParams {
            bypass_cache: true,
            ..SearchParams::new(10, 4)
        };
        let a = s.search_with(A, &[ScopeId::Static], &q, &p).unwrap();
        let b = t.search_with(A, &[ScopeId::Static], &q, &p).unwrap();
        assert_eq!(a.hits, b.hits);
    }
    // A second import collides on every id.
    assert!(t.load_external_ivf(&path, ScopeId::Static).unwrap_err().is_usage());
}

#[test]
fn corrupt_files_report_offsets() {
    let (s, _) = populated(4);
    let bytes = s.snapshot_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Store::restore_bytes(&bad), Err(Error::Parse { offset: 0, .. })));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Store::restore_bytes(&bad),
        Err(Error::Version { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
    ));

    let cut = bytes.len() / 2;
    match Store::restore_bytes(&bytes[..cut]) {
        Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
        other => panic!("expected parse error, got {other:?}"),
    }

    // First centroid value becomes NaN.
    let mut bad = bytes.clone();
    bad[17..21].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(Store::restore_bytes(&bad), Err(Error::Parse { offset: 17, .. })));

    let other = Store::with_config(StoreConfig::new(5)).unwrap();
    let ivf = s.export_ivf_bytes(ScopeId::Static).unwrap();
    assert!(matches!(
        other.load_external_ivf_bytes(&ivf, ScopeId::Static),
        Err(Error::DimensionMismatch { expected: 5, got: 4 })
    ));
}

#[test]
fn empty_store_round_trips() {
    let s = Store::with_config(StoreConfig::new(3)).unwrap();
    let bytes = s.snapshot_bytes();
    let r = Store::restore_bytes(&bytes).unwrap();
    assert_eq!(r.item_count(), 0);
    assert_eq!(r.snapshot_bytes(), bytes);
    let ivf = s.export_ivf_bytes(ScopeId::Static).unwrap();
    assert_eq!(r.load_external_ivf_bytes(&ivf, ScopeId::Static).unwrap(), 0);
}
