//! Trace replay against one strategy, with per-operation records.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use agentmem::cache::Level;
use agentmem::engine::StoreStats;
use agentmem::{AgentId, Error, ItemId, NewItem, Result, ScopeId, SearchParams, Store, StoreConfig};
use serde::{Deserialize, Serialize};

use crate::oracle::StreamingOracle;
use crate::steady::{steady_state, SteadyRule, SteadyState};
use crate::strategy::Strategy;
use crate::workload::{static_base, OpKind, Trace, TraceOp, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplayMode {
    /// One thread, trace order. Identical inputs give identical records.
    Deterministic,
    /// One thread per agent; operations of different agents interleave
    /// freely. Recall and walk measurements are not taken.
    Throughput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Size of the shared static base built before the trace starts.
    pub static_base: usize,
    /// Lists of the static IVF; `ceil(sqrt(static_base))` when unset.
    pub nlist: Option<usize>,
    pub k: usize,
    pub nprobe: usize,
    /// Probe every cluster at L2 (cache termination stays on), so a search
    /// that reaches L2 is exact.
    pub exact_l2: bool,
    /// Exhaustive searches: no cache levels, every cluster probed.
    pub exhaustive: bool,
    /// Recall of every search against the oracle.
    pub recall: bool,
    /// Vectors scanned, in the store's scan order, until every oracle
    /// top-`k` item has been seen.
    pub walk: bool,
    /// Wall-clock latency per operation. Off keeps records reproducible.
    pub timing: bool,
    pub mode: ReplayMode,
    pub split_threshold: Option<usize>,
    pub split_target: Option<usize>,
    pub steady: SteadyRule,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            static_base: 100_000,
            nlist: None,
            k: 5,
            nprobe: 8,
            exact_l2: false,
            exhaustive: false,
            recall: true,
            walk: true,
            timing: false,
            mode: ReplayMode::Deterministic,
            split_threshold: None,
            split_target: None,
            steady: SteadyRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub seq: usize,
    pub agent: u32,
    pub request: u32,
    pub step: u32,
    pub kind: OpKind,
    pub latency_ns: Option<u64>,
    pub scanned: u64,
    pub level: Option<Level>,
    pub early_terminated: bool,
    pub coarse: u64,
    pub clusters_probed: u32,
    pub recall: Option<f64>,
    pub scanned_to_recall: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: Strategy,
    pub mode: ReplayMode,
    pub ops: usize,
    pub searches: usize,
    pub inserts: usize,
    pub wall_ms: Option<f64>,
    pub mean_search_latency_ns: Option<f64>,
    pub mean_scanned: f64,
    pub mean_coarse: f64,
    pub early_fraction: f64,
    pub mean_recall: Option<f64>,
    pub mean_scanned_to_recall: Option<f64>,
    /// Steady state of the scanned-to-recall curve (scanned curve when
    /// walks are off).
    pub steady: Option<SteadyState>,
    pub store: StoreStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub spec: WorkloadSpec,
    pub strategy: Strategy,
    pub options: RunOptions,
    pub config: StoreConfig,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub meta: ReportMeta,
    pub records: Vec<OpRecord>,
}

pub fn agent_id(i: u32) -> AgentId {
    AgentId(i + 1)
}

/// Store and oracle after the static base is loaded, with every agent of
/// the trace registered.
pub fn prepare(spec: &WorkloadSpec, strategy: Strategy, opts: &RunOptions, base: &StoreConfig) -> Result<(Store, StreamingOracle)> {
    prepare_with(spec, strategy_config(strategy, opts, base), opts)
}

/// `base` adapted to `strategy`, with the split overrides of `opts`.
pub fn strategy_config(strategy: Strategy, opts: &RunOptions, base: &StoreConfig) -> StoreConfig {
    let mut cfg = strategy.configure(base);
    if let Some(t) = opts.split_threshold {
        cfg.cluster.split_threshold = t;
    }
    if let Some(t) = opts.split_target {
        cfg.cluster.split_target = t;
    }
    cfg
}

/// Like [`prepare`] with a final store configuration.
pub fn prepare_with(spec: &WorkloadSpec, cfg: StoreConfig, opts: &RunOptions) -> Result<(Store, StreamingOracle)> {
    if cfg.dimension != spec.dimension {
        return Err(Error::DimensionMismatch {
            expected: cfg.dimension,
            got: spec.dimension,
        });
    }
    let metric = cfg.metric;
    let store = Store::with_config(cfg)?;
    for a in 0..spec.agents {
        store.register_agent(agent_id(a as u32))?;
    }
    let mut oracle = StreamingOracle::new(metric);
    if opts.static_base > 0 {
        let vs = static_base(opts.static_base, spec.dimension, spec.seed);
        let nlist = opts
            .nlist
            .unwrap_or_else(|| (opts.static_base as f64).sqrt().ceil() as usize);
        let items = vs
            .iter()
            .enumerate()
            .map(|(i, v)| NewItem::new(v.clone()).with_id(i as ItemId))
            .collect();
        store.build_static_ivf(items, nlist)?;
        for (i, v) in vs.into_iter().enumerate() {
            oracle.insert(i as ItemId, ScopeId::Static, v);
        }
    }
    Ok((store, oracle))
}

/// Every search reads the static scope and every agent scope, so the
/// oracle (all live items) does not depend on the strategy.
pub fn query_scopes(agents: usize) -> Vec<ScopeId> {
    std::iter::once(ScopeId::Static)
        .chain((0..agents).map(|a| ScopeId::Agent(agent_id(a as u32))))
        .collect()
}

pub fn run(trace: &Trace, strategy: Strategy, opts: &RunOptions, base: &StoreConfig) -> Result<RunReport> {
    let (store, oracle) = prepare(&trace.spec, strategy, opts, base)?;
    run_on(&store, oracle, trace, strategy, opts)
}

/// Replays `trace` on a prepared store.
pub fn run_on(store: &Store, mut oracle: StreamingOracle, trace: &Trace, strategy: Strategy, opts: &RunOptions) -> Result<RunReport> {
    if trace.spec.dimension != store.dimension() {
        return Err(Error::DimensionMismatch {
            expected: store.dimension(),
            got: trace.spec.dimension,
        });
    }
    let scopes = query_scopes(trace.spec.agents);
    let ends: HashSet<usize> = trace.request_ends().into_iter().collect();
    let params = SearchParams::new(opts.k, opts.nprobe);
    let started = Instant::now();
    let mut records = match opts.mode {
        ReplayMode::Deterministic => {
            let mut out = Vec::with_capacity(trace.ops.len());
            for op in &trace.ops {
                out.push(replay_op(store, Some(&mut oracle), op, strategy, &scopes, &params, opts)?);
                if ends.contains(&(op.seq + 1)) {
                    store.complete_request(agent_id(op.agent))?;
                }
            }
            out
        }
        ReplayMode::Throughput => {
            let per_agent: Vec<Vec<&TraceOp>> = (0..trace.spec.agents)
                .map(|a| trace.ops.iter().filter(|o| o.agent as usize == a).collect())
                .collect();
            let results: Vec<Result<Vec<OpRecord>>> = std::thread::scope(|s| {
                let handles: Vec<_> = per_agent
                    .iter()
                    .map(|ops| {
                        let (scopes, params, ends) = (&scopes, &params, &ends);
                        s.spawn(move || {
                            let mut out = Vec::with_capacity(ops.len());
                            for op in ops {
                                out.push(replay_op(store, None, op, strategy, scopes, params, opts)?);
                                if ends.contains(&(op.seq + 1)) {
                                    store.complete_request(agent_id(op.agent))?;
                                }
                            }
                            Ok(out)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("replay thread")).collect()
            });
            let mut out = Vec::with_capacity(trace.ops.len());
            for r in results {
                out.extend(r?);
            }
            out.sort_by_key(|r| r.seq);
            out
        }
    };
    let wall = started.elapsed();
    records.shrink_to_fit();
    let summary = summarize(strategy, opts, &records, store.stats(), opts.timing.then(|| wall.as_secs_f64() * 1e3));
    Ok(RunReport {
        meta: ReportMeta {
            spec: trace.spec.clone(),
            strategy,
            options: opts.clone(),
            config: store.config().clone(),
            summary,
        },
        records,
    })
}

fn replay_op(
    store: &Store,
    oracle: Option<&mut StreamingOracle>,
    op: &TraceOp,
    strategy: Strategy,
    scopes: &[ScopeId],
    params: &SearchParams,
    opts: &RunOptions,
) -> Result<OpRecord> {
    let agent = agent_id(op.agent);
    let mut rec = OpRecord {
        seq: op.seq,
        agent: op.agent,
        request: op.request,
        step: op.step,
        kind: op.kind,
        latency_ns: None,
        scanned: 0,
        level: None,
        early_terminated: false,
        coarse: 0,
        clusters_probed: 0,
        recall: None,
        scanned_to_recall: None,
    };
    match op.kind {
        OpKind::Search => {
            let truth: Option<Vec<ItemId>> = match &oracle {
                Some(o) if opts.recall || opts.walk => Some(o.topk(&op.vector, opts.k, None).into_iter().map(|x| x.0).collect()),
                _ => None,
            };
            if let (Some(t), true) = (&truth, opts.walk) {
                let n = store.scan_order_to_recall(agent, scopes, &op.vector, t)?;
                rec.scanned_to_recall = Some(n.unwrap_or(u64::MAX));
            }
            let exact;
            let params = if opts.exhaustive {
                exact = SearchParams::exhaustive(params.k, store.cluster_count());
                &exact
            } else if opts.exact_l2 {
                exact = SearchParams {
                    terminate: true,
                    ..SearchParams::exhaustive(params.k, store.cluster_count())
                };
                &exact
            } else {
                params
            };
            let t0 = Instant::now();
            let r = store.search_with(agent, scopes, &op.vector, params)?;
            let dt = t0.elapsed();
            if opts.timing {
                rec.latency_ns = Some(dt.as_nanos() as u64);
            }
            rec.scanned = r.stats.scanned;
            rec.level = Some(r.stats.level);
            rec.early_terminated = r.stats.early_terminated;
            rec.coarse = r.stats.coarse_computations;
            rec.clusters_probed = r.stats.clusters_probed;
            if let (Some(t), true) = (&truth, opts.recall) {
                rec.recall = Some(recall(&r.ids(), t));
            }
        }
        OpKind::Insert => {
            let scope = strategy.write_scope(agent);
            let t0 = Instant::now();
            let ids = store.insert(agent, scope, vec![NewItem::new(op.vector.clone())])?;
            let dt = t0.elapsed();
            if opts.timing {
                rec.latency_ns = Some(dt.as_nanos() as u64);
            }
            if let Some(o) = oracle {
                o.insert(ids[0], scope, op.vector.clone());
            }
        }
    }
    Ok(rec)
}

/// Fraction of `truth` present in `got` (1 for an empty truth set).
pub fn recall(got: &[ItemId], truth: &[ItemId]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let got: HashSet<ItemId> = got.iter().copied().collect();
    truth.iter().filter(|t| got.contains(t)).count() as f64 / truth.len() as f64
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn summarize(strategy: Strategy, opts: &RunOptions, records: &[OpRecord], store: StoreStats, wall_ms: Option<f64>) -> Summary {
    let searches: Vec<&OpRecord> = records.iter().filter(|r| r.kind == OpKind::Search).collect();
    let curve: Vec<(usize, f64)> = searches
        .iter()
        .map(|r| (r.seq, r.scanned_to_recall.map_or(r.scanned as f64, |x| x as f64)))
        .collect();
    Summary {
        strategy,
        mode: opts.mode,
        ops: records.len(),
        searches: searches.len(),
        inserts: records.len() - searches.len(),
        wall_ms,
        mean_search_latency_ns: mean(searches.iter().filter_map(|r| r.latency_ns.map(|x| x as f64))),
        mean_scanned: mean(searches.iter().map(|r| r.scanned as f64)).unwrap_or(0.0),
        mean_coarse: mean(searches.iter().map(|r| r.coarse as f64)).unwrap_or(0.0),
        early_fraction: mean(searches.iter().map(|r| f64::from(u8::from(r.early_terminated)))).unwrap_or(0.0),
        mean_recall: mean(searches.iter().filter_map(|r| r.recall)),
        mean_scanned_to_recall: mean(searches.iter().filter_map(|r| r.scanned_to_recall.map(|x| x as f64))),
        steady: steady_state(&curve, &opts.steady),
        store,
    }
}

impl RunReport {
    pub fn summary(&self) -> &Summary {
        &self.meta.summary
    }

    pub fn searches(&self) -> impl Iterator<Item = &OpRecord> {
        self.records.iter().filter(|r| r.kind == OpKind::Search)
    }

    /// Writes `records.csv`, `summary.json` and `curve.dat` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("records.csv"), self.records_csv()?)?;
        let json = serde_json::to_string_pretty(&self.meta).expect("report serializes");
        fs::write(dir.join("summary.json"), json)?;
        fs::write(dir.join("curve.dat"), self.curve_dat())?;
        Ok(())
    }

    pub fn records_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(csv_error)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Gnuplot-ready search curve: index, trace position, scanned, scanned
    /// to full recall.
    pub fn curve_dat(&self) -> String {
        let mut out = Vec::new();
        let _ = writeln!(out, "# {} {}", self.meta.strategy, self.meta.spec.pattern);
        let _ = writeln!(out, "# search op_seq scanned scanned_to_recall recall");
        for (i, r) in self.searches().enumerate() {
            let _ = writeln!(
                out,
                "{i} {} {} {} {}",
                r.seq,
                r.scanned,
                r.scanned_to_recall.map_or("NaN".to_string(), |x| x.to_string()),
                r.recall.map_or("NaN".to_string(), |x| format!("{x:.4}"))
            );
        }
        String::from_utf8(out).expect("ascii")
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ReportMeta = serde_json::from_slice(&fs::read(dir.join("summary.json"))?).map_err(|e| Error::Parse {
            offset: 0,
            msg: format!("summary.json: {e}"),
        })?;
        let mut rd = csv::Reader::from_path(dir.join("records.csv")).map_err(csv_error)?;
        let records = rd.deserialize().collect::<std::result::Result<Vec<OpRecord>, _>>().map_err(csv_error)?;
        Ok(Self { meta, records })
    }
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            offset,
            msg: format!("records.csv: {other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_workload, Pattern};

    fn small_opts() -> RunOptions {
        RunOptions {
            static_base: 2000,
            ..RunOptions::default()
        }
    }

    #[test]
    fn search_only_never_flushes_buffers() {
        let spec = WorkloadSpec::stepwise(Pattern::SearchOnly, 1, 10, 3, 16, 4);
        let trace = generate_workload(&spec).unwrap();
        let r = run(&trace, Strategy::Full, &small_opts(), &StoreConfig::new(16)).unwrap();
        assert_eq!(r.summary().store.buffer_flushes, 0);
        assert_eq!(r.summary().inserts, 0);
        assert_eq!(r.records.len(), trace.ops.len());
    }

    #[test]
    fn replay_is_reproducible() {
        let spec = WorkloadSpec::stepwise(Pattern::OneSearchOneInsert, 2, 15, 3, 16, 5);
        let trace = generate_workload(&spec).unwrap();
        for s in Strategy::ALL {
            let a = run(&trace, s, &small_opts(), &StoreConfig::new(16)).unwrap();
            let b = run(&trace, s, &small_opts(), &StoreConfig::new(16)).unwrap();
            assert_eq!(a.records_csv().unwrap(), b.records_csv().unwrap(), "{s}");
        }
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        let spec = WorkloadSpec::stepwise(Pattern::SearchOnly, 1, 1, 1, 8, 0);
        let trace = generate_workload(&spec).unwrap();
        assert!(run(&trace, Strategy::Full, &small_opts(), &StoreConfig::new(16)).unwrap_err().is_usage());
    }

    #[test]
    fn reports_roundtrip_through_files() {
        let spec = WorkloadSpec::stepwise(Pattern::StepSearchThenInsert, 1, 8, 3, 8, 6);
        let trace = generate_workload(&spec).unwrap();
        let r = run(&trace, Strategy::IvfSplit, &small_opts(), &StoreConfig::new(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_dir(dir.path()).unwrap();
        let back = RunReport::load(dir.path()).unwrap();
        assert_eq!(back, r);
        assert!(fs::read_to_string(dir.path().join("curve.dat")).unwrap().lines().count() > trace.searches());
    }

    #[test]
    fn throughput_mode_keeps_one_record_per_op() {
        let spec = WorkloadSpec::stepwise(Pattern::OneSearchOneInsert, 3, 10, 3, 8, 7);
        let trace = generate_workload(&spec).unwrap();
        let opts = RunOptions {
            mode: ReplayMode::Throughput,
            timing: true,
            ..small_opts()
        };
        let r = run(&trace, Strategy::Full, &opts, &StoreConfig::new(8)).unwrap();
        assert_eq!(r.records.len(), trace.ops.len());
        assert!(r.records.iter().enumerate().all(|(i, x)| x.seq == i && x.latency_ns.is_some()));
        assert!(r.summary().wall_ms.is_some());
    }
}
