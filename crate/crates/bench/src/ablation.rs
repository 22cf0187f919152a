//! Drivers for the comparative experiments.

use agentmem::config::CoarseMode;
use agentmem::{AgentId, NewItem, Result, ScopeId, SearchParams, Store, StoreConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::run::{run, RunOptions, RunReport};
use crate::steady::SteadyState;
use crate::strategy::Strategy;
use crate::oracle::StreamingOracle;
use crate::workload::{around, generate_workload, static_base, unit_vector, Pattern, Trace, WorkloadSpec};

/// Convergence under a 1:1 search/insert stream on a large static base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSetup {
    pub static_base: usize,
    pub dimension: usize,
    pub groups: usize,
    pub requests: usize,
    pub steps: usize,
    pub k: usize,
    pub nprobe: usize,
    pub split_threshold: usize,
    pub split_target: usize,
    pub seed: u64,
}

impl Default for ConvergenceSetup {
    fn default() -> Self {
        Self {
            static_base: 100_000,
            dimension: 64,
            groups: 3,
            requests: 500,
            steps: 3,
            k: 5,
            nprobe: 8,
            split_threshold: 512,
            split_target: 256,
            seed: 12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Convergence {
    pub trace: Trace,
    pub full: RunReport,
    pub ivf_static: RunReport,
    pub ivf_split: RunReport,
}

impl Convergence {
    pub fn report(&self, s: Strategy) -> &RunReport {
        match s {
            Strategy::Full => &self.full,
            Strategy::IvfStatic => &self.ivf_static,
            _ => &self.ivf_split,
        }
    }

    pub fn steady(&self, s: Strategy) -> SteadyState {
        self.report(s).summary().steady.expect("runs contain searches")
    }

    /// Operations until steady state; a run that never settles counts its
    /// full length.
    pub fn ops_to_steady(&self, s: Strategy) -> usize {
        let st = self.steady(s);
        if st.reached {
            st.op_seq + 1
        } else {
            self.trace.ops.len()
        }
    }
}

pub fn convergence(setup: &ConvergenceSetup) -> Result<Convergence> {
    let mut spec = WorkloadSpec::stepwise(Pattern::OneSearchOneInsert, 1, setup.requests, setup.steps, setup.dimension, setup.seed);
    spec.generator = crate::workload::Generator::Stepwise {
        groups: setup.groups,
        sigma: None,
    };
    let trace = generate_workload(&spec)?;
    let opts = RunOptions {
        static_base: setup.static_base,
        k: setup.k,
        nprobe: setup.nprobe,
        recall: false,
        walk: true,
        split_threshold: Some(setup.split_threshold),
        split_target: Some(setup.split_target),
        ..RunOptions::default()
    };
    let base = StoreConfig::new(setup.dimension);
    let go = |s| run(&trace, s, &opts, &base);
    Ok(Convergence {
        full: go(Strategy::Full)?,
        ivf_static: go(Strategy::IvfStatic)?,
        ivf_split: go(Strategy::IvfSplit)?,
        trace,
    })
}

/// Early termination on the step-wise locality workload, against the same
/// trace searched without cache termination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminationSetup {
    pub static_base: usize,
    pub dimension: usize,
    pub agents: usize,
    pub requests: usize,
    pub steps: usize,
    pub k: usize,
    pub alpha: f32,
    pub pattern: Pattern,
    pub seed: u64,
}

impl Default for TerminationSetup {
    fn default() -> Self {
        Self {
            static_base: 20_000,
            dimension: 64,
            agents: 1,
            requests: 300,
            steps: 3,
            k: 5,
            alpha: 0.7,
            pattern: Pattern::OneSearchOneInsert,
            seed: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub searches: usize,
    pub early_fraction: f64,
    pub recall: f64,
    pub mean_scanned: f64,
    /// Mean scanned by exhaustive searches of the same trace.
    pub full_mean_scanned: f64,
    /// Misses logged by verification over returned truth slots.
    pub verify_miss_rate: f64,
    pub verify_queries: u64,
    pub verify_misses: u64,
    /// Top-`k` slots the oracle says were missed, summed over searches.
    pub oracle_misses: u64,
}

pub fn early_termination(setup: &TerminationSetup) -> Result<Termination> {
    let spec = WorkloadSpec::stepwise(setup.pattern, setup.agents, setup.requests, setup.steps, setup.dimension, setup.seed);
    let trace = generate_workload(&spec)?;
    let mut base = StoreConfig::new(setup.dimension);
    base.cache.alpha_et = setup.alpha;
    base.cache.verify_mode = true;
    let opts = RunOptions {
        static_base: setup.static_base,
        k: setup.k,
        exact_l2: true,
        walk: false,
        ..RunOptions::default()
    };
    let (store, oracle) = crate::run::prepare(&spec, Strategy::Full, &opts, &base)?;
    let cached = crate::run::run_on(&store, oracle, &trace, Strategy::Full, &opts)?;
    let (mut misses, mut truth, mut queries) = (0, 0, 0);
    for a in 0..setup.agents {
        let log = store.verify_log(crate::run::agent_id(a as u32))?;
        misses += log.misses;
        truth += log.truth;
        queries += log.queries;
    }
    base.cache.verify_mode = false;
    let full = run(
        &trace,
        Strategy::Full,
        &RunOptions {
            exhaustive: true,
            ..opts.clone()
        },
        &base,
    )?;
    let s = cached.summary();
    let oracle_misses = cached
        .searches()
        .filter_map(|r| r.recall)
        .map(|r| ((1.0 - r) * setup.k as f64).round() as u64)
        .sum();
    Ok(Termination {
        searches: s.searches,
        early_fraction: s.early_fraction,
        recall: s.mean_recall.unwrap_or(0.0),
        mean_scanned: s.mean_scanned,
        full_mean_scanned: full.summary().mean_scanned,
        verify_miss_rate: if truth == 0 { 0.0 } else { misses as f64 / truth as f64 },
        verify_queries: queries,
        verify_misses: misses,
        oracle_misses,
    })
}

/// Coarse-search cost of cross-scope queries as agent scopes are added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseSetup {
    pub static_base: usize,
    pub dimension: usize,
    /// Vectors per agent scope.
    pub per_agent: usize,
    /// Lists per agent scope.
    pub agent_nlist: usize,
    /// Locality groups per agent.
    pub agent_groups: usize,
    pub queries: usize,
    pub nprobe: usize,
    pub seed: u64,
}

impl Default for CoarseSetup {
    fn default() -> Self {
        Self {
            static_base: 20_000,
            dimension: 64,
            per_agent: 1000,
            agent_nlist: 16,
            agent_groups: 3,
            queries: 200,
            nprobe: 8,
            seed: 31,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarsePoint {
    pub agents: usize,
    pub hybrid: f64,
    pub independent: f64,
}

/// Mean coarse distance computations per query over {static} and every
/// agent scope, for each agent count. Both modes see identical data and
/// queries.
pub fn coarse_scaling(setup: &CoarseSetup, agent_counts: &[usize]) -> Result<Vec<CoarsePoint>> {
    let base = static_base(setup.static_base, setup.dimension, setup.seed);
    let max_agents = agent_counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x9a);
    let sigma = 0.2 * std::f32::consts::SQRT_2 / (setup.dimension as f32).sqrt();
    let agents: Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>)> = (0..max_agents)
        .map(|_| {
            let centers: Vec<Vec<f32>> = (0..setup.agent_groups).map(|_| unit_vector(&mut rng, setup.dimension)).collect();
            let data = (0..setup.per_agent).map(|i| around(&mut rng, &centers[i % centers.len()], sigma)).collect();
            (centers, data)
        })
        .collect();
    let mut out = Vec::new();
    for &n in agent_counts {
        let mut qrng = ChaCha8Rng::seed_from_u64(setup.seed ^ n as u64);
        let queries: Vec<Vec<f32>> = (0..setup.queries)
            .map(|_| {
                let (centers, _) = &agents[qrng.random_range(0..n.max(1))];
                let g = qrng.random_range(0..centers.len());
                around(&mut qrng, &centers[g], sigma)
            })
            .collect();
        let mut point = CoarsePoint {
            agents: n,
            hybrid: 0.0,
            independent: 0.0,
        };
        for mode in [CoarseMode::Hybrid, CoarseMode::Independent] {
            let mut cfg = StoreConfig::new(setup.dimension);
            cfg.seed = setup.seed;
            cfg.graph.mode = mode;
            cfg.cache.enabled = false;
            cfg.graph.profiles_enabled = false;
            let store = Store::with_config(cfg)?;
            let nlist = (setup.static_base as f64).sqrt().ceil() as usize;
            store.build_static_ivf(base.iter().map(|v| NewItem::new(v.clone())).collect(), nlist)?;
            let mut scopes = vec![ScopeId::Static];
            for (a, (_, data)) in agents.iter().take(n).enumerate() {
                let id = AgentId(a as u32 + 1);
                scopes.push(store.register_agent(id)?);
                store.build_ivf(ScopeId::Agent(id), data.iter().map(|v| NewItem::new(v.clone())).collect(), setup.agent_nlist)?;
            }
            let mut total = 0u64;
            for q in &queries {
                total += store.search_with(AgentId(1), &scopes, q, &SearchParams::new(5, setup.nprobe))?.stats.coarse_computations;
            }
            let mean = total as f64 / queries.len().max(1) as f64;
            match mode {
                CoarseMode::Hybrid => point.hybrid = mean,
                CoarseMode::Independent => point.independent = mean,
            }
        }
        out.push(point);
    }
    Ok(out)
}

/// Two agents with skewed, disjoint hot spots inside the same static
/// clusters. Each hot spot is a tight group of `group` near-duplicates, so a
/// query near it has the group as its exact top-`k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSetup {
    pub static_base: usize,
    pub dimension: usize,
    /// Anchors the hot spots of both agents crowd around.
    pub anchors: usize,
    /// Hot spots per agent.
    pub hot_spots: usize,
    pub group: usize,
    /// Offset lengths: hot spot from its anchor, group member from its spot,
    /// query from its spot.
    pub spread: f32,
    pub tightness: f32,
    pub jitter: f32,
    /// Zipf exponent over an agent's hot spots.
    pub skew: f64,
    pub queries: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for ProfileSetup {
    fn default() -> Self {
        Self {
            static_base: 20_000,
            dimension: 64,
            anchors: 4,
            hot_spots: 16,
            group: 5,
            spread: 0.3,
            tightness: 0.05,
            jitter: 0.05,
            skew: 1.1,
            queries: 1000,
            k: 5,
            seed: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOutcome {
    /// Mean vectors scanned until the exact top-`k` is seen.
    pub with_profiles: f64,
    pub without_profiles: f64,
    pub queries: usize,
}

/// Scan cost to full recall over the static scope, with and without agent
/// profiles. The cache levels are off so the difference is the in-cluster
/// scan order alone.
pub fn profile_ablation(setup: &ProfileSetup) -> Result<ProfileOutcome> {
    let d = setup.dimension;
    let per_dim = |len: f32| len / (d as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x9b);
    let mut base = static_base(setup.static_base, d, setup.seed);
    let anchors: Vec<Vec<f32>> = (0..setup.anchors.max(1)).map(|_| unit_vector(&mut rng, d)).collect();
    let mut spots: [Vec<Vec<f32>>; 2] = [Vec::new(), Vec::new()];
    let mut hot = Vec::new();
    for i in 0..2 * setup.hot_spots {
        let spot = around(&mut rng, &anchors[i % anchors.len()], per_dim(setup.spread));
        hot.push(spot.clone());
        for _ in 1..setup.group {
            hot.push(around(&mut rng, &spot, per_dim(setup.tightness)));
        }
        spots[i % 2].push(spot);
    }
    base.extend(hot);
    base.shuffle(&mut rng);

    let nlist = (base.len() as f64).sqrt().ceil() as usize;
    let make = |profiles: bool| -> Result<Store> {
        let mut cfg = StoreConfig::new(d);
        cfg.seed = setup.seed;
        cfg.cache.enabled = false;
        cfg.graph.profiles_enabled = profiles;
        let store = Store::with_config(cfg)?;
        store.build_static_ivf(base.iter().enumerate().map(|(i, v)| NewItem::new(v.clone()).with_id(i as u64)).collect(), nlist)?;
        store.register_agent(AgentId(1))?;
        store.register_agent(AgentId(2))?;
        Ok(store)
    };
    let with = make(true)?;
    let without = make(false)?;
    let mut oracle = StreamingOracle::new(with.metric());
    for (i, v) in base.iter().enumerate() {
        oracle.insert(i as u64, ScopeId::Static, v.clone());
    }

    let zipf = Zipf::new(setup.hot_spots as f64, setup.skew).map_err(|e| agentmem::Error::Usage(e.to_string()))?;
    let scopes = [ScopeId::Static];
    let (mut sum_with, mut sum_without) = (0u64, 0u64);
    for i in 0..setup.queries {
        let a = i % 2;
        let agent = AgentId(a as u32 + 1);
        let rank = (zipf.sample(&mut rng) as usize).clamp(1, spots[a].len()) - 1;
        let q = around(&mut rng, &spots[a][rank], per_dim(setup.jitter));
        let truth: Vec<u64> = oracle.topk(&q, setup.k, None).into_iter().map(|x| x.0).collect();
        for (store, sum) in [(&with, &mut sum_with), (&without, &mut sum_without)] {
            *sum += store.scan_order_to_recall(agent, &scopes, &q, &truth)?.unwrap_or(u64::MAX);
            store.search_with(agent, &scopes, &q, &SearchParams::new(setup.k, 8))?;
        }
    }
    let n = setup.queries.max(1) as f64;
    Ok(ProfileOutcome {
        with_profiles: sum_with as f64 / n,
        without_profiles: sum_without as f64 / n,
        queries: setup.queries,
    })
}
