//! Store configuration. Every tunable of every subsystem lives here so a
//! snapshot can echo the exact configuration it was taken under.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::Metric;

/// Environment variable that overrides [`StoreConfig::seed`].
pub const SEED_ENV: &str = "PANCAKE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub dimension: usize,
    pub metric: Metric,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub cluster: ClusterConfig,
    pub cache: CacheConfig,
    pub pattern: PatternConfig,
    pub graph: GraphConfig,
    pub tier: TierConfig,
    pub engine: EngineConfig,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            dimension: 64,
            metric: Metric::SquaredEuclidean,
            seed: 0x5eed,
            data_dir: None,
            cluster: ClusterConfig::default(),
            cache: CacheConfig::default(),
            pattern: PatternConfig::default(),
            graph: GraphConfig::default(),
            tier: TierConfig::default(),
            engine: EngineConfig::default(),
        }
    }
}

impl StoreConfig {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ..Self::default()
        }
    }

    /// Applies the `PANCAKE_SEED` override if it is set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::usage(format!("{SEED_ENV}=`{raw}` is not a u64")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::usage("dimension must be at least 1"));
        }
        if self.cluster.split_target == 0 || self.cluster.split_threshold < 2 {
            return Err(Error::usage("split_threshold must be >= 2 and split_target >= 1"));
        }
        if self.cache.n_p == 0 || self.cache.l0_capacity == 0 || self.cache.l1_capacity == 0 {
            return Err(Error::usage("cache capacities must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cache.alpha_et) {
            return Err(Error::usage("alpha_et must lie in [0, 1]"));
        }
        if self.cache.kappa == 0 || self.cache.window_w == 0 {
            return Err(Error::usage("kappa and window_w must be positive"));
        }
        if self.pattern.n_s == 0 {
            return Err(Error::usage("n_s must be positive"));
        }
        if self.graph.m < 2 || self.graph.ef_search_factor == 0 {
            return Err(Error::usage("graph m must be >= 2 and ef_search_factor >= 1"));
        }
        if !(self.graph.alpha_ic > 0.0) {
            return Err(Error::usage("alpha_ic must be positive"));
        }
        if self.tier.b_insert == 0 || self.tier.slack_fraction < 0.0 || self.tier.hysteresis < 1.0 {
            return Err(Error::usage("invalid tiering configuration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub split_threshold: usize,
    pub split_target: usize,
    pub split_enabled: bool,
    /// Mutations per cluster between lazy centroid/deviation refreshes.
    pub maintenance_interval: u32,
    pub kmeans_max_iters: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            split_threshold: 4096,
            split_target: 2048,
            split_enabled: true,
            maintenance_interval: 256,
            kmeans_max_iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub enabled: bool,
    pub n_p: usize,
    pub l0_capacity: usize,
    pub l1_capacity: usize,
    pub kappa: usize,
    pub alpha_et: f32,
    pub window_w: usize,
    pub verify_mode: bool,
    /// A capture starts a new L1 cluster when the query lies farther than
    /// this multiple of the nearest cluster's deviation.
    pub l1_join_factor: f32,
    /// L1 clusters scanned by a cached search (predicted cluster first).
    pub l1_nprobe: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_p: 16,
            l0_capacity: 64,
            l1_capacity: 1024,
            kappa: 2,
            alpha_et: 0.7,
            window_w: 32,
            verify_mode: false,
            l1_join_factor: 2.0,
            l1_nprobe: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternConfig {
    pub enabled: bool,
    pub n_s: usize,
    pub d_merge_factor: f32,
    /// Fraction of the perfect on-pattern score a prefix must reach to match.
    pub theta_match: f32,
    pub prefetch_enabled: bool,
    /// Retained member vectors per FSM state (deviation is computed over these).
    pub state_member_cap: usize,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_s: 8,
            d_merge_factor: 0.5,
            theta_match: 0.5,
            prefetch_enabled: true,
            state_member_cap: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CoarseMode {
    /// One traversal across scope graphs linked by portal edges.
    #[default]
    Hybrid,
    /// Each scope graph searched independently (per-agent index baseline).
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub m: usize,
    pub ef_search_factor: usize,
    /// Overrides `ef_search_factor * nprobe` when set.
    pub ef_search: Option<usize>,
    pub ef_construction: usize,
    pub alpha_ic: f32,
    pub p_size: usize,
    pub mode: CoarseMode,
    pub profiles_enabled: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            m: 16,
            ef_search_factor: 4,
            ef_search: None,
            ef_construction: 64,
            alpha_ic: 6.0,
            p_size: 32,
            mode: CoarseMode::Hybrid,
            profiles_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AcceleratorMode {
    #[default]
    None,
    Simulated,
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierConfig {
    pub accelerator: AcceleratorMode,
    pub budget_bytes: u64,
    pub b_insert: usize,
    pub decay_half_life: u64,
    pub slack_fraction: f32,
    pub hysteresis: f32,
    /// Operations between hotset re-evaluations.
    pub hotset_interval: u64,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            accelerator: AcceleratorMode::None,
            budget_bytes: 256 << 20,
            b_insert: 128,
            decay_half_life: 10_000,
            slack_fraction: 0.25,
            hysteresis: 1.2,
            hotset_interval: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WritePolicy {
    /// Agents write only their own scope; static memory is read-only after ingestion.
    #[default]
    OwnScopeOnly,
    /// Agents may also write the static scope.
    AllowStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InsertPlacement {
    /// New items enter through the per-agent cache levels and reach L2 as
    /// coherent clusters via merge-down.
    #[default]
    Cascade,
    /// New items are appended to the nearest existing cluster of the scope.
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BackgroundMode {
    /// Background work runs on the calling thread right after the
    /// foreground result is produced. Used for deterministic replay.
    #[default]
    Inline,
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub write_policy: WritePolicy,
    pub insert_placement: InsertPlacement,
    pub background: BackgroundMode,
    pub search_threads: usize,
    pub background_threads: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            write_policy: WritePolicy::OwnScopeOnly,
            insert_placement: InsertPlacement::Cascade,
            background: BackgroundMode::Inline,
            search_threads: 4,
            background_threads: 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        StoreConfig::default().validate().unwrap();
        assert!(StoreConfig::new(0).validate().unwrap_err().is_usage());
    }

    #[test]
    fn json_roundtrip() {
        let mut cfg = StoreConfig::new(1024);
        cfg.cache.alpha_et = 0.65;
        let text = serde_json::to_string(&cfg).unwrap();
        let back: StoreConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
