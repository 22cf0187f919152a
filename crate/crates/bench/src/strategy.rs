//! Index maintenance strategies compared by the harness.

use std::fmt;
use std::str::FromStr;

use agentmem::config::{CoarseMode, InsertPlacement, WritePolicy};
use agentmem::{AgentId, Error, Result, ScopeId, StoreConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// One shared IVF; inserts are appended to the nearest centroid with no
    /// maintenance and no splitting.
    IvfStatic,
    /// One shared IVF; inserts go to the nearest centroid and clusters split
    /// at the threshold.
    IvfSplit,
    /// A separate IVF per agent with its own coarse index; cross-scope
    /// queries search every index.
    PerAgentIndex,
    /// Private agent scopes behind the cluster cache, access patterns,
    /// the hybrid coarse graph and agent profiles.
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::IvfStatic, Strategy::IvfSplit, Strategy::PerAgentIndex, Strategy::Full];

    /// Adapts `base` to this strategy.
    pub fn configure(self, base: &StoreConfig) -> StoreConfig {
        let mut cfg = base.clone();
        match self {
            Strategy::IvfStatic | Strategy::IvfSplit => {
                cfg.engine.write_policy = WritePolicy::AllowStatic;
                cfg.engine.insert_placement = InsertPlacement::Nearest;
                cfg.cache.enabled = false;
                cfg.pattern.enabled = false;
                cfg.graph.profiles_enabled = false;
                cfg.graph.mode = CoarseMode::Hybrid;
                if self == Strategy::IvfStatic {
                    cfg.cluster.split_enabled = false;
                    cfg.cluster.maintenance_interval = 0;
                } else {
                    cfg.cluster.split_enabled = true;
                }
            }
            Strategy::PerAgentIndex => {
                cfg.engine.insert_placement = InsertPlacement::Nearest;
                cfg.cache.enabled = false;
                cfg.pattern.enabled = false;
                cfg.graph.profiles_enabled = false;
                cfg.graph.mode = CoarseMode::Independent;
                cfg.cluster.split_enabled = true;
            }
            Strategy::Full => {
                cfg.engine.insert_placement = InsertPlacement::Cascade;
                cfg.cache.enabled = true;
                cfg.pattern.enabled = true;
                cfg.graph.profiles_enabled = true;
                cfg.graph.mode = CoarseMode::Hybrid;
                cfg.cluster.split_enabled = true;
            }
        }
        cfg
    }

    /// Scope that receives the inserts of `agent`.
    pub fn write_scope(self, agent: AgentId) -> ScopeId {
        match self {
            Strategy::IvfStatic | Strategy::IvfSplit => ScopeId::Static,
            Strategy::PerAgentIndex | Strategy::Full => ScopeId::Agent(agent),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::IvfStatic => "ivf-static",
            Strategy::IvfSplit => "ivf-split",
            Strategy::PerAgentIndex => "per-agent-index",
            Strategy::Full => "full",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|x| x.to_string().replace('-', "") == norm)
            .ok_or_else(|| Error::Usage(format!("unknown strategy `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("IvfStatic".parse::<Strategy>().unwrap(), Strategy::IvfStatic);
        assert!("hnsw".parse::<Strategy>().is_err());
    }

    #[test]
    fn static_baseline_never_maintains() {
        let cfg = Strategy::IvfStatic.configure(&StoreConfig::new(8));
        assert!(!cfg.cluster.split_enabled);
        assert_eq!(cfg.cluster.maintenance_interval, 0);
        assert!(!cfg.cache.enabled);
        assert!(cfg.validate().is_ok());
    }
}
