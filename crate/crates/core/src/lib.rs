//! Multi-scope dynamic vector memory for LLM agents.
//!
//! Items live in IVF clusters owned by a [`cluster::ClusterStore`]. Each agent
//! gets a private scope next to the shared static base, a three-level cluster
//! cache, a table of access-pattern state machines, and a coarse graph linked
//! into the static graph through portal edges. Hot clusters can be cached on
//! an accelerator tier behind a pluggable [`tiering::Executor`].

pub mod cache;
pub mod cluster;
pub mod config;
pub mod engine;
pub mod error;
pub mod fsm;
pub mod graph;
pub mod kmeans;
pub mod profile;
pub mod tiering;
pub mod topk;
pub mod vector;

pub use config::StoreConfig;
pub use engine::{Hit, NewItem, SearchParams, SearchResult, Store};
pub use error::{Error, Result};
pub use vector::{AgentId, ClusterId, ItemId, MemoryItem, Metric, ScopeId, Vector};
