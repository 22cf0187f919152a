//! Replay harness for agentmem: synthetic agent workloads, a brute-force
//! oracle, baseline strategies, steady-state detection and run comparison.

pub mod ablation;
pub mod compare;
pub mod oracle;
pub mod run;
pub mod steady;
pub mod strategy;
pub mod workload;
