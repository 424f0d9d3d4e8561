//! State-aware routing for multi-agent collaboration.
//!
//! A router embeds the current system state (task query plus execution history)
//! and picks the agent whose fixed embedding has the highest cosine similarity.
//! The router is trained contrastively on execution paths harvested by a pruned,
//! optionally router-guided, search over agent orderings. Agents are simulated
//! deterministically by [`simenv`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod encode;
pub mod error;
pub mod eval;
pub mod evolve;
pub mod paths;
pub mod rng;
pub mod route;
pub mod simenv;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use paths::{canonical_path_order, count_paths, score_path};
pub use route::{run_inference, score_agents, ModelConfig, RouterModel, RoutingDecision};
pub use simenv::{generate_tasks, rollout, run_agent, EnvConfig, Scenario};
pub use types::{Action, AgentId, AgentProfile, ExecutionPath, PathScore, StepRecord, SystemState, TaskInstance};
