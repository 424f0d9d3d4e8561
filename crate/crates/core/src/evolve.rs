//! Execution-path tree search and the self-evolving data pipeline.
//!
//! Each tree node is a repetition-free prefix of agents. Exhaustive search
//! evaluates every node. Pruned search stops descending as soon as a node's path
//! answers correctly: every descendant costs strictly more tokens, so the
//! token-optimal correct path is never below a correct node. Router-guided search
//! additionally expands only the router's top-k agents at each node.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, CasParams, Method};
use crate::paths::{best_path, count_paths_u64};
use crate::route::{score_agents, top_k_agents, ModelConfig, RouterModel};
use crate::simenv::{advance, Scenario};
use crate::train::{extract_examples, train, TrainConfig, TrainingExample};
use crate::types::{AgentId, ExecutionPath, SystemState, TaskId};

/// Largest population the tree searches accept by default (13699 paths).
pub const DEFAULT_SEARCH_CAP: usize = 7;
pub const DEFAULT_TOP_K: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Unexplored,
    /// The path ending here is correct; its subtree is discarded when pruning.
    Solved,
    /// Skipped by router-guided expansion.
    Pruned,
    /// Evaluated, incorrect, and all permitted children visited.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathTreeNode {
    pub prefix: Vec<AgentId>,
    /// State after executing `prefix`; `None` for nodes never evaluated.
    pub state: Option<SystemState>,
    pub status: NodeStatus,
    pub children: Vec<PathTreeNode>,
}

impl PathTreeNode {
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a PathTreeNode)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }

    /// Number of non-root nodes whose path was executed.
    pub fn evaluated_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |node| {
            if !node.prefix.is_empty() && node.state.is_some() {
                n += 1;
            }
        });
        n
    }
}

#[derive(Debug, Clone)]
pub enum SearchMode<'a> {
    Exhaustive,
    Pruned,
    Guided { model: &'a RouterModel, k: usize },
}

impl SearchMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            SearchMode::Exhaustive => "exhaustive",
            SearchMode::Pruned => "pruned",
            SearchMode::Guided { .. } => "guided",
        }
    }

    fn prunes(&self) -> bool {
        !matches!(self, SearchMode::Exhaustive)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestResult {
    pub task_id: TaskId,
    /// Correct paths in depth-first visit order.
    pub valid_paths: Vec<ExecutionPath>,
    pub best_path: Option<ExecutionPath>,
    pub nodes_expanded: usize,
    pub paths_evaluated: usize,
    pub full_space: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSummary {
    pub task_id: TaskId,
    pub valid_paths: usize,
    pub best_sequence: Option<Vec<AgentId>>,
    pub best_score: Option<crate::types::PathScore>,
    pub nodes_expanded: usize,
    pub paths_evaluated: usize,
    pub full_space: u64,
}

impl HarvestResult {
    pub fn summary(&self) -> HarvestSummary {
        HarvestSummary {
            task_id: self.task_id,
            valid_paths: self.valid_paths.len(),
            best_sequence: self.best_path.as_ref().map(|p| p.agent_sequence()),
            best_score: self.best_path.as_ref().map(|p| p.score),
            nodes_expanded: self.nodes_expanded,
            paths_evaluated: self.paths_evaluated,
            full_space: self.full_space,
        }
    }
}

struct TreeSearch<'a> {
    scenario: &'a Scenario,
    mode: SearchMode<'a>,
    seed: u64,
    rollout_calls: AtomicUsize,
    nodes_expanded: usize,
    valid_paths: Vec<ExecutionPath>,
}

impl TreeSearch<'_> {
    fn candidates(&self, state: &SystemState) -> Result<(Vec<AgentId>, Vec<AgentId>)> {
        let mut unused: Vec<AgentId> =
            self.scenario.task.agent_ids.iter().copied().filter(|&a| !state.has_executed(a)).collect();
        unused.sort();
        match &self.mode {
            SearchMode::Exhaustive | SearchMode::Pruned => Ok((unused, Vec::new())),
            SearchMode::Guided { model, k } => {
                let decision = score_agents(model, state)?;
                let mut chosen = top_k_agents(model, &decision, *k);
                chosen.sort();
                let skipped = unused.into_iter().filter(|a| !chosen.contains(a)).collect();
                Ok((chosen, skipped))
            }
        }
    }

    fn expand(&mut self, node: &mut PathTreeNode) -> Result<()> {
        let state = node.state.clone().expect("expanded nodes are evaluated");
        let (chosen, skipped) = self.candidates(&state)?;
        if chosen.is_empty() {
            return Ok(());
        }
        self.nodes_expanded += 1;
        for agent in chosen {
            let child_state = advance(self.scenario, &state, agent, self.seed)?;
            self.rollout_calls.fetch_add(1, Ordering::Relaxed);
            let path = ExecutionPath::from_steps(&self.scenario.task, child_state.history.clone())?;
            let mut prefix = node.prefix.clone();
            prefix.push(agent);
            let mut child =
                PathTreeNode { prefix, state: Some(child_state), status: NodeStatus::Unexplored, children: Vec::new() };
            let solved = path.is_correct();
            if solved {
                self.valid_paths.push(path);
                child.status = NodeStatus::Solved;
            }
            if !(solved && self.mode.prunes()) {
                self.expand(&mut child)?;
                if !solved {
                    child.status = NodeStatus::Exhausted;
                }
            }
            node.children.push(child);
        }
        for agent in skipped {
            let mut prefix = node.prefix.clone();
            prefix.push(agent);
            node.children.push(PathTreeNode { prefix, state: None, status: NodeStatus::Pruned, children: Vec::new() });
        }
        Ok(())
    }
}

/// Search tree plus the instrumented number of agent executions.
#[derive(Debug, Clone)]
pub struct SearchTrace {
    pub harvest: HarvestResult,
    pub tree: PathTreeNode,
    pub rollout_calls: usize,
}

pub fn search_with_tree(scenario: &Scenario, mode: SearchMode<'_>, seed: u64, cap: usize) -> Result<SearchTrace> {
    scenario.validate()?;
    let n = scenario.task.n_agents();
    if n > cap {
        return Err(Error::TooManyAgents { n, cap });
    }
    if let SearchMode::Guided { model, k } = &mode {
        if *k < 1 || *k > n {
            return Err(Error::InvalidConfig(format!("top-k must lie in 1..={n}, got {k}")));
        }
        model.check_task(scenario)?;
    }
    let mut search = TreeSearch {
        scenario,
        mode,
        seed,
        rollout_calls: AtomicUsize::new(0),
        nodes_expanded: 0,
        valid_paths: Vec::new(),
    };
    let mut root = PathTreeNode {
        prefix: Vec::new(),
        state: Some(scenario.root_state()),
        status: NodeStatus::Unexplored,
        children: Vec::new(),
    };
    search.expand(&mut root)?;
    root.status = NodeStatus::Exhausted;
    let best = best_path(&search.valid_paths).cloned();
    let harvest = HarvestResult {
        task_id: scenario.task.task_id,
        best_path: best,
        nodes_expanded: search.nodes_expanded,
        paths_evaluated: root.evaluated_count(),
        full_space: count_paths_u64(n).expect("capped populations fit in u64"),
        valid_paths: search.valid_paths,
    };
    Ok(SearchTrace { harvest, tree: root, rollout_calls: search.rollout_calls.into_inner() })
}

pub fn exhaustive_search(scenario: &Scenario, seed: u64) -> Result<HarvestResult> {
    search_with_tree(scenario, SearchMode::Exhaustive, seed, DEFAULT_SEARCH_CAP).map(|t| t.harvest)
}

pub fn pruned_search(scenario: &Scenario, seed: u64) -> Result<HarvestResult> {
    search_with_tree(scenario, SearchMode::Pruned, seed, DEFAULT_SEARCH_CAP).map(|t| t.harvest)
}

pub fn router_guided_search(scenario: &Scenario, model: &RouterModel, k: usize, seed: u64) -> Result<HarvestResult> {
    search_with_tree(scenario, SearchMode::Guided { model, k }, seed, DEFAULT_SEARCH_CAP).map(|t| t.harvest)
}

/// Searches every task in parallel; results stay in input order.
pub fn harvest_all(scenarios: &[Scenario], mode: &SearchMode<'_>, seed: u64, cap: usize) -> Result<Vec<HarvestResult>> {
    scenarios.par_iter().map(|s| search_with_tree(s, mode.clone(), seed, cap).map(|t| t.harvest)).collect()
}

pub fn examples_from_harvests(scenarios: &[Scenario], harvests: &[HarvestResult], w_alt: f64) -> Vec<TrainingExample> {
    scenarios.iter().zip(harvests).flat_map(|(s, h)| extract_examples(&h.valid_paths, &s.task, w_alt)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub bootstrap_fraction: f64,
    pub rounds: usize,
    pub k: usize,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Inference step budget for held-out evaluation; defaults to the agent count.
    pub max_steps: Option<usize>,
    /// Continue from the previous round's router instead of retraining from scratch.
    pub warm_start: bool,
    pub search_cap: usize,
    /// Used by the CLI to carve a held-out split when none is supplied.
    pub holdout_fraction: f64,
    pub cas: CasParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bootstrap_fraction: 0.2,
            rounds: 3,
            k: DEFAULT_TOP_K,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            max_steps: None,
            warm_start: false,
            search_cap: DEFAULT_SEARCH_CAP,
            holdout_fraction: 1.0 / 3.0,
            cas: CasParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bootstrap_fraction > 0.0 && self.bootstrap_fraction <= 1.0) {
            return Err(Error::InvalidConfig("bootstrap_fraction must lie in (0, 1]".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if !(self.holdout_fraction >= 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig("holdout_fraction must lie in [0, 1)".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub search_mode: String,
    pub tasks_searched: usize,
    pub new_examples: usize,
    pub cumulative_examples: usize,
    pub mean_paths_evaluated: f64,
    pub sampled_fraction: f64,
    pub final_train_loss: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub holdout_mean_tokens: Option<f64>,
    pub holdout_cas: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub full_space: u64,
    pub tasks_searched: usize,
    pub mean_paths_evaluated: f64,
    pub sampled_fraction: f64,
    pub rounds: Vec<RoundReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: RouterModel,
    pub report: PipelineReport,
    pub harvests: Vec<HarvestResult>,
    pub examples: Vec<TrainingExample>,
}

/// Splits `n` tasks into a bootstrap shard followed by `rounds - 1` even shards.
pub fn shard_bounds(n: usize, bootstrap_fraction: f64, rounds: usize) -> Vec<std::ops::Range<usize>> {
    let n_boot = ((bootstrap_fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
    let mut shards = Vec::with_capacity(rounds.max(1));
    shards.push(0..n_boot);
    let rest = n - n_boot;
    let guided_rounds = rounds.saturating_sub(1);
    for i in 0..guided_rounds {
        shards.push(n_boot + i * rest / guided_rounds..n_boot + (i + 1) * rest / guided_rounds);
    }
    shards
}

pub fn evolve_pipeline(
    tasks: &[Scenario],
    holdout: &[Scenario],
    env_seed: u64,
    config: &PipelineConfig,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let first = tasks.first().ok_or_else(|| Error::InvalidInput("pipeline needs at least one task".into()))?;
    let shards = shard_bounds(tasks.len(), config.bootstrap_fraction, config.rounds);
    if shards[0].is_empty() {
        return Err(Error::InvalidInput("bootstrap shard is empty".into()));
    }
    let n_agents = first.task.n_agents();
    let k = config.k.min(n_agents);
    let full_space = count_paths_u64(n_agents).unwrap_or(u64::MAX);
    let max_steps = config.max_steps.unwrap_or(n_agents);

    let fresh = RouterModel::for_scenario(first, &config.model)?;
    let mut model = fresh.clone();
    let mut examples: Vec<TrainingExample> = Vec::new();
    let mut harvests: Vec<HarvestResult> = Vec::new();
    let mut rounds = Vec::new();

    for (r, range) in shards.into_iter().enumerate() {
        let shard = &tasks[range];
        let mode = if r == 0 { SearchMode::Pruned } else { SearchMode::Guided { model: &model, k } };
        let search_mode = mode.name().to_string();
        let shard_harvests = harvest_all(shard, &mode, env_seed, config.search_cap)?;
        let new_examples = examples_from_harvests(shard, &shard_harvests, config.train.w_alt);
        let evaluated: usize = shard_harvests.iter().map(|h| h.paths_evaluated).sum();
        let mean_paths_evaluated = if shard.is_empty() { 0.0 } else { evaluated as f64 / shard.len() as f64 };

        let new_count = new_examples.len();
        examples.extend(new_examples);
        harvests.extend(shard_harvests);

        let start = if config.warm_start { &model } else { &fresh };
        let mut final_train_loss = None;
        if !examples.is_empty() {
            let outcome = train(start, &examples, &config.train)?;
            final_train_loss = outcome.loss_history.last().copied();
            model = outcome.model;
        }

        let (mut acc, mut tok, mut cas) = (None, None, None);
        if !holdout.is_empty() {
            let report = evaluate(&Method::Strmac { model: model.clone(), max_steps }, holdout, env_seed, config.cas)?;
            acc = Some(report.accuracy);
            tok = Some(report.mean_tokens);
            cas = Some(report.cas);
        }
        rounds.push(RoundReport {
            round: r + 1,
            search_mode,
            tasks_searched: shard.len(),
            new_examples: new_count,
            cumulative_examples: examples.len(),
            mean_paths_evaluated,
            sampled_fraction: mean_paths_evaluated / full_space as f64,
            final_train_loss,
            holdout_accuracy: acc,
            holdout_mean_tokens: tok,
            holdout_cas: cas,
        });
    }

    let total: usize = harvests.iter().map(|h| h.paths_evaluated).sum();
    let mean = total as f64 / harvests.len().max(1) as f64;
    let report = PipelineReport {
        full_space,
        tasks_searched: harvests.len(),
        mean_paths_evaluated: mean,
        sampled_fraction: mean / full_space as f64,
        rounds,
    };
    Ok(PipelineOutcome { model, report, harvests, examples })
}
