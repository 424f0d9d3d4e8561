//! Routing decisions and the inference loop.
//!
//! Every candidate action is scored by the cosine between the state embedding
//! and a fixed agent embedding. A trainable STOP embedding is scored the same
//! way so that the router can learn when to halt. STOP is masked on an empty
//! history, so every produced path has at least one step.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encode::{
    embed_agent, encode, feature_dim, featurize_state, AgentEmbedding, EncoderParams, DEFAULT_EMBED_DIM,
    DEFAULT_HIDDEN_DIM,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::simenv::{advance, Scenario};
use crate::types::{dot, l2_norm, normalized, Action, AgentId, AgentProfile, ExecutionPath, SystemState, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub temperature: f64,
    pub stop_enabled: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            temperature: 1.0,
            stop_enabled: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub encoder: EncoderParams,
    pub agent_ids: Vec<AgentId>,
    /// One unit-norm row per agent, in `agent_ids` order. Never trained.
    pub agent_embeddings: Vec<AgentEmbedding>,
    pub stop_embedding: Vec<f64>,
    pub temperature: f64,
    /// When false, STOP is never offered and is left out of the loss.
    pub stop_enabled: bool,
    pub query_dim: usize,
    pub n_classes: usize,
}

impl RouterModel {
    pub fn new(agents: &[AgentProfile], n_classes: usize, config: &ModelConfig) -> Result<Self> {
        let first = agents.first().ok_or_else(|| Error::InvalidInput("router needs at least one agent".into()))?;
        let query_dim = first.expertise_vector.len();
        if config.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be >= 1".into()));
        }
        if !(config.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let agent_embeddings =
            agents.iter().map(|p| embed_agent(p, config.embed_dim, config.seed)).collect::<Result<Vec<_>>>()?;
        let input_dim = feature_dim(query_dim, agents.len(), n_classes);
        let encoder = EncoderParams::init(input_dim, config.hidden_dim, config.embed_dim, config.seed);
        let mut r = rng::stream(config.seed, &[rng::PURPOSE_INIT, 1]);
        let stop: Vec<f64> = (0..config.embed_dim).map(|_| r.sample(StandardNormal)).collect();
        Ok(Self {
            encoder,
            agent_ids: agents.iter().map(|a| a.agent_id).collect(),
            agent_embeddings,
            stop_embedding: normalized(&stop),
            temperature: config.temperature,
            stop_enabled: config.stop_enabled,
            query_dim,
            n_classes,
        })
    }

    pub fn for_scenario(scenario: &Scenario, config: &ModelConfig) -> Result<Self> {
        Self::new(&scenario.agents, scenario.task.n_classes, config)
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    /// Index of STOP in score and probability vectors.
    pub fn stop_index(&self) -> usize {
        self.n_agents()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let d = self.encoder.output_dim;
        if self.agent_embeddings.len() != self.agent_ids.len() {
            return Err(Error::Shape("one embedding per agent required".into()));
        }
        for e in &self.agent_embeddings {
            if e.0.len() != d {
                return Err(Error::Shape(format!("agent embedding dim {} != {d}", e.0.len())));
            }
            if (l2_norm(&e.0) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput("agent embeddings must be unit norm".into()));
            }
        }
        if self.stop_embedding.len() != d {
            return Err(Error::Shape("stop embedding dim mismatch".into()));
        }
        if self.encoder.input_dim != feature_dim(self.query_dim, self.n_agents(), self.n_classes) {
            return Err(Error::Shape("encoder input dim does not match (query, agents, classes)".into()));
        }
        Ok(())
    }

    /// Checks that a task uses the same agents and dimensions this model was built for.
    pub fn check_task(&self, scenario: &Scenario) -> Result<()> {
        let t = &scenario.task;
        if t.agent_ids != self.agent_ids || t.feature_dim() != self.query_dim || t.n_classes != self.n_classes {
            return Err(Error::Shape(format!("task {} does not match the router's agents or dimensions", t.task_id)));
        }
        Ok(())
    }

    pub fn index_of(&self, action: Action) -> Option<usize> {
        match action {
            Action::Stop => Some(self.stop_index()),
            Action::Agent(id) => self.agent_ids.iter().position(|&a| a == id),
        }
    }

    pub fn action_at(&self, index: usize) -> Action {
        if index == self.stop_index() {
            Action::Stop
        } else {
            Action::Agent(self.agent_ids[index])
        }
    }

    /// Cosine scores of a unit state embedding against every agent, then STOP.
    pub fn scores_for(&self, z: &[f64]) -> Vec<f64> {
        let stop_norm = l2_norm(&self.stop_embedding);
        let mut scores: Vec<f64> = self.agent_embeddings.iter().map(|e| dot(z, &e.0)).collect();
        scores.push(dot(z, &self.stop_embedding) / stop_norm);
        scores
    }

    pub fn embed_state(&self, state: &SystemState) -> Result<Vec<f64>> {
        encode(&self.encoder, &featurize_state(state))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Agents in model order, STOP last.
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub masked: Vec<bool>,
    pub chosen: Action,
}

/// Softmax of `scores / temperature` over unmasked entries; masked entries get exactly 0.
pub fn masked_softmax(scores: &[f64], masked: &[bool], temperature: f64) -> Vec<f64> {
    let max =
        scores.iter().zip(masked).filter(|(_, &m)| !m).map(|(s, _)| s / temperature).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> =
        scores.iter().zip(masked).map(|(s, &m)| if m { 0.0 } else { (s / temperature - max).exp() }).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Highest unmasked score; ties go to the lowest index, so STOP (last) loses every tie.
pub fn argmax_unmasked(scores: &[f64], masked: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&s, &m)) in scores.iter().zip(masked).enumerate() {
        if m {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn action_mask(model: &RouterModel, state: &SystemState) -> Vec<bool> {
    let mut masked: Vec<bool> = model.agent_ids.iter().map(|&a| state.has_executed(a)).collect();
    masked.push(!model.stop_enabled || state.history.is_empty());
    masked
}

pub fn score_agents(model: &RouterModel, state: &SystemState) -> Result<RoutingDecision> {
    let z = model.embed_state(state)?;
    let scores = model.scores_for(&z);
    let masked = action_mask(model, state);
    let chosen = argmax_unmasked(&scores, &masked).ok_or(Error::NoAction)?;
    let probabilities = masked_softmax(&scores, &masked, model.temperature);
    Ok(RoutingDecision { scores, probabilities, masked, chosen: model.action_at(chosen) })
}

/// The `k` unmasked agents (never STOP) the router ranks highest, ties to the lowest index.
pub fn top_k_agents(model: &RouterModel, decision: &RoutingDecision, k: usize) -> Vec<AgentId> {
    let mut idx: Vec<usize> = (0..model.n_agents()).filter(|&i| !decision.masked[i]).collect();
    idx.sort_by(|&a, &b| decision.scores[b].total_cmp(&decision.scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| model.agent_ids[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub task_id: TaskId,
    pub step: usize,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub chosen: Action,
    pub masked: Vec<bool>,
    /// Set when the learned STOP pseudo-action ended the episode.
    pub stop_extension: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub path: ExecutionPath,
    pub trace: Vec<TraceRecord>,
}

pub fn run_inference(model: &RouterModel, scenario: &Scenario, max_steps: usize, seed: u64) -> Result<Inference> {
    if max_steps == 0 {
        return Err(Error::InvalidConfig("max_steps must be >= 1".into()));
    }
    model.check_task(scenario)?;
    let mut state = SystemState::new(Arc::clone(&scenario.task));
    let mut trace = Vec::new();
    loop {
        if state.history.len() >= max_steps || state.history.len() == model.n_agents() {
            break;
        }
        let decision = score_agents(model, &state)?;
        let chosen = decision.chosen;
        trace.push(TraceRecord {
            task_id: scenario.task.task_id,
            step: state.history.len(),
            scores: decision.scores,
            probabilities: decision.probabilities,
            chosen,
            masked: decision.masked,
            stop_extension: chosen == Action::Stop,
        });
        match chosen {
            Action::Stop => break,
            Action::Agent(id) => state = advance(scenario, &state, id, seed)?,
        }
    }
    let path = ExecutionPath::from_steps(&scenario.task, state.history)?;
    Ok(Inference { path, trace })
}
