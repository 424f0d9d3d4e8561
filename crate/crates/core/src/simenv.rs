//! Deterministic synthetic environment.
//!
//! Each agent holds an expertise vector. An agent's relevance to a task is
//! `max(0, <expertise, query>)`; distractors contribute that relevance negatively.
//! Once the running evidence of every agent executed so far reaches the
//! threshold, the acting agent answers the label. Otherwise it answers a wrong
//! class derived by hashing the executed sequence.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{dot, l2_norm, AgentId, AgentProfile, ExecutionPath, StepRecord, SystemState, TaskId, TaskInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub evidence_threshold: f64,
    pub distractor_fraction: f64,
    pub token_cost_range: (u64, u64),
    pub history_token_cost_range: (u64, u64),
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_agents: 5,
            feature_dim: 8,
            n_classes: 4,
            evidence_threshold: 0.5,
            distractor_fraction: 0.2,
            token_cost_range: (60, 180),
            history_token_cost_range: (10, 40),
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_agents == 0 {
            return bad("n_agents must be >= 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if !(self.evidence_threshold > 0.0 && self.evidence_threshold <= 1.0) {
            return bad("evidence_threshold must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return bad("distractor_fraction must lie in [0, 1]");
        }
        let (lo, hi) = self.token_cost_range;
        if lo < 1 || lo > hi {
            return bad("token_cost_range must satisfy 1 <= min <= max");
        }
        let (lo, hi) = self.history_token_cost_range;
        if lo > hi {
            return bad("history_token_cost_range must satisfy min <= max");
        }
        Ok(())
    }
}

/// One dataset line: a task together with the agents that may act on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub task: Arc<TaskInstance>,
    pub agents: Vec<AgentProfile>,
    pub evidence_threshold: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.agents.len() != self.task.n_agents() {
            return Err(Error::InvalidInput(format!(
                "task {}: {} profiles for {} agents",
                self.task.task_id,
                self.agents.len(),
                self.task.n_agents()
            )));
        }
        for (id, profile) in self.task.agent_ids.iter().zip(&self.agents) {
            profile.validate()?;
            if profile.agent_id != *id {
                return Err(Error::InvalidInput(format!(
                    "task {}: profile order does not match agent_ids",
                    self.task.task_id
                )));
            }
            if profile.expertise_vector.len() != self.task.feature_dim() {
                return Err(Error::Shape(format!(
                    "agent {} expertise has dim {}, task has {}",
                    id,
                    profile.expertise_vector.len(),
                    self.task.feature_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn profile(&self, id: AgentId) -> Result<&AgentProfile> {
        self.task.agent_index(id).map(|i| &self.agents[i]).ok_or(Error::UnknownAgent(id))
    }

    pub fn root_state(&self) -> SystemState {
        SystemState::new(Arc::clone(&self.task))
    }

    /// Signed relevance of one agent to this task's query.
    pub fn relevance(&self, profile: &AgentProfile) -> f64 {
        let r = dot(&profile.expertise_vector, &self.task.query_features).max(0.0);
        if profile.distractor_flag {
            -r
        } else {
            r
        }
    }

    pub fn evidence<I: IntoIterator<Item = AgentId>>(&self, agents: I) -> Result<f64> {
        agents.into_iter().map(|id| self.profile(id).map(|p| self.relevance(p))).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub answer: usize,
    pub tokens_consumed: u64,
}

fn unit_normal_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2_norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// The agent population shared by every task generated from `config`.
pub fn generate_population(config: &EnvConfig) -> Result<Vec<AgentProfile>> {
    config.validate()?;
    let mut agents: Vec<AgentProfile> = (0..config.n_agents)
        .map(|i| {
            let mut r = rng::stream(config.seed, &[rng::PURPOSE_AGENT, i as u64]);
            let expertise_vector = unit_normal_vector(&mut r, config.feature_dim);
            let (lo, hi) = config.token_cost_range;
            let base_token_cost = r.random_range(lo..=hi);
            let (lo, hi) = config.history_token_cost_range;
            let per_history_token_cost = r.random_range(lo..=hi);
            AgentProfile {
                agent_id: AgentId(i as u32),
                expertise_vector,
                base_token_cost,
                per_history_token_cost,
                distractor_flag: false,
            }
        })
        .collect();

    let n_distractors = (config.distractor_fraction * config.n_agents as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.n_agents).collect();
    order.shuffle(&mut rng::stream(config.seed, &[rng::PURPOSE_DISTRACTOR]));
    for &i in order.iter().take(n_distractors) {
        agents[i].distractor_flag = true;
    }
    Ok(agents)
}

/// Generates `n_tasks` scenarios with task ids `0..n_tasks`.
pub fn generate_tasks(config: &EnvConfig, n_tasks: usize) -> Result<Vec<Scenario>> {
    let agents = generate_population(config)?;
    let agent_ids: Vec<AgentId> = agents.iter().map(|a| a.agent_id).collect();
    Ok((0..n_tasks as TaskId)
        .map(|task_id| {
            let mut qr = rng::stream(config.seed, &[rng::PURPOSE_QUERY, task_id]);
            let query_features = unit_normal_vector(&mut qr, config.feature_dim);
            let label = rng::stream(config.seed, &[rng::PURPOSE_LABEL, task_id]).random_range(0..config.n_classes);
            Scenario {
                task: Arc::new(TaskInstance {
                    task_id,
                    query_features,
                    label,
                    n_classes: config.n_classes,
                    agent_ids: agent_ids.clone(),
                }),
                agents: agents.clone(),
                evidence_threshold: config.evidence_threshold,
            }
        })
        .collect())
}

fn wrong_answer(seed: u64, task: &TaskInstance, sequence: &[AgentId]) -> usize {
    let mut keys = vec![rng::PURPOSE_WRONG_ANSWER, task.task_id];
    keys.extend(sequence.iter().map(|a| a.0 as u64));
    let k = (rng::derive_seed(seed, &keys) % (task.n_classes as u64 - 1)) as usize;
    if k >= task.label {
        k + 1
    } else {
        k
    }
}

/// Simulates `agent` acting on `state`.
pub fn run_agent(scenario: &Scenario, agent: AgentId, state: &SystemState, seed: u64) -> Result<SimOutcome> {
    let profile = scenario.profile(agent)?;
    if state.has_executed(agent) {
        return Err(Error::RepeatedAgent(agent));
    }
    let mut sequence = state.agent_sequence();
    sequence.push(agent);
    let evidence = scenario.evidence(sequence.iter().copied())?;
    let task = &scenario.task;
    let answer = if evidence >= scenario.evidence_threshold { task.label } else { wrong_answer(seed, task, &sequence) };
    let tokens_consumed = profile.base_token_cost + profile.per_history_token_cost * state.history.len() as u64;
    Ok(SimOutcome { answer, tokens_consumed })
}

/// Runs `agent` and returns the successor state.
pub fn advance(scenario: &Scenario, state: &SystemState, agent: AgentId, seed: u64) -> Result<SystemState> {
    let outcome = run_agent(scenario, agent, state, seed)?;
    let mut next = state.clone();
    next.push(StepRecord { agent_id: agent, answer: outcome.answer, tokens_consumed: outcome.tokens_consumed })?;
    Ok(next)
}

pub fn rollout(scenario: &Scenario, sequence: &[AgentId], seed: u64) -> Result<ExecutionPath> {
    let mut state = scenario.root_state();
    for &agent in sequence {
        state = advance(scenario, &state, agent, seed)?;
    }
    ExecutionPath::from_steps(&scenario.task, state.history)
}


#[cfg(test)]
mod tests {
    use super::fixtures::scenario;
    use super::*;

    fn ids(v: &[u32]) -> Vec<AgentId> {
        v.iter().map(|&i| AgentId(i)).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig { seed: 7, ..EnvConfig::default() };
        let a = serde_json::to_string(&generate_tasks(&cfg, 3).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_tasks(&cfg, 3).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = serde_json::to_string(&generate_tasks(&EnvConfig { seed: 8, ..cfg }, 3).unwrap()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn generation_shapes_and_invariants() {
        let cfg = EnvConfig::default();
        let tasks = generate_tasks(&cfg, 100).unwrap();
        assert_eq!(tasks.len(), 100);
        for s in &tasks {
            s.validate().unwrap();
            assert_eq!(s.agents.len(), cfg.n_agents);
            assert_eq!(s.agents.iter().filter(|a| a.distractor_flag).count(), 1);
        }
        let none = generate_tasks(&EnvConfig { distractor_fraction: 0.0, ..cfg }, 20).unwrap();
        assert!(none.iter().flat_map(|s| &s.agents).all(|a| !a.distractor_flag));
    }

    #[test]
    fn generation_rejects_bad_config() {
        assert!(generate_tasks(&EnvConfig { n_agents: 0, ..EnvConfig::default() }, 1).is_err());
        assert!(generate_tasks(&EnvConfig { feature_dim: 0, ..EnvConfig::default() }, 1).is_err());
        assert!(generate_tasks(&EnvConfig { token_cost_range: (5, 2), ..EnvConfig::default() }, 1).is_err());
    }

    #[test]
    fn aligned_agent_answers_label() {
        let s = scenario(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[false, false], &[10, 10], 1.0);
        let out = run_agent(&s, AgentId(0), &s.root_state(), 3).unwrap();
        assert_eq!(out.answer, s.task.label);
        assert_eq!(out.tokens_consumed, 10);
        let orth = run_agent(&s, AgentId(1), &s.root_state(), 3).unwrap();
        assert_ne!(orth.answer, s.task.label);
        assert!(orth.answer < s.task.n_classes);
        assert_eq!(orth, run_agent(&s, AgentId(1), &s.root_state(), 3).unwrap());
    }

    #[test]
    fn repeated_agent_is_rejected() {
        let s = scenario(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[false, false], &[10, 10], 0.5);
        let st = advance(&s, &s.root_state(), AgentId(1), 0).unwrap();
        assert!(matches!(run_agent(&s, AgentId(1), &st, 0), Err(Error::RepeatedAgent(_))));
    }

    #[test]
    fn rollout_examples() {
        // Agent 0 clears the threshold alone; agents 1 and 2 are aligned distractors.
        let s = scenario(&[vec![0.9, 0.1], vec![1.0, 0.2], vec![0.7, 0.7]], &[false, true, true], &[40, 20, 30], 0.6);
        let p = rollout(&s, &ids(&[0]), 1).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.is_correct());
        let d = rollout(&s, &ids(&[1, 2]), 1).unwrap();
        assert!(!d.is_correct());
        let long = rollout(&s, &ids(&[2, 0, 1]), 1).unwrap();
        assert_eq!(long.total_tokens, long.steps.iter().map(|s| s.tokens_consumed).sum::<u64>());
        // 30 + (40 + 5) + (20 + 10)
        assert_eq!(long.total_tokens, 105);
    }

    fn all_sequences(n: u32) -> Vec<Vec<AgentId>> {
        fn rec(n: u32, cur: &mut Vec<AgentId>, out: &mut Vec<Vec<AgentId>>) {
            for a in 0..n {
                if cur.contains(&AgentId(a)) {
                    continue;
                }
                cur.push(AgentId(a));
                out.push(cur.clone());
                rec(n, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(n, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn evidence_is_monotone_and_tokens_superadditive() {
        for seed in 0..25 {
            let cfg = EnvConfig { n_agents: 5, seed, distractor_fraction: 0.4, ..EnvConfig::default() };
            for s in generate_tasks(&cfg, 4).unwrap() {
                for seq in all_sequences(5) {
                    let path = rollout(&s, &seq, seed).unwrap();
                    for cut in 1..seq.len() {
                        let prefix = rollout(&s, &seq[..cut], seed).unwrap();
                        assert!(path.total_tokens > prefix.total_tokens);
                        let extension_clean = seq[cut..].iter().all(|&a| !s.profile(a).unwrap().distractor_flag);
                        if prefix.is_correct() && extension_clean {
                            assert!(path.is_correct(), "seq {seq:?} cut {cut}");
                        }
                    }
                }
            }
        }
    }
}
