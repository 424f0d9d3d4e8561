//! Domain types shared across the engine.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariants of query and expertise vectors.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type TaskId = u64;

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    v.iter().map(|x| x / n).collect()
}

fn check_unit(what: &str, v: &[f64]) -> Result<()> {
    let n = l2_norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidInput(format!("{what} must be unit norm, got {n}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: TaskId,
    pub query_features: Vec<f64>,
    pub label: usize,
    pub n_classes: usize,
    pub agent_ids: Vec<AgentId>,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<()> {
        if self.query_features.is_empty() {
            return Err(Error::InvalidInput(format!("task {}: empty query features", self.task_id)));
        }
        check_unit("query_features", &self.query_features)?;
        if self.n_classes < 2 {
            return Err(Error::InvalidInput(format!("task {}: need at least 2 classes", self.task_id)));
        }
        if self.label >= self.n_classes {
            return Err(Error::InvalidInput(format!(
                "task {}: label {} outside 0..{}",
                self.task_id, self.label, self.n_classes
            )));
        }
        if self.agent_ids.is_empty() {
            return Err(Error::InvalidInput(format!("task {}: no agents", self.task_id)));
        }
        let distinct: HashSet<_> = self.agent_ids.iter().collect();
        if distinct.len() != self.agent_ids.len() {
            return Err(Error::InvalidInput(format!("task {}: duplicate agent ids", self.task_id)));
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.query_features.len()
    }

    /// Position of `id` in `agent_ids`, which is also its row in the router's embedding matrix.
    pub fn agent_index(&self, id: AgentId) -> Option<usize> {
        self.agent_ids.iter().position(|&a| a == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub expertise_vector: Vec<f64>,
    pub base_token_cost: u64,
    pub per_history_token_cost: u64,
    pub distractor_flag: bool,
}

impl AgentProfile {
    pub fn validate(&self) -> Result<()> {
        check_unit("expertise_vector", &self.expertise_vector)?;
        if self.base_token_cost < 1 {
            return Err(Error::InvalidInput(format!("agent {}: base_token_cost must be >= 1", self.agent_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub agent_id: AgentId,
    pub answer: usize,
    #[serde(rename = "tokens")]
    pub tokens_consumed: u64,
}

/// The query plus the ordered history of agent responses so far.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub task: Arc<TaskInstance>,
    pub history: Vec<StepRecord>,
}

impl SystemState {
    pub fn new(task: Arc<TaskInstance>) -> Self {
        Self { task, history: Vec::new() }
    }

    pub fn with_history(task: Arc<TaskInstance>, history: Vec<StepRecord>) -> Result<Self> {
        let mut state = Self::new(task);
        for step in history {
            state.push(step)?;
        }
        Ok(state)
    }

    pub fn has_executed(&self, id: AgentId) -> bool {
        self.history.iter().any(|s| s.agent_id == id)
    }

    pub fn push(&mut self, step: StepRecord) -> Result<()> {
        if self.task.agent_index(step.agent_id).is_none() {
            return Err(Error::UnknownAgent(step.agent_id));
        }
        if self.has_executed(step.agent_id) {
            return Err(Error::RepeatedAgent(step.agent_id));
        }
        if step.tokens_consumed < 1 {
            return Err(Error::InvalidInput("step must consume at least one token".into()));
        }
        self.history.push(step);
        Ok(())
    }

    pub fn agent_sequence(&self) -> Vec<AgentId> {
        self.history.iter().map(|s| s.agent_id).collect()
    }
}

/// Path score: `-total_tokens` for a correct path, otherwise the `NegInf` sentinel.
///
/// Variant order makes the derived `Ord` rank `NegInf` below every finite score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PathScore {
    NegInf,
    Finite(i64),
}

impl PathScore {
    pub fn is_finite(&self) -> bool {
        matches!(self, PathScore::Finite(_))
    }
}

impl fmt::Display for PathScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathScore::NegInf => f.write_str("neg_inf"),
            PathScore::Finite(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for PathScore {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PathScore::NegInf => s.serialize_str("neg_inf"),
            PathScore::Finite(v) => s.serialize_i64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for PathScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ScoreVisitor;
        impl Visitor<'_> for ScoreVisitor {
            type Value = PathScore;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an integer score or \"neg_inf\"")
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<PathScore, E> {
                Ok(PathScore::Finite(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<PathScore, E> {
                i64::try_from(v).map(PathScore::Finite).map_err(E::custom)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<PathScore, E> {
                match v {
                    "neg_inf" => Ok(PathScore::NegInf),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }
        d.deserialize_any(ScoreVisitor)
    }
}

/// A routing action: run an agent, or halt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Agent(AgentId),
    Stop,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Agent(id) => write!(f, "{id}"),
            Action::Stop => f.write_str("stop"),
        }
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Action::Agent(id) => s.serialize_u32(id.0),
            Action::Stop => s.serialize_str("stop"),
        }
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ActionVisitor;
        impl Visitor<'_> for ActionVisitor {
            type Value = Action;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an agent id or \"stop\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Action, E> {
                u32::try_from(v).map(|v| Action::Agent(AgentId(v))).map_err(E::custom)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Action, E> {
                u32::try_from(v).map(|v| Action::Agent(AgentId(v))).map_err(E::custom)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Action, E> {
                match v {
                    "stop" => Ok(Action::Stop),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }
        d.deserialize_any(ActionVisitor)
    }
}

/// A complete, repetition-free sequence of agent invocations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPath {
    pub task_id: TaskId,
    pub steps: Vec<StepRecord>,
    pub prediction: usize,
    pub total_tokens: u64,
    pub score: PathScore,
}

impl ExecutionPath {
    /// Assembles a path from executed steps. The prediction is the last step's answer.
    pub fn from_steps(task: &TaskInstance, steps: Vec<StepRecord>) -> Result<Self> {
        let last =
            steps.last().ok_or_else(|| Error::InvalidInput("execution path must have at least one step".into()))?;
        let mut seen = HashSet::new();
        for s in &steps {
            if !seen.insert(s.agent_id) {
                return Err(Error::RepeatedAgent(s.agent_id));
            }
        }
        let prediction = last.answer;
        let total_tokens = steps.iter().map(|s| s.tokens_consumed).sum();
        let mut path = Self { task_id: task.task_id, steps, prediction, total_tokens, score: PathScore::NegInf };
        path.score = crate::paths::score_path(&path, task.label);
        Ok(path)
    }

    pub fn agent_sequence(&self) -> Vec<AgentId> {
        self.steps.iter().map(|s| s.agent_id).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_correct(&self) -> bool {
        self.score.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskInstance {
        TaskInstance {
            task_id: 3,
            query_features: vec![0.6, 0.8],
            label: 1,
            n_classes: 3,
            agent_ids: vec![AgentId(0), AgentId(1), AgentId(2)],
        }
    }

    #[test]
    fn score_serializes_sentinel_as_string() {
        assert_eq!(serde_json::to_string(&PathScore::NegInf).unwrap(), "\"neg_inf\"");
        assert_eq!(serde_json::to_string(&PathScore::Finite(-42)).unwrap(), "-42");
        let back: PathScore = serde_json::from_str("\"neg_inf\"").unwrap();
        assert_eq!(back, PathScore::NegInf);
        assert!(serde_json::from_str::<PathScore>("\"inf\"").is_err());
        assert!(PathScore::NegInf < PathScore::Finite(i64::MIN));
    }

    #[test]
    fn action_json_shape() {
        assert_eq!(serde_json::to_string(&Action::Stop).unwrap(), "\"stop\"");
        assert_eq!(serde_json::to_string(&Action::Agent(AgentId(4))).unwrap(), "4");
        let a: Action = serde_json::from_str("2").unwrap();
        assert_eq!(a, Action::Agent(AgentId(2)));
    }

    #[test]
    fn path_json_layout() {
        let steps = vec![StepRecord { agent_id: AgentId(2), answer: 0, tokens_consumed: 10 }];
        let path = ExecutionPath::from_steps(&task(), steps).unwrap();
        let json = serde_json::to_value(&path).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "task_id": 3,
                "steps": [{"agent_id": 2, "answer": 0, "tokens": 10}],
                "prediction": 0,
                "total_tokens": 10,
                "score": "neg_inf"
            })
        );
    }

    #[test]
    fn state_rejects_repeats_and_unknown_agents() {
        let mut s = SystemState::new(Arc::new(task()));
        s.push(StepRecord { agent_id: AgentId(1), answer: 0, tokens_consumed: 1 }).unwrap();
        assert!(matches!(
            s.push(StepRecord { agent_id: AgentId(1), answer: 0, tokens_consumed: 1 }),
            Err(Error::RepeatedAgent(_))
        ));
        assert!(matches!(
            s.push(StepRecord { agent_id: AgentId(9), answer: 0, tokens_consumed: 1 }),
            Err(Error::UnknownAgent(_))
        ));
    }

    #[test]
    fn path_rejects_empty_and_repeats() {
        assert!(ExecutionPath::from_steps(&task(), vec![]).is_err());
        let step = StepRecord { agent_id: AgentId(0), answer: 1, tokens_consumed: 3 };
        assert!(ExecutionPath::from_steps(&task(), vec![step.clone(), step]).is_err());
    }

    #[test]
    fn task_validation() {
        assert!(task().validate().is_ok());
        let mut t = task();
        t.label = 3;
        assert!(t.validate().is_err());
        let mut t = task();
        t.query_features = vec![1.0, 1.0];
        assert!(t.validate().is_err());
        let mut t = task();
        t.agent_ids.push(AgentId(0));
        assert!(t.validate().is_err());
    }
}
