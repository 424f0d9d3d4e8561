use thiserror::Error;

use crate::types::AgentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("agent {0} has already executed in this state")]
    RepeatedAgent(AgentId),

    #[error("agent {0} is not available for this task")]
    UnknownAgent(AgentId),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding: pre-normalization norm {0:e} below 1e-12")]
    DegenerateEmbedding(f64),

    #[error("no legal action: every agent and STOP is masked")]
    NoAction,

    #[error("{n} agents exceeds the search cap of {cap}")]
    TooManyAgents { n: usize, cap: usize },

    #[error("training requires at least one example")]
    EmptyExamples,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad user input or configuration rather than by a fault in the engine.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::DegenerateEmbedding(_))
    }
}
