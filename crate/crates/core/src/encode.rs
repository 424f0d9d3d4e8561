//! State featurization, fixed agent embeddings and the trainable state encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{l2_norm, AgentProfile, SystemState};

/// Pre-normalization norms below this are rejected as degenerate.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;
pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN_DIM: usize = 32;

/// `[query ‖ per-agent (executed, position, answer one-hot)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures(pub Vec<f64>);

pub fn feature_dim(query_dim: usize, n_agents: usize, n_classes: usize) -> usize {
    query_dim + n_agents * (2 + n_classes)
}

pub fn featurize_state(state: &SystemState) -> StateFeatures {
    let task = &state.task;
    let n = task.n_agents();
    let c = task.n_classes;
    let f = task.feature_dim();
    let block = 2 + c;
    let mut x = vec![0.0; feature_dim(f, n, c)];
    x[..f].copy_from_slice(&task.query_features);
    for (step_idx, step) in state.history.iter().enumerate() {
        // SystemState::push guarantees membership.
        let i = task.agent_index(step.agent_id).expect("history agent belongs to task");
        let base = f + i * block;
        x[base] = 1.0;
        x[base + 1] = (step_idx + 1) as f64 / n as f64;
        if step.answer < c {
            x[base + 2 + step.answer] = 1.0;
        }
    }
    StateFeatures(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentEmbedding(pub Vec<f64>);

/// Expertise in the leading coordinates, a small seeded per-agent pad in the rest.
pub fn embed_agent(profile: &AgentProfile, dim: usize, seed: u64) -> Result<AgentEmbedding> {
    let f = profile.expertise_vector.len();
    if dim < f {
        return Err(Error::InvalidConfig(format!("embedding dim {dim} is smaller than feature dim {f}")));
    }
    if dim == f {
        return Ok(AgentEmbedding(profile.expertise_vector.clone()));
    }
    let mut r = rng::stream(seed, &[rng::PURPOSE_EMBED_PAD, profile.agent_id.0 as u64]);
    let mut v = profile.expertise_vector.clone();
    v.extend((f..dim).map(|_| 0.01 * r.random_range(-1.0..=1.0)));
    let n = l2_norm(&v);
    if n < MIN_EMBEDDING_NORM {
        return Err(Error::DegenerateEmbedding(n));
    }
    Ok(AgentEmbedding(v.into_iter().map(|x| x / n).collect()))
}

/// Two-layer tanh perceptron. Weights are row-major: `w1` is hidden x input, `w2` is output x hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Seed the weights were initialized from.
    pub seed: u64,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub hidden: Vec<f64>,
    pub pre_norm: Vec<f64>,
    pub norm: f64,
    pub z: Vec<f64>,
}

/// Gradient with the same layout as `EncoderParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(p: &EncoderParams) -> Self {
        Self {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
        }
    }
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::PURPOSE_INIT]);
        let mut glorot = |fan_in: usize, fan_out: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out).map(|_| r.random_range(-limit..=limit)).collect()
        };
        let w1 = glorot(input_dim, hidden_dim);
        let w2 = glorot(hidden_dim, output_dim);
        Self { input_dim, hidden_dim, output_dim, w1, b1: vec![0.0; hidden_dim], w2, b2: vec![0.0; output_dim], seed }
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h, d) = (self.input_dim, self.hidden_dim, self.output_dim);
        if self.w1.len() != h * i || self.b1.len() != h || self.w2.len() != d * h || self.b2.len() != d {
            return Err(Error::Shape(format!("encoder arrays inconsistent with dims ({i}, {h}, {d})")));
        }
        let all = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("encoder parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!("encoder expects {} features, got {}", self.input_dim, x.len())));
        }
        let hidden: Vec<f64> = self
            .w1
            .chunks_exact(self.input_dim)
            .zip(&self.b1)
            .map(|(row, b)| (crate::types::dot(row, x) + b).tanh())
            .collect();
        let pre_norm: Vec<f64> = self
            .w2
            .chunks_exact(self.hidden_dim)
            .zip(&self.b2)
            .map(|(row, b)| crate::types::dot(row, &hidden) + b)
            .collect();
        let norm = l2_norm(&pre_norm);
        if !(norm >= MIN_EMBEDDING_NORM) {
            return Err(Error::DegenerateEmbedding(norm));
        }
        let z = pre_norm.iter().map(|u| u / norm).collect();
        Ok(ForwardPass { hidden, pre_norm, norm, z })
    }

    /// Backpropagates `dz` (gradient w.r.t. the unit-normalized output) into `grads`.
    pub fn backward(&self, x: &[f64], pass: &ForwardPass, dz: &[f64], grads: &mut EncoderGrads) {
        // d/du of u/|u| is (I - z z^T) / |u|.
        let z_dot = crate::types::dot(&pass.z, dz);
        let du: Vec<f64> = dz.iter().zip(&pass.z).map(|(g, z)| (g - z * z_dot) / pass.norm).collect();

        let h = self.hidden_dim;
        let mut dhidden = vec![0.0; h];
        for (k, &g) in du.iter().enumerate() {
            grads.b2[k] += g;
            let row = &self.w2[k * h..(k + 1) * h];
            let grow = &mut grads.w2[k * h..(k + 1) * h];
            for j in 0..h {
                grow[j] += g * pass.hidden[j];
                dhidden[j] += g * row[j];
            }
        }
        let n_in = self.input_dim;
        for (j, (dh, hj)) in dhidden.iter().zip(&pass.hidden).enumerate() {
            let da = dh * (1.0 - hj * hj);
            grads.b1[j] += da;
            for (gw, xi) in grads.w1[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                *gw += da * xi;
            }
        }
    }
}

/// Unit-normalized state embedding.
pub fn encode(params: &EncoderParams, features: &StateFeatures) -> Result<Vec<f64>> {
    params.forward(&features.0).map(|p| p.z)
}
