//! Contrastive router training.
//!
//! Per decision step the loss is the softmax cross-entropy of the target action
//! against every agent (executed ones included) and STOP, on cosine logits
//! divided by the router temperature. Gradients are derived by hand; the
//! agent embeddings are frozen and receive none.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{featurize_state, EncoderGrads};
use crate::error::{Error, Result};
use crate::paths::{best_path, canonical_path_order};
use crate::rng;
use crate::route::{action_mask, argmax_unmasked, ModelConfig, RouterModel};
use crate::simenv::{advance, generate_tasks, EnvConfig};
use crate::types::{dot, l2_norm, Action, AgentId, ExecutionPath, StepRecord, SystemState, TaskId, TaskInstance};

pub const DEFAULT_W_ALT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub state: SystemState,
    pub target: Action,
    pub weight: f64,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0) {
            return Err(Error::InvalidInput("example weight must be positive".into()));
        }
        match self.target {
            Action::Stop if self.state.history.is_empty() => {
                Err(Error::InvalidInput("STOP target requires a nonempty history".into()))
            }
            Action::Agent(id) if self.state.has_executed(id) => Err(Error::RepeatedAgent(id)),
            Action::Agent(id) if self.state.task.agent_index(id).is_none() => Err(Error::UnknownAgent(id)),
            _ => Ok(()),
        }
    }

    pub fn to_record(&self) -> ExampleRecord {
        ExampleRecord {
            task_id: self.state.task.task_id,
            history: self.state.history.clone(),
            target: self.target,
            weight: self.weight,
        }
    }
}

/// JSON Lines form of a training example; the task is referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub task_id: TaskId,
    pub history: Vec<StepRecord>,
    pub target: Action,
    pub weight: f64,
}

impl ExampleRecord {
    pub fn resolve(&self, task: Arc<TaskInstance>) -> Result<TrainingExample> {
        let ex = TrainingExample {
            state: SystemState::with_history(task, self.history.clone())?,
            target: self.target,
            weight: self.weight,
        };
        ex.validate()?;
        Ok(ex)
    }
}

/// Builds supervised decision steps from the valid paths harvested for one task.
///
/// Every distinct prefix of a valid path becomes a state. Its target is the next
/// action of the best valid path extending it (STOP if that path ends there).
/// Prefixes of the overall best path get weight 1, all others `w_alt`.
pub fn extract_examples(valid_paths: &[ExecutionPath], task: &Arc<TaskInstance>, w_alt: f64) -> Vec<TrainingExample> {
    let valid: Vec<&ExecutionPath> = valid_paths.iter().filter(|p| p.is_correct()).collect();
    let Some(best) = best_path(valid.iter().copied()) else {
        return Vec::new();
    };
    let best_seq = best.agent_sequence();

    let mut by_prefix: BTreeMap<Vec<AgentId>, &ExecutionPath> = BTreeMap::new();
    for path in &valid {
        let seq = path.agent_sequence();
        for cut in 0..=seq.len() {
            by_prefix
                .entry(seq[..cut].to_vec())
                .and_modify(|cur| {
                    if canonical_path_order(path, cur).is_lt() {
                        *cur = path;
                    }
                })
                .or_insert(path);
        }
    }

    by_prefix
        .into_iter()
        .map(|(prefix, ext)| {
            let cut = prefix.len();
            let target = match ext.steps.get(cut) {
                Some(step) => Action::Agent(step.agent_id),
                None => Action::Stop,
            };
            let weight = if best_seq.starts_with(&prefix) { 1.0 } else { w_alt };
            TrainingExample {
                state: SystemState { task: Arc::clone(task), history: ext.steps[..cut].to_vec() },
                target,
                weight,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub w_alt: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 32,
            weight_decay: 1e-4,
            seed: 0,
            w_alt: DEFAULT_W_ALT,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and nonnegative");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if !(self.w_alt > 0.0) {
            return bad("w_alt must be positive");
        }
        Ok(())
    }
}

/// Gradient of the loss w.r.t. every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: EncoderGrads,
    pub stop: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 5] = ["w1", "b1", "w2", "b2", "stop"];

impl Gradients {
    pub fn zeros(model: &RouterModel) -> Self {
        Self { encoder: EncoderGrads::zeros(&model.encoder), stop: vec![0.0; model.stop_embedding.len()] }
    }

    pub fn blocks(&self) -> [&[f64]; 5] {
        let e = &self.encoder;
        [&e.w1, &e.b1, &e.w2, &e.b2, &self.stop]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 5] {
        let e = &mut self.encoder;
        [&mut e.w1, &mut e.b1, &mut e.w2, &mut e.b2, &mut self.stop]
    }

    fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn param_blocks_mut(model: &mut RouterModel) -> [&mut Vec<f64>; 5] {
    let e = &mut model.encoder;
    [&mut e.w1, &mut e.b1, &mut e.w2, &mut e.b2, &mut model.stop_embedding]
}

fn check_example(model: &RouterModel, ex: &TrainingExample) -> Result<usize> {
    ex.validate()?;
    if ex.state.task.agent_ids != model.agent_ids {
        return Err(Error::Shape("example task agents do not match the router".into()));
    }
    if ex.target == Action::Stop && !model.stop_enabled {
        return Err(Error::InvalidInput("STOP target but the router has STOP disabled".into()));
    }
    model.index_of(ex.target).ok_or_else(|| Error::InvalidInput(format!("target {} not in router", ex.target)))
}

fn active_actions(model: &RouterModel) -> usize {
    model.n_agents() + usize::from(model.stop_enabled)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Weighted contrastive loss for one decision step.
pub fn contrastive_loss(model: &RouterModel, ex: &TrainingExample) -> Result<f64> {
    let target = check_example(model, ex)?;
    let z = model.embed_state(&ex.state)?;
    let scores = model.scores_for(&z);
    let logits: Vec<f64> = scores[..active_actions(model)].iter().map(|s| s / model.temperature).collect();
    Ok(ex.weight * (log_sum_exp(&logits) - logits[target]))
}

/// Loss and its exact gradient for one example.
pub fn loss_gradient(model: &RouterModel, ex: &TrainingExample) -> Result<(f64, Gradients)> {
    let target = check_example(model, ex)?;
    let x = featurize_state(&ex.state).0;
    let pass = model.encoder.forward(&x)?;
    let z = &pass.z;
    let scores = model.scores_for(z);
    let m = active_actions(model);
    let tau = model.temperature;
    let logits: Vec<f64> = scores[..m].iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(&logits);
    let loss = ex.weight * (lse - logits[target]);

    // dL/ds_j = w (p_j - [j = target]) / tau
    let dscore: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let indicator = if j == target { 1.0 } else { 0.0 };
            ex.weight * ((l - lse).exp() - indicator) / tau
        })
        .collect();

    let stop_norm = l2_norm(&model.stop_embedding);
    let stop_unit: Vec<f64> = model.stop_embedding.iter().map(|v| v / stop_norm).collect();
    let d = z.len();
    let mut dz = vec![0.0; d];
    for (j, &g) in dscore.iter().enumerate() {
        let e: &[f64] = if j < model.n_agents() { &model.agent_embeddings[j].0 } else { &stop_unit };
        dz.iter_mut().zip(e).for_each(|(a, b)| *a += g * b);
    }

    let mut grads = Gradients::zeros(model);
    model.encoder.backward(&x, &pass, &dz, &mut grads.encoder);
    if m > model.n_agents() {
        // s_stop = <z, s/|s|>; d/ds = (z - s_hat <s_hat, z>) / |s|
        let g = dscore[model.n_agents()];
        let proj = dot(&stop_unit, z);
        for (k, gs) in grads.stop.iter_mut().enumerate() {
            *gs = g * (z[k] - stop_unit[k] * proj) / stop_norm;
        }
    }
    Ok((loss, grads))
}

pub fn mean_loss(model: &RouterModel, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let losses = examples.par_iter().map(|ex| contrastive_loss(model, ex)).collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

/// Mean gradient over `examples`, reduced in example order.
pub fn batch_gradient(model: &RouterModel, examples: &[&TrainingExample]) -> Result<(f64, Gradients)> {
    let per_example = examples.par_iter().map(|ex| loss_gradient(model, ex)).collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / examples.len() as f64;
    let mut total = Gradients::zeros(model);
    let mut loss = 0.0;
    for (l, g) in &per_example {
        loss += l;
        total.add_scaled(g, scale);
    }
    Ok((loss * scale, total))
}

/// Fraction of examples whose masked argmax action equals the target.
pub fn routing_accuracy(model: &RouterModel, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let hits = examples
        .iter()
        .map(|ex| {
            let z = model.embed_state(&ex.state)?;
            let chosen = argmax_unmasked(&model.scores_for(&z), &action_mask(model, &ex.state));
            Ok(chosen == model.index_of(ex.target))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: RouterModel,
    /// Mean weighted loss per epoch, accumulated before each batch update.
    pub loss_history: Vec<f64>,
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Minibatch training. Agent embeddings are never modified.
pub fn train(model: &RouterModel, examples: &[TrainingExample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    for ex in examples {
        check_example(model, ex)?;
    }
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = rng::stream(config.seed, &[rng::PURPOSE_SHUFFLE]);
    let mut adam = AdamState { m: Gradients::zeros(&model), v: Gradients::zeros(&model), t: 0 };
    let mut loss_history = Vec::with_capacity(config.epochs);
    let lr = config.learning_rate;

    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grads) = batch_gradient(&model, &batch)?;
            epoch_loss += loss * batch.len() as f64;

            // L2 decay on weight matrices only.
            for (g, p) in [(&mut grads.encoder.w1, &model.encoder.w1), (&mut grads.encoder.w2, &model.encoder.w2)] {
                g.iter_mut().zip(p).for_each(|(g, p)| *g += config.weight_decay * p);
            }

            match config.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in param_blocks_mut(&mut model).into_iter().zip(grads.blocks()) {
                        p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let c1 = 1.0 - ADAM_BETA1.powi(adam.t);
                    let c2 = 1.0 - ADAM_BETA2.powi(adam.t);
                    let blocks = param_blocks_mut(&mut model)
                        .into_iter()
                        .zip(grads.blocks())
                        .zip(adam.m.blocks_mut())
                        .zip(adam.v.blocks_mut());
                    for (((p, g), m), v) in blocks {
                        for i in 0..p.len() {
                            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }
        loss_history.push(epoch_loss / examples.len() as f64);
    }
    Ok(TrainOutcome { model, loss_history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    /// |g_analytic - g_numeric| / (|g_numeric| + 1e-12) over the block.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
    pub passed: bool,
    /// Steps far above 1e-5 make the central difference too coarse to trust.
    pub reliable_step: bool,
}

/// Central-difference gradient of the mean loss over `examples`.
pub fn numerical_gradient(model: &RouterModel, examples: &[TrainingExample], step: f64) -> Result<Gradients> {
    let mut grads = Gradients::zeros(model);
    let mut probe = model.clone();
    for (b, g) in grads.blocks_mut().into_iter().enumerate() {
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = param_blocks_mut(&mut probe)[b][i];
            param_blocks_mut(&mut probe)[b][i] = orig + step;
            let plus = mean_loss(&probe, examples)?;
            param_blocks_mut(&mut probe)[b][i] = orig - step;
            let minus = mean_loss(&probe, examples)?;
            param_blocks_mut(&mut probe)[b][i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grads)
}

pub fn compare_gradients(analytic: &Gradients, numeric: &Gradients, step: f64, tolerance: f64) -> GradCheckReport {
    let blocks: Vec<BlockCheck> = BLOCK_NAMES
        .iter()
        .zip(analytic.blocks().iter().zip(numeric.blocks()))
        .map(|(name, (a, n))| {
            let diff = a.iter().zip(n.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let max_abs_error = a.iter().zip(n.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let relative_error = diff / (l2_norm(n) + 1e-12);
            BlockCheck { block: name.to_string(), relative_error, max_abs_error, passed: relative_error < tolerance }
        })
        .collect();
    GradCheckReport { step, tolerance, passed: blocks.iter().all(|b| b.passed), blocks, reliable_step: step <= 1e-3 }
}

/// Compares the analytic mean gradient over `examples` with central differences.
pub fn gradient_check(
    model: &RouterModel,
    examples: &[TrainingExample],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    if refs.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let (_, analytic) = batch_gradient(model, &refs)?;
    let numeric = numerical_gradient(model, examples, step)?;
    Ok(compare_gradients(&analytic, &numeric, step, tolerance))
}

/// A seeded model with perturbed biases and STOP norm, paired with one
/// example at a random depth of a random task. Used for gradient checks.
pub fn random_check_pair(seed: u64) -> Result<(RouterModel, TrainingExample)> {
    use rand::Rng;
    let cfg = EnvConfig { n_agents: 4, feature_dim: 6, n_classes: 3, seed, ..EnvConfig::default() };
    let scenario = generate_tasks(&cfg, 1)?.remove(0);
    let mc = ModelConfig { embed_dim: 8, hidden_dim: 10, seed, ..ModelConfig::default() };
    let mut model = RouterModel::for_scenario(&scenario, &mc)?;
    let mut r = rng::stream(seed, &[rng::PURPOSE_GRADCHECK]);
    model.encoder.b1.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
    model.encoder.b2.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
    model.stop_embedding.iter_mut().for_each(|v| *v *= r.random_range(0.5..2.0));
    let mut order = scenario.task.agent_ids.clone();
    order.shuffle(&mut r);
    let depth = r.random_range(0..order.len());
    let target = if depth > 0 && r.random_bool(0.3) { Action::Stop } else { Action::Agent(order[depth]) };
    let mut state = scenario.root_state();
    for &a in &order[..depth] {
        state = advance(&scenario, &state, a, seed)?;
    }
    Ok((model, TrainingExample { state, target, weight: r.random_range(0.2..1.5) }))
}
