//! Accuracy, token cost, cost-adjusted score and path-distribution reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::exhaustive_search;
use crate::rng;
use crate::route::{run_inference, RouterModel};
use crate::simenv::{rollout, Scenario};
use crate::types::{AgentId, ExecutionPath, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CasParams {
    pub mu: f64,
    pub c: f64,
}

impl Default for CasParams {
    fn default() -> Self {
        Self { mu: 0.1, c: 1000.0 }
    }
}

/// Cost-adjusted score: `accuracy * exp(-mu * mean_tokens / c)`.
pub fn cas(accuracy: f64, mean_tokens: f64, mu: f64, c: f64) -> Result<f64> {
    if c == 0.0 || !c.is_finite() {
        return Err(Error::InvalidConfig("CAS normalization constant c must be nonzero".into()));
    }
    if accuracy < 0.0 || mean_tokens < 0.0 {
        return Err(Error::InvalidInput("accuracy and tokens must be nonnegative".into()));
    }
    Ok(accuracy * (-mu * mean_tokens / c).exp())
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Method {
    Strmac { model: RouterModel, max_steps: usize },
    RandomChain { seed: u64 },
    FixedChain { order: Vec<AgentId> },
    SingleAgent { agent: AgentId },
    ExhaustiveOracle,
}

/// Method identifiers accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Strmac,
    RandomChain,
    FixedChain,
    SingleAgent,
    ExhaustiveOracle,
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "strmac" => MethodKind::Strmac,
            "random_chain" | "random-chain" => MethodKind::RandomChain,
            "fixed_chain" | "fixed-chain" => MethodKind::FixedChain,
            "single_agent" | "single-agent" => MethodKind::SingleAgent,
            "exhaustive_oracle" | "oracle" => MethodKind::ExhaustiveOracle,
            other => return Err(Error::InvalidInput(format!("unknown method '{other}'"))),
        })
    }
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Strmac { .. } => "strmac".into(),
            Method::RandomChain { .. } => "random_chain".into(),
            Method::FixedChain { order } => {
                let ids: Vec<String> = order.iter().map(|a| a.to_string()).collect();
                format!("fixed_chain[{}]", ids.join(","))
            }
            Method::SingleAgent { agent } => format!("single_agent[{agent}]"),
            Method::ExhaustiveOracle => "exhaustive_oracle".into(),
        }
    }

    /// The path this method produces for one task.
    pub fn run(&self, scenario: &Scenario, env_seed: u64) -> Result<ExecutionPath> {
        match self {
            Method::Strmac { model, max_steps } => run_inference(model, scenario, *max_steps, env_seed).map(|i| i.path),
            Method::RandomChain { seed } => {
                let mut order = scenario.task.agent_ids.clone();
                order.shuffle(&mut rng::stream(*seed, &[rng::PURPOSE_CHAIN, scenario.task.task_id]));
                rollout(scenario, &order, env_seed)
            }
            Method::FixedChain { order } => rollout(scenario, order, env_seed),
            Method::SingleAgent { agent } => rollout(scenario, &[*agent], env_seed),
            Method::ExhaustiveOracle => match exhaustive_search(scenario, env_seed)?.best_path {
                Some(best) => Ok(best),
                // No correct path: every score is -inf, so the canonical winner is
                // the shortest, lexicographically smallest path.
                None => {
                    let first = *scenario.task.agent_ids.iter().min().expect("validated nonempty");
                    rollout(scenario, &[first], env_seed)
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub sequence: Vec<AgentId>,
    pub prediction: usize,
    pub label: usize,
    pub correct: bool,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStat {
    pub sequence: Vec<AgentId>,
    pub count: usize,
    pub correct: usize,
    /// Percentage of this path's tasks answered correctly.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_tasks: usize,
    /// Percentage in [0, 100].
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub cas: f64,
    pub mu: f64,
    pub c: f64,
    pub records: Vec<TaskRecord>,
    /// One entry per distinct agent sequence, in lexicographic order.
    pub path_distribution: Vec<PathStat>,
}

pub fn evaluate(method: &Method, scenarios: &[Scenario], env_seed: u64, params: CasParams) -> Result<EvalReport> {
    if scenarios.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one task".into()));
    }
    let paths =
        scenarios.par_iter().map(|s| s.validate().and_then(|_| method.run(s, env_seed))).collect::<Result<Vec<_>>>()?;
    let records: Vec<TaskRecord> = scenarios
        .iter()
        .zip(&paths)
        .map(|(s, p)| TaskRecord {
            task_id: s.task.task_id,
            sequence: p.agent_sequence(),
            prediction: p.prediction,
            label: s.task.label,
            correct: p.prediction == s.task.label,
            tokens: p.total_tokens,
        })
        .collect();
    let n = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let accuracy = 100.0 * correct as f64 / n as f64;
    let mean_tokens = records.iter().map(|r| r.tokens as f64).sum::<f64>() / n as f64;

    let mut dist: BTreeMap<Vec<AgentId>, (usize, usize)> = BTreeMap::new();
    for r in &records {
        let e = dist.entry(r.sequence.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(r.correct);
    }
    let path_distribution = dist
        .into_iter()
        .map(|(sequence, (count, correct))| PathStat {
            sequence,
            count,
            correct,
            accuracy: 100.0 * correct as f64 / count as f64,
        })
        .collect();

    Ok(EvalReport {
        method: method.name(),
        n_tasks: n,
        accuracy,
        mean_tokens,
        cas: cas(accuracy, mean_tokens, params.mu, params.c)?,
        mu: params.mu,
        c: params.c,
        records,
        path_distribution,
    })
}

/// Most frequent agent sequences: descending count, ties by sequence.
pub fn top_paths(report: &EvalReport, top_n: usize) -> Vec<PathStat> {
    let mut stats = report.path_distribution.clone();
    stats.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.sequence.cmp(&b.sequence)));
    stats.truncate(top_n);
    stats
}

fn sequence_label(seq: &[AgentId]) -> String {
    seq.iter().map(|a| format!("A{a}")).collect::<Vec<_>>().join("->")
}

/// Aligned `Method | Acc | Token | CAS` table.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>10}  {:>6}", "Method", "Acc", "Token", "CAS");
    let _ = writeln!(out, "{}", "-".repeat(width + 30));
    for r in reports {
        let _ = writeln!(out, "{:<width$}  {:>6.1}  {:>10.1}  {:>6.1}", r.method, r.accuracy, r.mean_tokens, r.cas);
    }
    out
}

pub fn render_top_paths(stats: &[PathStat]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24}  {:>6}  {:>6}", "Path", "Count", "Acc");
    for s in stats {
        let _ = writeln!(out, "{:<24}  {:>6}  {:>6.1}", sequence_label(&s.sequence), s.count, s.accuracy);
    }
    out
}

/// Bar chart of path counts (left axis) with a line of per-path accuracy (right axis).
pub fn render_path_svg(report: &EvalReport, top_n: usize) -> String {
    let stats = top_paths(report, top_n);
    let (w, h, margin) = (80.0 * stats.len().max(1) as f64 + 120.0, 320.0, 60.0);
    let plot_h = h - 2.0 * margin;
    let max_count = stats.iter().map(|s| s.count).max().unwrap_or(1).max(1) as f64;
    let slot = (w - 2.0 * margin) / stats.len().max(1) as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle">{} top-{} paths</text>"#,
        w / 2.0,
        report.method,
        stats.len()
    );
    let _ = writeln!(svg, r#"<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{}" stroke="black"/>"#, h - margin);
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{margin}" x2="{}" y2="{}" stroke="black"/>"#,
        w - margin,
        w - margin,
        h - margin
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{margin}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - margin,
        w - margin,
        h - margin
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, margin - 4.0, margin + 4.0, max_count);
    let _ = writeln!(svg, r#"<text x="{}" y="{}">100%</text>"#, w - margin + 4.0, margin + 4.0);

    let mut points = Vec::new();
    for (i, s) in stats.iter().enumerate() {
        let x = margin + slot * i as f64;
        let bar_h = plot_h * s.count as f64 / max_count;
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#4c78a8"/>"##,
            x + slot * 0.2,
            h - margin - bar_h,
            slot * 0.6,
            bar_h
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot / 2.0,
            h - margin + 16.0,
            sequence_label(&s.sequence)
        );
        points.push(format!("{:.1},{:.1}", x + slot / 2.0, h - margin - plot_h * s.accuracy / 100.0));
    }
    if !points.is_empty() {
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#e45756" stroke-width="2"/>"##,
            points.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}
