use std::sync::Arc;

use proptest::prelude::*;
use strmac_core::eval::{cas, evaluate, top_paths, CasParams, Method, MethodKind};
use strmac_core::route::ModelConfig;
use strmac_core::simenv::{generate_tasks, EnvConfig, Scenario};
use strmac_core::types::normalized;
use strmac_core::{AgentId, AgentProfile, Error, RouterModel, TaskInstance};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn cas_reference_values() {
    let v = cas(64.0, 794.5, 0.1, 1000.0).unwrap();
    assert!(close(v, 59.11, 0.05), "{v}");
    let v = cas(85.2, 338.0, 0.1, 1000.0).unwrap();
    assert!(close(v, 82.37, 0.05), "{v}");
    assert_eq!(cas(72.5, 0.0, 0.1, 1000.0).unwrap(), 72.5);
    assert!(matches!(cas(50.0, 10.0, 0.1, 0.0), Err(Error::InvalidConfig(_))));
    assert!(cas(-1.0, 10.0, 0.1, 1000.0).is_err());
}

proptest! {
    #[test]
    fn cas_is_monotone(acc in 0.0f64..100.0, tok in 0.0f64..5000.0, d in 0.001f64..100.0) {
        let base = cas(acc, tok, 0.1, 1000.0).unwrap();
        prop_assert!(cas(acc, tok + d, 0.1, 1000.0).unwrap() <= base);
        prop_assert!(cas(acc + d, tok, 0.1, 1000.0).unwrap() >= base);
        prop_assert!(base <= acc);
    }
}

fn benchmark() -> Vec<Scenario> {
    generate_tasks(&EnvConfig { n_agents: 4, seed: 17, ..EnvConfig::default() }, 60).unwrap()
}

#[test]
fn oracle_dominates_every_method() {
    let tasks = benchmark();
    let params = CasParams::default();
    let oracle = evaluate(&Method::ExhaustiveOracle, &tasks, 17, params).unwrap();
    let model = RouterModel::for_scenario(&tasks[0], &ModelConfig::default()).unwrap();
    let others = [
        Method::Strmac { model, max_steps: 4 },
        Method::RandomChain { seed: 3 },
        Method::FixedChain { order: vec![AgentId(3), AgentId(1)] },
        Method::SingleAgent { agent: AgentId(2) },
    ];
    for m in &others {
        let r = evaluate(m, &tasks, 17, params).unwrap();
        assert!(oracle.accuracy >= r.accuracy, "{} beat the oracle", r.method);
    }
}

#[test]
fn report_is_consistent_with_records() {
    let tasks = benchmark();
    let r = evaluate(&Method::RandomChain { seed: 8 }, &tasks, 17, CasParams::default()).unwrap();
    let n = r.records.len() as f64;
    let acc = 100.0 * r.records.iter().filter(|x| x.correct).count() as f64 / n;
    let tok = r.records.iter().map(|x| x.tokens as f64).sum::<f64>() / n;
    assert!(close(acc, r.accuracy, 1e-9));
    assert!(close(tok, r.mean_tokens, 1e-9));
    assert!(close(cas(acc, tok, 0.1, 1000.0).unwrap(), r.cas, 1e-9));
    assert_eq!(r.path_distribution.iter().map(|p| p.count).sum::<usize>(), tasks.len());
    for rec in &r.records {
        assert_eq!(rec.sequence.len(), 4, "random chains run every agent");
    }
}

#[test]
fn single_agent_has_one_signature() {
    let r = evaluate(&Method::SingleAgent { agent: AgentId(1) }, &benchmark(), 17, CasParams::default()).unwrap();
    assert_eq!(r.path_distribution.len(), 1);
    assert_eq!(r.path_distribution[0].sequence, vec![AgentId(1)]);
    assert_eq!(r.path_distribution[0].count, 60);
}

#[test]
fn evaluation_is_deterministic() {
    let tasks = benchmark();
    let a = evaluate(&Method::RandomChain { seed: 2 }, &tasks, 17, CasParams::default()).unwrap();
    let b = evaluate(&Method::RandomChain { seed: 2 }, &tasks, 17, CasParams::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = evaluate(&Method::RandomChain { seed: 3 }, &tasks, 17, CasParams::default()).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn top_paths_ordering() {
    let r = evaluate(&Method::RandomChain { seed: 1 }, &benchmark(), 17, CasParams::default()).unwrap();
    let top = top_paths(&r, 5);
    assert!(top.len() <= 5);
    for w in top.windows(2) {
        assert!(w[0].count > w[1].count || (w[0].count == w[1].count && w[0].sequence < w[1].sequence));
    }
    let mut seen = top.iter().map(|p| p.sequence.clone()).collect::<Vec<_>>();
    seen.dedup();
    assert_eq!(seen.len(), top.len());
    assert!(top.iter().all(|p| close(p.accuracy, 100.0 * p.correct as f64 / p.count as f64, 1e-9)));
}

/// Agent 0 alone clears the threshold on 90 of 100 tasks.
fn dominant_fixture() -> Vec<Scenario> {
    let agents: Vec<AgentProfile> = (0..4)
        .map(|i| {
            let mut e = vec![0.0; 4];
            e[i] = 1.0;
            AgentProfile {
                agent_id: AgentId(i as u32),
                expertise_vector: e,
                base_token_cost: 40 + 20 * i as u64,
                per_history_token_cost: 5,
                distractor_flag: false,
            }
        })
        .collect();
    (0..100u64)
        .map(|t| {
            let j = 0.01 * (t % 7) as f64;
            let q = if t < 90 { vec![1.0, j, 0.02, 0.0] } else { vec![0.05, 0.2, 0.1, 1.0] };
            Scenario {
                task: Arc::new(TaskInstance {
                    task_id: t,
                    query_features: normalized(&q),
                    label: (t % 3) as usize,
                    n_classes: 3,
                    agent_ids: agents.iter().map(|a| a.agent_id).collect(),
                }),
                agents: agents.clone(),
                evidence_threshold: 0.6,
            }
        })
        .collect()
}

#[test]
fn oracle_prefers_dominant_agent() {
    let r = evaluate(&Method::ExhaustiveOracle, &dominant_fixture(), 0, CasParams::default()).unwrap();
    let top = &top_paths(&r, 1)[0];
    assert_eq!(top.sequence, vec![AgentId(0)]);
    assert!(top.count >= 90);
    assert_eq!(r.accuracy, 100.0);
}

#[test]
fn method_names_parse() {
    assert_eq!("strmac".parse::<MethodKind>().unwrap(), MethodKind::Strmac);
    assert_eq!("random_chain".parse::<MethodKind>().unwrap(), MethodKind::RandomChain);
    assert!(matches!("best_guess".parse::<MethodKind>(), Err(Error::InvalidInput(_))));
    assert!(evaluate(&Method::ExhaustiveOracle, &[], 0, CasParams::default()).is_err());
}
