use std::collections::BTreeSet;
use std::sync::Arc;

use strmac_core::evolve::{
    exhaustive_search, pruned_search, router_guided_search, search_with_tree, NodeStatus, PathTreeNode, SearchMode,
    DEFAULT_SEARCH_CAP,
};
use strmac_core::paths::count_paths_u64;
use strmac_core::route::ModelConfig;
use strmac_core::simenv::{generate_tasks, EnvConfig, Scenario};
use strmac_core::types::normalized;
use strmac_core::{AgentId, AgentProfile, Error, RouterModel, TaskInstance};

fn basis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn scenario(query: Vec<f64>, expertise: Vec<Vec<f64>>, distractors: &[bool], threshold: f64) -> Scenario {
    let agents: Vec<AgentProfile> = expertise
        .into_iter()
        .enumerate()
        .map(|(i, e)| AgentProfile {
            agent_id: AgentId(i as u32),
            expertise_vector: normalized(&e),
            base_token_cost: 50 + 10 * i as u64,
            per_history_token_cost: 7,
            distractor_flag: distractors[i],
        })
        .collect();
    Scenario {
        task: Arc::new(TaskInstance {
            task_id: 5,
            query_features: normalized(&query),
            label: 1,
            n_classes: 3,
            agent_ids: agents.iter().map(|a| a.agent_id).collect(),
        }),
        agents,
        evidence_threshold: threshold,
    }
}

fn sequences(paths: &[strmac_core::ExecutionPath]) -> BTreeSet<Vec<AgentId>> {
    paths.iter().map(|p| p.agent_sequence()).collect()
}

fn evaluated_prefixes(node: &PathTreeNode, out: &mut Vec<Vec<AgentId>>) {
    if !node.prefix.is_empty() && node.state.is_some() {
        out.push(node.prefix.clone());
    }
    for c in &node.children {
        evaluated_prefixes(c, out);
    }
}

#[test]
fn exhaustive_counts_every_prefix() {
    let cfg = EnvConfig { n_agents: 3, ..EnvConfig::default() };
    for s in generate_tasks(&cfg, 5).unwrap() {
        let trace = search_with_tree(&s, SearchMode::Exhaustive, 0, DEFAULT_SEARCH_CAP).unwrap();
        assert_eq!(trace.harvest.paths_evaluated, 15);
        assert_eq!(trace.rollout_calls, 15);
        assert_eq!(trace.harvest.full_space, 15);
    }
}

#[test]
fn unsolvable_task_has_no_best_path() {
    // Every agent is a distractor: evidence is never positive.
    let s = scenario(basis(3, 0), vec![basis(3, 0), vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], &[true; 3], 0.3);
    let ex = exhaustive_search(&s, 1).unwrap();
    assert!(ex.valid_paths.is_empty());
    assert!(ex.best_path.is_none());
    let pr = pruned_search(&s, 1).unwrap();
    assert_eq!(pr, ex, "nothing prunes on an unsolvable task");
}

#[test]
fn single_agent_solvable() {
    let s = scenario(basis(2, 0), vec![basis(2, 0)], &[false], 0.5);
    let h = exhaustive_search(&s, 0).unwrap();
    assert_eq!(h.paths_evaluated, 1);
    assert_eq!(h.best_path.unwrap().agent_sequence(), vec![AgentId(0)]);
}

#[test]
fn solved_node_subtree_is_pruned() {
    // Only agent 2 carries enough evidence alone.
    let s =
        scenario(basis(3, 0), vec![vec![0.3, 1.0, 0.0], vec![0.2, 0.0, 1.0], vec![1.0, 0.1, 0.0]], &[false; 3], 0.8);
    let ex = exhaustive_search(&s, 0).unwrap();
    let trace = search_with_tree(&s, SearchMode::Pruned, 0, DEFAULT_SEARCH_CAP).unwrap();
    let pr = &trace.harvest;
    assert!(sequences(&pr.valid_paths).contains(&vec![AgentId(2)]));
    let mut evaluated = Vec::new();
    evaluated_prefixes(&trace.tree, &mut evaluated);
    assert!(!evaluated.iter().any(|p| p.len() > 1 && p[0] == AgentId(2)));
    assert!(pr.paths_evaluated < 15);
    assert_eq!(pr.paths_evaluated, trace.rollout_calls);
    assert_eq!(pr.best_path.as_ref().unwrap().score, ex.best_path.as_ref().unwrap().score);
    let solved = trace.tree.children.iter().find(|c| c.prefix == vec![AgentId(2)]).unwrap();
    assert_eq!(solved.status, NodeStatus::Solved);
    assert!(solved.children.is_empty());
}

#[test]
fn pruning_preserves_optimum_on_random_tasks() {
    for (n, count, seed) in [(4usize, 200usize, 1u64), (5, 60, 2)] {
        let cfg = EnvConfig { n_agents: n, seed, ..EnvConfig::default() };
        let (mut solvable, mut pruned_total, mut full_total) = (0, 0, 0);
        for s in generate_tasks(&cfg, count).unwrap() {
            let ex = exhaustive_search(&s, seed).unwrap();
            let trace = search_with_tree(&s, SearchMode::Pruned, seed, DEFAULT_SEARCH_CAP).unwrap();
            let pr = trace.harvest;
            assert_eq!(ex.best_path.as_ref().map(|p| p.score), pr.best_path.as_ref().map(|p| p.score));
            assert!(sequences(&pr.valid_paths).is_subset(&sequences(&ex.valid_paths)));
            assert_eq!(pr.paths_evaluated, trace.rollout_calls);
            assert!(pr.paths_evaluated as u64 <= pr.full_space);
            solvable += usize::from(ex.best_path.is_some());
            pruned_total += pr.paths_evaluated;
            full_total += ex.paths_evaluated;
        }
        assert!(solvable > 0);
        assert!(pruned_total < full_total);
    }
}

#[test]
fn search_cap_is_enforced() {
    let cfg = EnvConfig { n_agents: 8, ..EnvConfig::default() };
    let s = generate_tasks(&cfg, 1).unwrap().remove(0);
    assert!(matches!(exhaustive_search(&s, 0), Err(Error::TooManyAgents { n: 8, cap: 7 })));
    assert!(matches!(pruned_search(&s, 0), Err(Error::TooManyAgents { .. })));
    assert_eq!(count_paths_u64(7), Some(13699));
}

#[test]
fn guided_with_full_width_equals_pruned() {
    let cfg = EnvConfig { n_agents: 4, seed: 9, ..EnvConfig::default() };
    let tasks = generate_tasks(&cfg, 30).unwrap();
    let model = RouterModel::for_scenario(&tasks[0], &ModelConfig { seed: 4, ..ModelConfig::default() }).unwrap();
    for s in &tasks {
        assert_eq!(router_guided_search(s, &model, 4, 9).unwrap(), pruned_search(s, 9).unwrap());
    }
    assert!(router_guided_search(&tasks[0], &model, 0, 9).is_err());
    assert!(router_guided_search(&tasks[0], &model, 5, 9).is_err());
}

#[test]
fn guided_search_is_monotone_in_k_and_sound() {
    let cfg = EnvConfig { n_agents: 5, seed: 3, ..EnvConfig::default() };
    let tasks = generate_tasks(&cfg, 40).unwrap();
    let model = RouterModel::for_scenario(&tasks[0], &ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
    for s in &tasks {
        let counts: Vec<usize> = (1..=5)
            .map(|k| {
                let trace =
                    search_with_tree(s, SearchMode::Guided { model: &model, k }, 3, DEFAULT_SEARCH_CAP).unwrap();
                assert_eq!(trace.harvest.paths_evaluated, trace.rollout_calls);
                for p in &trace.harvest.valid_paths {
                    assert!(p.is_correct());
                    let set: BTreeSet<_> = p.agent_sequence().into_iter().collect();
                    assert_eq!(set.len(), p.len());
                }
                trace.harvest.paths_evaluated
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }
}

#[test]
fn oracle_router_with_k1_evaluates_one_optimal_path() {
    let s = scenario(
        basis(4, 0),
        vec![vec![0.1, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.1, 0.0], vec![0.3, 0.0, 0.0, 1.0]],
        &[false; 3],
        0.7,
    );
    let optimum = exhaustive_search(&s, 0).unwrap().best_path.unwrap();
    assert_eq!(optimum.agent_sequence(), vec![AgentId(1)]);

    let mut model = RouterModel::for_scenario(&s, &ModelConfig { embed_dim: 4, ..ModelConfig::default() }).unwrap();
    model.encoder.w1.iter_mut().for_each(|w| *w = 0.0);
    model.encoder.w2.iter_mut().for_each(|w| *w = 0.0);
    model.encoder.b2 = model.agent_embeddings[1].0.clone();
    let h = router_guided_search(&s, &model, 1, 0).unwrap();
    assert_eq!(h.paths_evaluated, 1);
    assert_eq!(h.best_path.unwrap(), optimum);
}
