//! Counting, scoring and ordering execution paths.

use std::cmp::Ordering;

use num_bigint::BigUint;

use crate::types::{ExecutionPath, PathScore};

/// Number of nonempty repetition-free agent sequences over `n_agents` agents:
/// the sum over K = 1..N of N!/(N-K)!.
pub fn count_paths(n_agents: usize) -> BigUint {
    // Horner form of the falling-factorial sum: N + N(N-1) + N(N-1)(N-2) + ...
    let mut total = BigUint::from(0u32);
    let mut term = BigUint::from(1u32);
    for remaining in (1..=n_agents).rev() {
        term *= remaining;
        total += &term;
    }
    total
}

/// `count_paths` for search-sized populations.
pub fn count_paths_u64(n_agents: usize) -> Option<u64> {
    u64::try_from(count_paths(n_agents)).ok()
}

pub fn score_path(path: &ExecutionPath, label: usize) -> PathScore {
    if path.prediction == label {
        PathScore::Finite(-(path.total_tokens as i64))
    } else {
        PathScore::NegInf
    }
}

/// Total order on paths of one task. `Less` means `a` ranks ahead of `b`:
/// higher score, then fewer steps, then the lexicographically smaller agent sequence.
pub fn canonical_path_order(a: &ExecutionPath, b: &ExecutionPath) -> Ordering {
    b.score
        .cmp(&a.score)
        .then_with(|| a.steps.len().cmp(&b.steps.len()))
        .then_with(|| a.steps.iter().map(|s| s.agent_id).cmp(b.steps.iter().map(|s| s.agent_id)))
}

/// The canonical-order winner of a set of paths.
pub fn best_path<'a, I>(paths: I) -> Option<&'a ExecutionPath>
where
    I: IntoIterator<Item = &'a ExecutionPath>,
{
    paths.into_iter().min_by(|a, b| canonical_path_order(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AgentId, StepRecord};
    use proptest::prelude::*;

    fn enumerate_prefixes(n: usize, used: &mut Vec<usize>, out: &mut u64) {
        for a in 0..n {
            if used.contains(&a) {
                continue;
            }
            *out += 1;
            used.push(a);
            enumerate_prefixes(n, used, out);
            used.pop();
        }
    }

    fn brute_force_count(n: usize) -> u64 {
        let mut out = 0;
        enumerate_prefixes(n, &mut Vec::new(), &mut out);
        out
    }

    fn path(seq: &[u32], tokens: u64, correct: bool) -> ExecutionPath {
        let steps = seq.iter().map(|&a| StepRecord { agent_id: AgentId(a), answer: 0, tokens_consumed: 1 }).collect();
        ExecutionPath {
            task_id: 0,
            steps,
            prediction: 0,
            total_tokens: tokens,
            score: if correct { PathScore::Finite(-(tokens as i64)) } else { PathScore::NegInf },
        }
    }

    #[test]
    fn count_paths_examples() {
        assert_eq!(count_paths(0), BigUint::from(0u32));
        assert_eq!(count_paths(1), BigUint::from(1u32));
        assert_eq!(count_paths(3), BigUint::from(15u32));
        assert_eq!(count_paths(5), BigUint::from(325u32));
        assert_eq!(count_paths(7), BigUint::from(13699u32));
    }

    #[test]
    fn count_paths_matches_brute_force_and_recurrence() {
        for n in 1..=8 {
            assert_eq!(count_paths_u64(n).unwrap(), brute_force_count(n), "n = {n}");
        }
        for n in 1..=10 {
            assert_eq!(count_paths(n), BigUint::from(n) * (BigUint::from(1u32) + count_paths(n - 1)));
        }
    }

    #[test]
    fn count_paths_large_is_exact() {
        // 20 * (1 + count(19)) computed independently in u128.
        let mut c: u128 = 0;
        for n in 1..=20u128 {
            c = n * (1 + c);
        }
        assert_eq!(count_paths(20), BigUint::from(c));
        assert!(count_paths_u64(40).is_none());
    }

    #[test]
    fn score_examples() {
        let mut p = path(&[0], 100, true);
        assert_eq!(score_path(&p, 0), PathScore::Finite(-100));
        assert_eq!(score_path(&p, 1), PathScore::NegInf);
        p.total_tokens = 1;
        assert_eq!(score_path(&p, 0), PathScore::Finite(-1));
        assert!(score_path(&p, 0) > PathScore::Finite(-2));
    }

    #[test]
    fn order_examples() {
        assert_eq!(canonical_path_order(&path(&[4], 50, true), &path(&[0], 80, true)), Ordering::Less);
        assert_eq!(canonical_path_order(&path(&[3], 50, true), &path(&[0, 1], 50, true)), Ordering::Less);
        assert_eq!(canonical_path_order(&path(&[1, 3], 50, true), &path(&[1, 2], 50, true)), Ordering::Greater);
        assert_eq!(canonical_path_order(&path(&[2, 3], 500, true), &path(&[0], 1, false)), Ordering::Less);
    }

    proptest! {
        #[test]
        fn score_strictly_decreasing_in_tokens(a in 1u64..1_000_000, b in 1u64..1_000_000) {
            prop_assume!(a < b);
            prop_assert!(score_path(&path(&[0], a, true), 0) > score_path(&path(&[0], b, true), 0));
        }

        #[test]
        fn canonical_order_is_total(
            specs in prop::collection::vec(
                (prop::sample::subsequence(vec![0u32, 1, 2, 3], 1..=4).prop_shuffle(), 1u64..6, any::<bool>()),
                3..8,
            )
        ) {
            let paths: Vec<_> = specs.iter().map(|(s, t, c)| path(s, *t, *c)).collect();
            for a in &paths {
                prop_assert_eq!(canonical_path_order(a, a), Ordering::Equal);
                for b in &paths {
                    let ab = canonical_path_order(a, b);
                    prop_assert_eq!(ab, canonical_path_order(b, a).reverse());
                    if ab == Ordering::Equal {
                        prop_assert_eq!(a.agent_sequence(), b.agent_sequence());
                    }
                    for c in &paths {
                        if ab != Ordering::Greater && canonical_path_order(b, c) != Ordering::Greater {
                            prop_assert_ne!(canonical_path_order(a, c), Ordering::Greater);
                        }
                    }
                }
            }
        }
    }
}
