//! Exact searches against brute-force enumeration, greedy split scores
//! against direct recomputation.

mod common;

use braids::cutpoints::build_cutpoints;
use braids::search::{policy_search_exact, search_exact, search_greedy_rn, split_scores, SearchConfig, SearchMode};
use braids::tree::{Node, Split};
use common::*;
use rand::Rng;

const INSTANCES: u64 = 50;

#[test]
fn exact_subgroup_search_matches_enumeration() {
    let mut rng = rng(101);
    for instance in 0..INSTANCES {
        let n = rng.random_range(6..=20);
        let p = rng.random_range(1..=3);
        let d = random_dataset(&mut rng, n, p);
        let draws = random_draws(&mut rng, n, 40);
        let min_leaf = rng.random_range(1..=3);
        let max_depth = rng.random_range(1..=2);
        let grid = build_cutpoints(&d, min_leaf, 5);
        let splits: Vec<Split> = grid.iter().cloned().collect();
        for lambda in [0.0, 1.0, 2.0] {
            let depth_penalty = if instance % 3 == 0 { 0.01 } else { 0.0 };
            let cfg = SearchConfig { max_depth, min_leaf, mode: SearchMode::Exact, lambda, depth_penalty };
            let found = search_exact(&draws, &d, &grid, &cfg).unwrap();
            let brute = brute_force_subgroups(&draws, &d, &splits, &cfg);
            assert!(
                (found.penalized_value - brute.value).abs() <= 1e-9,
                "instance {instance}, lambda {lambda}: search {} vs enumeration {}",
                found.penalized_value,
                brute.value
            );
            let labels = canonical_labels(&found.tree.assign(&d).unwrap());
            assert!(brute.near_best.contains(&labels), "instance {instance}: chosen partition is not optimal");
            if depth_penalty == 0.0 {
                assert_eq!(found.trees_covered, brute.feasible as f64, "instance {instance}");
            }
        }
    }
}

#[test]
fn policy_search_matches_enumeration() {
    let mut rng = rng(202);
    for instance in 0..INSTANCES {
        let n = rng.random_range(6..=20);
        let p = rng.random_range(1..=3);
        let d = random_dataset(&mut rng, n, p);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = build_cutpoints(&d, 1, 5);
        let splits: Vec<Split> = grid.iter().cloned().collect();
        for max_depth in 0..=2 {
            let (tree, value) = policy_search_exact(&scores, &d, &grid, max_depth).unwrap();
            let best = brute_force_policy(&scores, &d, &splits, max_depth);
            assert!((value - best).abs() <= 1e-9, "instance {instance}, depth {max_depth}: {value} vs {best}");
            let realized: f64 = tree
                .actions(&d)
                .unwrap()
                .iter()
                .zip(&scores)
                .filter(|(a, _)| a.treats())
                .map(|(_, s)| s)
                .sum();
            assert!((realized - value).abs() <= 1e-9);
            assert!(tree.depth() <= max_depth);
        }
    }
}

#[test]
fn prefix_sum_split_scores_match_direct_sums() {
    let mut rng = rng(303);
    for _ in 0..200 {
        let n = rng.random_range(2..=60);
        let d = random_dataset(&mut rng, n, 1);
        let tau_hat: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0) + 1e3).collect();
        let units: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.7)).collect();
        let min_leaf = rng.random_range(1..=4);
        let thresholds: Vec<f64> = (0..9).map(|k| f64::from(k) / 2.0 - 0.25).collect();
        let fast = split_scores(&tau_hat, d.x(), &units, 0, &thresholds, min_leaf);
        for (t, got) in thresholds.iter().zip(fast) {
            let (l, r): (Vec<usize>, Vec<usize>) = units.iter().partition(|&&i| d.x()[(i, 0)] <= *t);
            let sse = |g: &[usize]| {
                let m = mean(&g.iter().map(|&i| tau_hat[i]).collect::<Vec<_>>());
                g.iter().map(|&i| (tau_hat[i] - m).powi(2)).sum::<f64>()
            };
            if l.len() < min_leaf || r.len() < min_leaf {
                assert!(got.is_none());
            } else {
                let want = sse(&l) + sse(&r);
                assert!((got.unwrap() - want).abs() <= 1e-10 * (1.0 + want), "{got:?} vs {want}");
            }
        }
    }
}

#[test]
fn greedy_search_splits_on_the_best_first_split() {
    let mut rng = rng(404);
    for _ in 0..INSTANCES {
        let n = rng.random_range(8..=40);
        let d = random_dataset(&mut rng, n, 3);
        let tau_hat: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = build_cutpoints(&d, 2, 16);
        let cfg = SearchConfig { max_depth: 1, min_leaf: 2, ..SearchConfig::default() };
        let tree = search_greedy_rn(&tau_hat, &d, &grid, &cfg).unwrap();
        let sse_of = |labels: &[usize], k: usize| {
            (0..k)
                .map(|g| {
                    let members: Vec<f64> = (0..n).filter(|&i| labels[i] == g).map(|i| tau_hat[i]).collect();
                    let m = mean(&members);
                    members.iter().map(|v| (v - m).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
        };
        let best = grid
            .iter()
            .map(|s| leaf_of(&Node::split(s.clone(), Node::Leaf(()), Node::Leaf(())), d.x()))
            .filter(|l| {
                let left = l.iter().filter(|&&g| g == 0).count();
                left >= 2 && n - left >= 2
            })
            .map(|l| sse_of(&l, 2))
            .fold(f64::INFINITY, f64::min);
        let found = sse_of(&tree.assign(&d).unwrap(), tree.k);
        if best.is_finite() {
            assert!((found - best).abs() <= 1e-10 * (1.0 + best));
        }
    }
}
