//! Random small instances shared by the integration tests.
#![allow(dead_code)]

use braids::data::{Covariate, Dataset, Propensity};
use braids::draws::PosteriorDraws;
use braids::search::SearchConfig;
use braids::tree::{Node, Partition, Split};
use braids::utility::expected_utility;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `p` columns alternating continuous (values on a coarse lattice, so ties
/// occur) and three-level categorical, with arms alternating by row.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
    let mut x = DMatrix::zeros(n, p);
    let mut columns = Vec::with_capacity(p);
    for j in 0..p {
        if j % 2 == 0 {
            columns.push(Covariate::continuous(format!("x{}", j + 1)));
            for i in 0..n {
                x[(i, j)] = f64::from(rng.random_range(0..8u8)) / 2.0;
            }
        } else {
            columns.push(Covariate::categorical(format!("x{}", j + 1), 3));
            for i in 0..n {
                x[(i, j)] = f64::from(rng.random_range(0..3u8));
            }
        }
    }
    let y = (0..n).map(|_| rng.random::<f64>()).collect();
    let a = (0..n).map(|i| (i % 2) as u8).collect();
    Dataset::new(y, a, x, columns, Propensity::Constant(0.5)).unwrap()
}

/// Draws with unit-specific means and spreads, so that group variances differ.
pub fn random_draws(rng: &mut ChaCha8Rng, n: usize, s: usize) -> PosteriorDraws {
    let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sd: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
    let shared: Vec<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows: Vec<Vec<f64>> = (0..s)
        .map(|r| {
            (0..n)
                .map(|i| mean[i] + sd[i] * rng.random_range(-1.0..1.0) + 0.3 * shared[r] * sd[i])
                .collect()
        })
        .collect();
    PosteriorDraws::from_rows(&rows).unwrap()
}

/// Every tree of depth at most `depth` over `splits`, leaves unlabeled.
pub fn all_trees(splits: &[Split], depth: usize) -> Vec<Node<()>> {
    let mut out = vec![Node::Leaf(())];
    if depth == 0 {
        return out;
    }
    let sub = all_trees(splits, depth - 1);
    for s in splits {
        for l in &sub {
            for r in &sub {
                out.push(Node::split(s.clone(), l.clone(), r.clone()));
            }
        }
    }
    out
}

/// Leaf index (left to right) of every row.
pub fn leaf_of<L>(tree: &Node<L>, x: &DMatrix<f64>) -> Vec<usize> {
    fn walk<L>(node: &Node<L>, x: &DMatrix<f64>, row: usize, offset: usize) -> usize {
        match node {
            Node::Leaf(_) => offset,
            Node::Split { rule, left, right } => {
                if rule.goes_left(x, row) {
                    walk(left, x, row, offset)
                } else {
                    walk(right, x, row, offset + left.n_leaves())
                }
            }
        }
    }
    (0..x.nrows()).map(|i| walk(tree, x, i, 0)).collect()
}

/// Group labels renamed by first appearance, so equal partitions compare equal.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&g| {
            let next = map.len();
            *map.entry(g).or_insert(next)
        })
        .collect()
}

pub struct BruteBest {
    pub value: f64,
    /// Canonical labels of every partition within 1e-9 of the best value.
    pub near_best: Vec<Vec<usize>>,
    pub feasible: usize,
}

pub fn brute_force_subgroups(
    draws: &PosteriorDraws,
    d: &Dataset,
    splits: &[Split],
    cfg: &SearchConfig,
) -> BruteBest {
    let mut scored = Vec::new();
    for tree in all_trees(splits, cfg.max_depth) {
        let labels = leaf_of(&tree, d.x());
        let part = Partition::new(labels.clone(), tree.n_leaves()).unwrap();
        if part.sizes().iter().any(|&s| s < cfg.min_leaf) {
            continue;
        }
        let v = expected_utility(draws, &part, cfg.lambda).unwrap().value - cfg.depth_penalty * tree.depth() as f64;
        scored.push((v, canonical_labels(&labels)));
    }
    let value = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    BruteBest {
        value,
        near_best: scored.iter().filter(|s| s.0 >= value - 1e-9).map(|s| s.1.clone()).collect(),
        feasible: scored.len(),
    }
}

/// Best realized score over every tree of depth at most `max_depth` and every
/// treat/control labelling of its leaves.
pub fn brute_force_policy(scores: &[f64], d: &Dataset, splits: &[Split], max_depth: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for shape in all_trees(splits, max_depth) {
        let labels = leaf_of(&shape, d.x());
        for treat_mask in 0..(1u32 << shape.n_leaves()) {
            let v: f64 = (0..scores.len()).filter(|&i| (treat_mask >> labels[i]) & 1 == 1).map(|i| scores[i]).sum();
            best = best.max(v);
        }
    }
    best
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
