//! Distributional checks of the prior forest sampler.

use braids::prior::{sample_prior_forest, DepthLaw, SplitRule, TreePriorConfig};
use braids::ridge::ScalePrior;
use braids::rng::indexed_stream;
use nalgebra::DMatrix;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

fn covariates(n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |i, j| ((i * 7919 + j * 104_729 + 13) % 1009) as f64 / 1009.0 - 0.5)
}

/// Leaf depths of row 0 over `forests × cfg.m_trees` independent trees.
fn depth_counts(cfg: &TreePriorConfig, forests: usize, max_bin: usize) -> Vec<usize> {
    let x = covariates(40, 3);
    let mut counts = vec![0usize; max_bin + 1];
    for f in 0..forests {
        let mut rng = indexed_stream(17, "depth-law", f as u64);
        let draw = sample_prior_forest(&x, cfg, 1.0, &mut rng).unwrap();
        for t in 0..cfg.m_trees {
            counts[(draw.leaf_depth(t, 0) as usize).min(max_bin)] += 1;
        }
    }
    counts
}

/// Pearson statistic and its upper-tail probability.
fn chi_square(counts: &[usize], probs: &[f64]) -> (f64, f64) {
    let total: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat))
}

#[test]
fn poisson_law_gives_poisson_leaf_depths() {
    let cfg = TreePriorConfig { depth_law: DepthLaw::Poisson { mean: 1.2 }, ..TreePriorConfig::default() };
    let max_bin = 5;
    let counts = depth_counts(&cfg, 2000, max_bin);
    let pois = Poisson::new(1.2).unwrap();
    let mut probs: Vec<f64> = (0..max_bin as u64).map(|k| pois.pmf(k)).collect();
    probs.push(1.0 - probs.iter().sum::<f64>());
    let (stat, p) = chi_square(&counts, &probs);
    assert!(p > 0.01, "chi-square {stat:.2}, p = {p:.4}, counts {counts:?}");
}

#[test]
fn chipman_law_gives_its_depth_distribution() {
    let (alpha, beta) = (0.95, 2.0);
    let cfg = TreePriorConfig { depth_law: DepthLaw::Chipman { alpha, beta }, ..TreePriorConfig::default() };
    let max_bin = 4;
    let counts = depth_counts(&cfg, 1000, max_bin);
    let mut probs = Vec::new();
    let mut reach = 1.0;
    for d in 0..max_bin {
        let split = alpha / (1.0 + d as f64).powf(beta);
        probs.push(reach * (1.0 - split));
        reach *= split;
    }
    probs.push(reach);
    let (stat, p) = chi_square(&counts, &probs);
    assert!(p > 0.01, "chi-square {stat:.2}, p = {p:.4}, counts {counts:?}");
}

#[test]
fn uniform_splits_depend_only_on_ranks() {
    let x = covariates(60, 4);
    let warped = x.map(|v| (3.0 * v).exp() - 7.0);
    let cfg = TreePriorConfig::default();
    for seed in 0..20 {
        let a = sample_prior_forest(&x, &cfg, 1.0, &mut indexed_stream(seed, "warp", 0)).unwrap();
        let b = sample_prior_forest(&warped, &cfg, 1.0, &mut indexed_stream(seed, "warp", 0)).unwrap();
        assert_eq!(a.leaves, b.leaves);
        assert_eq!(a.tau, b.tau);
    }
}

#[test]
fn leaf_values_scale_with_sigma_tau() {
    let x = covariates(30, 2);
    let cfg = TreePriorConfig { m_trees: 10, sigma_tau: ScalePrior::Fixed(1.0), split_rule: SplitRule::Median, ..TreePriorConfig::default() };
    let a = sample_prior_forest(&x, &cfg, 1.0, &mut indexed_stream(5, "scale", 0)).unwrap();
    let b = sample_prior_forest(&x, &cfg, 2.5, &mut indexed_stream(5, "scale", 0)).unwrap();
    for (u, v) in a.tau.iter().zip(&b.tau) {
        assert!((2.5 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
    }
}

#[test]
fn zero_mean_depth_law_never_splits() {
    let cfg = TreePriorConfig { depth_law: DepthLaw::Poisson { mean: 0.0 }, ..TreePriorConfig::default() };
    let counts = depth_counts(&cfg, 20, 3);
    assert_eq!(counts[0], 20 * cfg.m_trees);
}
