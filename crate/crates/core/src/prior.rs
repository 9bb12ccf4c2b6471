//! Exact simulation from the sum-of-trees heterogeneity prior.
//!
//! A forest of `m` trees is grown independently of the outcomes: a node at
//! depth `d` splits with probability `p(d)` set by the depth law, on a column
//! chosen uniformly, at a cutpoint drawn from the rows in the node. Leaves
//! carry `Normal(0, στ²/m)` values and `τ*(x)` is the sum over trees.
//!
//! When every unit's leaf depth is `Poisson(λ)` and cutpoints fall uniformly
//! between the sorted node values, two units are separated by each split with
//! probability 1/3, so
//!
//! ```text
//! E(H²) = στ² {1 − E(2/3)^K} = στ² (1 − e^{−λ/3})
//! ```
//!
//! For median cutpoints the separation probability is 1/2 and the exponent
//! becomes `−λ/2`; for a geometric depth law with continuation probability `α`
//! it is `στ² α / (3 − 2α)`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ridge::ScalePrior;
use crate::rng::{indexed_stream, Rng};

/// Trees stop growing at this depth regardless of the depth law.
pub const MAX_TREE_DEPTH: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "law")]
pub enum DepthLaw {
    /// Leaf depth of every unit is Poisson with this mean.
    Poisson { mean: f64 },
    /// Split probability `α / (1 + d)^β`.
    Chipman { alpha: f64, beta: f64 },
}

impl DepthLaw {
    /// Probability that a node at depth `d` splits.
    pub fn split_prob(&self, d: usize) -> f64 {
        match *self {
            // P(Z > d | Z ≥ d) for Z ~ Poisson(mean)
            DepthLaw::Poisson { mean } => {
                if mean <= 0.0 {
                    return 0.0;
                }
                let mut pmf = (-mean).exp();
                let mut cdf = pmf;
                for k in 1..=d {
                    pmf *= mean / k as f64;
                    cdf += pmf;
                }
                let at_least = 1.0 - (cdf - pmf);
                if at_least <= 0.0 {
                    // far tail: the hazard of a Poisson tends to zero
                    return 0.0;
                }
                ((at_least - pmf) / at_least).clamp(0.0, 1.0)
            }
            DepthLaw::Chipman { alpha, beta } => alpha / (1.0 + d as f64).powf(beta),
        }
    }

    /// Mean leaf depth of a unit.
    pub fn mean_leaf_depth(&self) -> f64 {
        match *self {
            DepthLaw::Poisson { mean } => mean,
            DepthLaw::Chipman { alpha, beta } => mean_leaf_depth_chipman(alpha, beta, MAX_TREE_DEPTH).0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DepthLaw::Poisson { mean } if mean >= 0.0 && mean.is_finite() => Ok(()),
            DepthLaw::Chipman { alpha, beta } if alpha > 0.0 && alpha < 1.0 && beta >= 0.0 && beta.is_finite() => Ok(()),
            _ => Err(Error::invalid(format!("invalid depth law {self:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRule {
    /// Cutpoint in one of the `n + 1` gaps of the node's sorted values, each
    /// with probability `1/(n + 1)`; the two outer gaps send every row to one side.
    Uniform,
    /// Cutpoint at the median of the node's values.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreePriorConfig {
    pub depth_law: DepthLaw,
    pub split_rule: SplitRule,
    pub m_trees: usize,
    pub sigma_tau: ScalePrior,
}

impl Default for TreePriorConfig {
    fn default() -> Self {
        TreePriorConfig {
            depth_law: DepthLaw::Poisson { mean: 1.2 },
            split_rule: SplitRule::Uniform,
            m_trees: 50,
            sigma_tau: ScalePrior::Fixed(1.0),
        }
    }
}

impl TreePriorConfig {
    pub fn validate(&self) -> Result<()> {
        self.depth_law.validate()?;
        if self.m_trees == 0 {
            return Err(Error::invalid("m_trees must be at least 1"));
        }
        match self.sigma_tau {
            ScalePrior::Fixed(v) if v >= 0.0 && v.is_finite() => Ok(()),
            ScalePrior::Exponential { scale } if scale > 0.0 && scale.is_finite() => Ok(()),
            other => Err(Error::invalid(format!("invalid sigma_tau {other:?}"))),
        }
    }
}

/// One prior draw of the forest evaluated at every row.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestDraw {
    pub tau: Vec<f64>,
    /// `depths[t * n + i]` is the depth of the leaf of tree `t` holding row `i`.
    pub depths: Vec<u8>,
    /// `leaves[t * n + i]` identifies that leaf within tree `t`.
    pub leaves: Vec<u32>,
    pub n_rows: usize,
}

impl ForestDraw {
    pub fn leaf_depth(&self, tree: usize, row: usize) -> u8 {
        self.depths[tree * self.n_rows + row]
    }

    pub fn same_leaf(&self, tree: usize, i: usize, j: usize) -> bool {
        self.leaves[tree * self.n_rows + i] == self.leaves[tree * self.n_rows + j]
    }
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    law: DepthLaw,
    rule: SplitRule,
    leaf_sd: f64,
    next_leaf: u32,
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize, rng: &mut Rng, tau: &mut [f64], depths: &mut [u8], leaves: &mut [u32]) {
        let may_split = depth < MAX_TREE_DEPTH && self.x.ncols() > 0 && (self.rule == SplitRule::Uniform || rows.len() >= 2);
        let split = may_split && rng.random::<f64>() < self.law.split_prob(depth);
        if !split {
            let z: f64 = rng.sample(StandardNormal);
            let v = self.leaf_sd * z;
            let id = self.next_leaf;
            self.next_leaf += 1;
            for &r in &rows {
                tau[r] += v;
                depths[r] = depth as u8;
                leaves[r] = id;
            }
            return;
        }
        let j = rng.random_range(0..self.x.ncols());
        let mut vals: Vec<f64> = rows.iter().map(|&r| self.x[(r, j)]).collect();
        let n = vals.len();
        // order statistics k − 1 and k (0-based) by selection
        let mut pair = |k: usize| {
            let (below, kth, _) = vals.select_nth_unstable_by(k, f64::total_cmp);
            let prev = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (prev, *kth)
        };
        let threshold = match self.rule {
            SplitRule::Uniform => {
                let g = rng.random_range(0..=n);
                if g == 0 {
                    f64::NEG_INFINITY
                } else if g == n {
                    f64::INFINITY
                } else {
                    let (a, b) = pair(g);
                    0.5 * (a + b)
                }
            }
            SplitRule::Median => {
                let (a, b) = pair(n / 2);
                if n % 2 == 1 {
                    b
                } else {
                    0.5 * (a + b)
                }
            }
        };
        let (left, right): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&r| self.x[(r, j)] <= threshold);
        self.grow(left, depth + 1, rng, tau, depths, leaves);
        self.grow(right, depth + 1, rng, tau, depths, leaves);
    }
}

/// Draw `τ*` from the prior with leaf scale `sigma_tau / √m` and evaluate it
/// at every row of `x`.
pub fn sample_prior_forest(x: &DMatrix<f64>, cfg: &TreePriorConfig, sigma_tau: f64, rng: &mut Rng) -> Result<ForestDraw> {
    cfg.validate()?;
    if x.nrows() < 2 {
        return Err(Error::invalid("at least 2 rows are needed"));
    }
    if !(sigma_tau >= 0.0 && sigma_tau.is_finite()) {
        return Err(Error::invalid("sigma_tau must be finite and nonnegative"));
    }
    let n = x.nrows();
    let m = cfg.m_trees;
    let mut tau = vec![0.0; n];
    let mut depths = vec![0u8; n * m];
    let mut leaves = vec![0u32; n * m];
    let mut grower = Grower {
        x,
        law: cfg.depth_law,
        rule: cfg.split_rule,
        leaf_sd: sigma_tau / (m as f64).sqrt(),
        next_leaf: 0,
    };
    for t in 0..m {
        grower.next_leaf = 0;
        grower.grow(
            (0..n).collect(),
            0,
            rng,
            &mut tau,
            &mut depths[t * n..(t + 1) * n],
            &mut leaves[t * n..(t + 1) * n],
        );
    }
    Ok(ForestDraw {
        tau,
        depths,
        leaves,
        n_rows: n,
    })
}

/// `H = √Var_emp(τ*)` (denominator `N`) and `M = max_i |τ*_i − mean|`.
pub fn heterogeneity(tau: &[f64]) -> (f64, f64) {
    let n = tau.len() as f64;
    let m = tau.iter().sum::<f64>() / n;
    let var = tau.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n;
    let max = tau.iter().map(|t| (t - m).abs()).fold(0.0, f64::max);
    (var.sqrt(), max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneitySample {
    pub h: Vec<f64>,
    pub m: Vec<f64>,
    pub sigma_tau: Vec<f64>,
    pub mean_h2: f64,
    pub mc_se_h2: f64,
}

impl HeterogeneitySample {
    /// Histogram of `H` and `M` on a shared set of `bins` equal-width bins.
    pub fn write_histogram(&self, path: &Path, bins: usize) -> Result<()> {
        let bins = bins.max(1);
        let hi = self.h.iter().chain(&self.m).fold(0.0, |a: f64, &b| a.max(b));
        let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed(e.to_string()))?;
        let err = |e: csv::Error| Error::Malformed(e.to_string());
        w.write_record(["series", "bin_lo", "bin_hi", "count", "density"]).map_err(err)?;
        for (name, values) in [("H", &self.h), ("M", &self.m)] {
            let mut counts = vec![0usize; bins];
            for &v in values.iter() {
                counts[((v / width) as usize).min(bins - 1)] += 1;
            }
            for (b, &c) in counts.iter().enumerate() {
                let dens = c as f64 / (values.len() as f64 * width);
                w.write_record(&[
                    name.to_string(),
                    (b as f64 * width).to_string(),
                    ((b + 1) as f64 * width).to_string(),
                    c.to_string(),
                    dens.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Monte Carlo over independent prior draws (στ drawn from its prior for
/// each sample), in parallel with one derived stream per sample.
pub fn prior_heterogeneity_mc(x: &DMatrix<f64>, cfg: &TreePriorConfig, n_samples: usize, seed: u64) -> Result<HeterogeneitySample> {
    cfg.validate()?;
    if n_samples < 100 {
        return Err(Error::invalid("at least 100 prior samples are required"));
    }
    let results: Vec<(f64, f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = indexed_stream(seed, "prior-forest", s as u64);
            let sigma = cfg.sigma_tau.sample(&mut rng);
            let draw = sample_prior_forest(x, cfg, sigma, &mut rng)?;
            let (h, m) = heterogeneity(&draw.tau);
            Ok((h, m, sigma))
        })
        .collect::<Result<_>>()?;
    let h: Vec<f64> = results.iter().map(|r| r.0).collect();
    let m: Vec<f64> = results.iter().map(|r| r.1).collect();
    let sigma_tau: Vec<f64> = results.iter().map(|r| r.2).collect();
    let n = n_samples as f64;
    let h2: Vec<f64> = h.iter().map(|v| v * v).collect();
    let mean_h2 = h2.iter().sum::<f64>() / n;
    let var = h2.iter().map(|v| (v - mean_h2).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(HeterogeneitySample {
        h,
        m,
        sigma_tau,
        mean_h2,
        mc_se_h2: (var / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosedFormVariant {
    Uniform,
    Median,
}

/// `στ² (1 − e^{−λ/3})` or, for median cutpoints, `στ² (1 − e^{−λ/2})`.
pub fn theorem3_closed_form(sigma_tau: f64, mean_leaf_depth: f64, variant: ClosedFormVariant) -> Result<f64> {
    if sigma_tau < 0.0 || mean_leaf_depth < 0.0 || !sigma_tau.is_finite() || !mean_leaf_depth.is_finite() {
        return Err(Error::invalid("sigma_tau and the mean leaf depth must be nonnegative"));
    }
    let rate = match variant {
        ClosedFormVariant::Uniform => 3.0,
        ClosedFormVariant::Median => 2.0,
    };
    Ok(sigma_tau * sigma_tau * (1.0 - (-mean_leaf_depth / rate).exp()))
}

/// `στ² α / (3 − 2α)` for a geometric depth law; requires `0 < α ≤ 0.5`.
pub fn geometric_variant_closed_form(sigma_tau: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::invalid(format!("alpha = {alpha} is outside (0, 0.5]")));
    }
    Ok(sigma_tau * sigma_tau * alpha / (3.0 - 2.0 * alpha))
}

/// Mean leaf depth of a unit when nodes at depth `d` split with probability
/// `α / (1 + d)^β`, with trees cut off at `max_depth`. Returns the mean and
/// the probability mass that the cutoff removed.
pub fn mean_leaf_depth_chipman(alpha: f64, beta: f64, max_depth: usize) -> (f64, f64) {
    let mut reach = 1.0;
    let mut mean = 0.0;
    for d in 0..max_depth {
        reach *= alpha / (1.0 + d as f64).powf(beta);
        mean += reach;
    }
    let tail = reach * alpha / (1.0 + max_depth as f64).powf(beta);
    (mean, tail)
}

/// Closed form, MC estimate and its standard error side by side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mean_leaf_depth: f64,
    pub closed_form: f64,
    pub mc_mean_h2: f64,
    pub mc_se: f64,
    /// `(MC − closed form) / MC-SE`
    pub z: f64,
}

/// Compare the MC mean of `H²` with the closed form matching `cfg`.
pub fn calibration_report(cfg: &TreePriorConfig, sample: &HeterogeneitySample) -> Result<CalibrationReport> {
    let lambda = cfg.depth_law.mean_leaf_depth();
    let variant = match cfg.split_rule {
        SplitRule::Uniform => ClosedFormVariant::Uniform,
        SplitRule::Median => ClosedFormVariant::Median,
    };
    let sigma2 = cfg.sigma_tau.second_moment();
    let closed_form = theorem3_closed_form(sigma2.sqrt(), lambda, variant)?;
    Ok(CalibrationReport {
        mean_leaf_depth: lambda,
        closed_form,
        mc_mean_h2: sample.mean_h2,
        mc_se: sample.mc_se_h2,
        z: (sample.mean_h2 - closed_form) / sample.mc_se_h2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn grid(n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |i, j| ((i * 7919 + j * 104_729) % 1009) as f64 / 1009.0)
    }

    #[test]
    fn closed_forms() {
        let v = theorem3_closed_form(1.0, 1.2, ClosedFormVariant::Uniform).unwrap();
        assert!((v - 0.3297).abs() < 1e-4);
        let v = theorem3_closed_form(1.0, 1.2, ClosedFormVariant::Median).unwrap();
        assert!((v - 0.4512).abs() < 1e-4);
        assert_eq!(theorem3_closed_form(2.0, 0.0, ClosedFormVariant::Uniform).unwrap(), 0.0);
        assert_eq!(geometric_variant_closed_form(1.0, 0.5).unwrap(), 0.25);
        assert!(geometric_variant_closed_form(1.0, 1e-12).unwrap() < 1e-12);
        assert!(geometric_variant_closed_form(1.0, 0.6).is_err());
    }

    #[test]
    fn chipman_mean_depths() {
        let (l, tail) = mean_leaf_depth_chipman(0.95, 2.0, 10);
        assert!((l - 1.20).abs() < 0.005, "{l}");
        assert!(tail < 1e-6);
        let (l, _) = mean_leaf_depth_chipman(0.25, 3.0, 10);
        assert!((l / 3.0 - 0.086).abs() < 5e-4, "{l}");
        let (l, _) = mean_leaf_depth_chipman(0.4, 0.0, 60);
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_hazard_reproduces_pmf() {
        let law = DepthLaw::Poisson { mean: 1.2 };
        let mut reach = 1.0;
        let mut pmf = (-1.2f64).exp();
        for d in 0..12 {
            let stop = reach * (1.0 - law.split_prob(d));
            assert!((stop - pmf).abs() < 1e-12, "depth {d}");
            reach *= law.split_prob(d);
            pmf *= 1.2 / (d + 1) as f64;
        }
    }

    #[test]
    fn degenerate_priors() {
        let x = grid(50, 3);
        let cfg = TreePriorConfig::default();
        let draw = sample_prior_forest(&x, &cfg, 0.0, &mut stream(1, "t")).unwrap();
        assert!(draw.tau.iter().all(|&t| t == 0.0));
        let flat = TreePriorConfig {
            depth_law: DepthLaw::Poisson { mean: 0.0 },
            ..cfg
        };
        let draw = sample_prior_forest(&x, &flat, 1.0, &mut stream(1, "t")).unwrap();
        assert!(draw.depths.iter().all(|&d| d == 0));
        assert!(heterogeneity(&draw.tau).0 < 1e-12);
    }

    #[test]
    fn median_split_halves_node() {
        let x = grid(64, 1);
        let cfg = TreePriorConfig {
            depth_law: DepthLaw::Chipman { alpha: 0.999_999, beta: 0.0 },
            split_rule: SplitRule::Median,
            m_trees: 1,
            sigma_tau: ScalePrior::Fixed(1.0),
        };
        // nearly always splits, so a 64-row node ends in singletons at depth 6
        let draw = sample_prior_forest(&x, &cfg, 1.0, &mut stream(3, "m")).unwrap();
        assert!(draw.depths.iter().all(|&d| d == 6), "{:?}", draw.depths);
    }

    #[test]
    fn h_scales_with_sigma() {
        let x = grid(40, 2);
        let cfg = TreePriorConfig::default();
        let a = sample_prior_forest(&x, &cfg, 1.0, &mut stream(9, "s")).unwrap();
        let b = sample_prior_forest(&x, &cfg, 3.0, &mut stream(9, "s")).unwrap();
        let (ha, ma) = heterogeneity(&a.tau);
        let (hb, mb) = heterogeneity(&b.tau);
        assert!((hb - 3.0 * ha).abs() < 1e-12 * (1.0 + hb));
        assert!((mb - 3.0 * ma).abs() < 1e-12 * (1.0 + mb));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let x = grid(10, 1);
        assert!(prior_heterogeneity_mc(&x, &TreePriorConfig::default(), 10, 0).is_err());
    }
}
