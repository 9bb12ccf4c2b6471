//! Synthetic data-generating processes and the simulation experiments.
//!
//! Every replication derives its own random stream from the root seed and
//! its index, so reports are bit-identical for a given `(config, seed)`
//! whatever the thread count.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutpoints::build_cutpoints;
use crate::data::{standardize, Covariate, Dataset, Propensity};
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::inference::{aipw_by_group, aipw_subgroup, partition_summary};
use crate::ridge::{fit_ridge, predict_arms, FeatureMap, LinearFeatures, McmcConfig, NoisePrior, RidgePrior, ScalePrior};
use crate::rng::{derive_indexed, derive_seed, stream, Rng};
use crate::rules::{extract_rules, fit_rule_bcf, RuleConfig};
use crate::search::{search_greedy_rn, SearchConfig, SearchMode};
use crate::tree::{Node, Partition, Split, SubgroupTree};

/// A function of the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Surface {
    Constant { value: f64 },
    /// `intercept + Σ_j coefs[j] · x_j` over the leading columns.
    Linear { intercept: f64, coefs: Vec<f64> },
    /// Piecewise constant with these leaf values.
    Tree { root: Node<f64> },
    Sum { terms: Vec<Surface> },
}

impl Surface {
    pub fn eval(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        match self {
            Surface::Constant { value } => *value,
            Surface::Linear { intercept, coefs } => intercept + coefs.iter().enumerate().map(|(j, c)| c * x[(row, j)]).sum::<f64>(),
            Surface::Tree { root } => *root.leaf_for(x, row),
            Surface::Sum { terms } => terms.iter().map(|t| t.eval(x, row)).sum(),
        }
    }

    fn max_column(&self) -> Option<usize> {
        match self {
            Surface::Constant { .. } => None,
            Surface::Linear { coefs, .. } => coefs.len().checked_sub(1),
            Surface::Tree { root } => root.splits_preorder().iter().map(|s| s.column()).max(),
            Surface::Sum { terms } => terms.iter().filter_map(Surface::max_column).max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDgp {
    /// Number of continuous covariates, standard normal with common correlation `rho`.
    pub p: usize,
    pub rho: f64,
    /// Level counts of uniformly distributed categorical covariates placed after the continuous ones.
    #[serde(default)]
    pub categorical: Vec<usize>,
    pub mu: Surface,
    pub tau: Surface,
    #[serde(default = "default_treat_prob")]
    pub treat_prob: f64,
    pub sigma: f64,
}

fn default_treat_prob() -> f64 {
    0.2
}

fn threshold(column: usize, t: f64) -> Split {
    Split::Threshold { column, threshold: t }
}

impl SyntheticDgp {
    /// Twenty correlated covariates; `τ` linear in all of them with slopes
    /// `±0.03`.
    pub fn linear(sigma: f64) -> Self {
        Self::dense(20, 0.03, sigma)
    }

    /// Ten independent covariates; `τ` a depth-2 step function of the first two.
    pub fn tree(sigma: f64) -> Self {
        let leaf = |v: f64| Node::Leaf(v);
        SyntheticDgp {
            p: 10,
            rho: 0.0,
            categorical: vec![],
            mu: Surface::Linear {
                intercept: 1.0,
                coefs: vec![0.5, -0.5, 0.25, 0.25],
            },
            tau: Surface::Tree {
                root: Node::split(
                    threshold(0, 0.0),
                    Node::split(threshold(1, 0.0), leaf(0.0), leaf(0.5)),
                    Node::split(threshold(1, 0.0), leaf(1.0), leaf(1.5)),
                ),
            },
            treat_prob: 0.2,
            sigma,
        }
    }

    /// `p` correlated covariates, each shifting `τ` by `±tau_scale` per unit
    /// with alternating signs.
    pub fn dense(p: usize, tau_scale: f64, sigma: f64) -> Self {
        SyntheticDgp {
            p,
            rho: 0.3,
            categorical: vec![],
            mu: Surface::Linear {
                intercept: 1.0,
                coefs: vec![0.5, -0.5, 0.25, 0.25],
            },
            tau: Surface::Linear {
                intercept: 0.5,
                coefs: (0..p).map(|j| if j % 2 == 0 { tau_scale } else { -tau_scale }).collect(),
            },
            treat_prob: 0.2,
            sigma,
        }
    }

    /// `τ(x) = 1{x1 > 0}`.
    pub fn step(p: usize, sigma: f64) -> Self {
        SyntheticDgp {
            p,
            rho: 0.0,
            categorical: vec![],
            mu: Surface::Linear {
                intercept: 0.0,
                coefs: vec![0.5],
            },
            tau: Surface::Tree {
                root: Node::split(threshold(0, 0.0), Node::Leaf(0.0), Node::Leaf(1.0)),
            },
            treat_prob: 0.5,
            sigma,
        }
    }

    /// Constant effect.
    pub fn homogeneous(p: usize, tau: f64, sigma: f64) -> Self {
        SyntheticDgp {
            p,
            rho: 0.0,
            categorical: vec![],
            mu: Surface::Linear {
                intercept: 0.0,
                coefs: vec![0.5],
            },
            tau: Surface::Constant { value: tau },
            treat_prob: 0.2,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("noise sd must be positive"));
        }
        if !(self.treat_prob > 0.0 && self.treat_prob < 1.0) {
            return Err(Error::invalid("treatment probability must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid("rho must lie in [0, 1)"));
        }
        if self.categorical.iter().any(|&l| l < 2 || l > crate::data::MAX_LEVELS) {
            return Err(Error::invalid("categorical covariates need between 2 and 64 levels"));
        }
        let width = self.p + self.categorical.len();
        for s in [&self.mu, &self.tau] {
            if s.max_column().is_some_and(|j| j >= width) {
                return Err(Error::invalid("surface references a covariate the DGP does not generate"));
            }
        }
        Ok(())
    }

    fn columns(&self) -> Vec<Covariate> {
        let mut cols: Vec<Covariate> = (0..self.p).map(|j| Covariate::continuous(format!("x{}", j + 1))).collect();
        cols.extend(
            self.categorical
                .iter()
                .enumerate()
                .map(|(j, &l)| Covariate::categorical(format!("f{}", j + 1), l)),
        );
        cols
    }

    fn covariates(&self, n: usize, rng: &mut Rng) -> DMatrix<f64> {
        let width = self.p + self.categorical.len();
        let (a, b) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        let mut x = DMatrix::zeros(n, width);
        for i in 0..n {
            let common: f64 = rng.sample(StandardNormal);
            for j in 0..self.p {
                let z: f64 = rng.sample(StandardNormal);
                x[(i, j)] = a * common + b * z;
            }
            for (k, &levels) in self.categorical.iter().enumerate() {
                x[(i, self.p + k)] = rng.random_range(0..levels) as f64;
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub tau: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Draw `n` units. Treatment is Bernoulli(`treat_prob`), recorded as a known
/// constant propensity.
pub fn generate(dgp: &SyntheticDgp, n: usize, seed: u64) -> Result<(Dataset, Truth)> {
    dgp.validate()?;
    if n < 2 {
        return Err(Error::invalid("at least 2 units are required"));
    }
    let mut rng = stream(seed, "dgp");
    let x = dgp.covariates(n, &mut rng);
    let mut y = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut truth = Truth {
        tau: Vec::with_capacity(n),
        mu: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mu = dgp.mu.eval(&x, i);
        let tau = dgp.tau.eval(&x, i);
        let treated = rng.random::<f64>() < dgp.treat_prob;
        let z: f64 = rng.sample(StandardNormal);
        y.push(mu + if treated { tau } else { 0.0 } + dgp.sigma * z);
        a.push(treated as u8);
        truth.mu.push(mu);
        truth.tau.push(tau);
    }
    let d = Dataset::new(y, a, x, dgp.columns(), Propensity::Constant(dgp.treat_prob))?;
    Ok((d, truth))
}

// ---------------------------------------------------------------------------
// Fitters

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fitter {
    #[serde(rename = "ridge")]
    Ridge,
    #[serde(rename = "flat-linear")]
    FlatLinear,
    #[serde(rename = "rule-bcf")]
    RuleBcf,
}

impl Fitter {
    pub fn name(self) -> &'static str {
        match self {
            Fitter::Ridge => "ridge",
            Fitter::FlatLinear => "flat-linear",
            Fitter::RuleBcf => "rule-bcf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(Fitter::Ridge),
            "flat-linear" => Ok(Fitter::FlatLinear),
            "rule-bcf" => Ok(Fitter::RuleBcf),
            other => Err(Error::invalid(format!("unknown fitter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_fit: usize,
    pub n_holdout: usize,
    pub reps: usize,
    pub alpha: f64,
    pub mcmc: McmcConfig,
    pub search: SearchConfig,
    pub rules: RuleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_fit: 1000,
            n_holdout: 500,
            reps: 100,
            alpha: 0.05,
            mcmc: McmcConfig {
                n_draws: 1000,
                n_burn: 500,
                thin: 1,
                seed: 0,
            },
            search: SearchConfig {
                max_depth: 2,
                min_leaf: 50,
                mode: SearchMode::Greedy,
                lambda: 1.0,
                depth_penalty: 0.0,
            },
            rules: RuleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::invalid("at least 2 replications are required"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        self.mcmc.validate()?;
        self.search.validate()?;
        self.rules.validate()
    }
}

/// A fit on standardized data with effects reported in outcome units.
pub struct Fitted {
    pub draws: PosteriorDraws,
    features: Box<dyn FeatureMap + Send + Sync>,
    recipe: crate::data::StandardizationRecipe,
    std_draws: PosteriorDraws,
}

impl Fitted {
    /// Posterior-mean arm predictions on new units, in outcome units.
    pub fn predict_arms(&self, d: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
        let ds = self.recipe.apply(d)?;
        let (m0, m1) = predict_arms(&self.std_draws, self.features.as_ref(), &ds, false)?;
        let back = |v: Vec<f64>| v.into_iter().map(|m| self.recipe.invert_y(m)).collect();
        Ok((back(m0), back(m1)))
    }
}

pub fn fit_method(fitter: Fitter, d: &Dataset, mcmc: &McmcConfig, rules: &RuleConfig, seed: u64) -> Result<Fitted> {
    let (ds, recipe) = standardize(d)?;
    let mcmc = McmcConfig {
        seed: derive_seed(seed, "mcmc"),
        ..*mcmc
    };
    let (std_draws, features): (PosteriorDraws, Box<dyn FeatureMap + Send + Sync>) = match fitter {
        Fitter::Ridge => (fit_ridge(&ds, &RidgePrior::default(), &mcmc, false)?, Box::new(LinearFeatures::from_dataset(&ds))),
        Fitter::FlatLinear => (
            fit_ridge(&ds, &RidgePrior::flat_linear(), &mcmc, false)?,
            Box::new(LinearFeatures::from_dataset(&ds)),
        ),
        Fitter::RuleBcf => {
            let basis = extract_rules(&ds, rules, derive_seed(seed, "rules"))?;
            (fit_rule_bcf(&ds, &basis, &RidgePrior::default(), &mcmc, false)?, Box::new(basis))
        }
    };
    Ok(Fitted {
        draws: std_draws.rescale(recipe.y_scale),
        features,
        recipe,
        std_draws,
    })
}

// ---------------------------------------------------------------------------
// Reports

/// Mean with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = compensated_sum(values.iter().copied()) / n as f64;
        let se = if n > 1 {
            (compensated_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Some(Stat { mean, se, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub covered: usize,
    pub total: usize,
    pub rate: f64,
    /// Binomial standard error at the observed rate.
    pub se: f64,
}

impl Coverage {
    pub fn from_counts(covered: usize, total: usize) -> Self {
        let rate = if total > 0 { covered as f64 / total as f64 } else { f64::NAN };
        Coverage {
            covered,
            total,
            rate,
            se: (rate * (1.0 - rate) / total as f64).sqrt(),
        }
    }

    /// Distance from `target` in units of the binomial SE at `target`.
    pub fn z_at(&self, target: f64) -> f64 {
        (self.rate - target) / (target * (1.0 - target) / self.total as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub size: usize,
    pub truth: f64,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub method: String,
    pub cate_mse: Option<f64>,
    /// Truth-scored risk-neutral utility of the selected partition, relative to the pooled partition.
    pub realized_utility: Option<f64>,
    pub groups: Vec<GroupRecord>,
    /// Selected groups left out (empty or singleton holdout cell).
    pub skipped_groups: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub cate_mse: Option<Stat>,
    pub realized_utility: Option<Stat>,
    pub coverage: Option<Coverage>,
    pub width: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub seed: u64,
    pub reps: usize,
    pub dgp: SyntheticDgp,
    pub config: ExperimentConfig,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<RepRecord>,
}

impl ExperimentReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Mean and SE of the per-rep difference `metric(a) − metric(b)` over reps
    /// where both methods succeeded.
    pub fn paired(&self, a: &str, b: &str, metric: impl Fn(&RepRecord) -> Option<f64>) -> Option<Stat> {
        let diffs: Vec<f64> = (0..self.reps)
            .filter_map(|r| {
                let find = |m: &str| self.records.iter().find(|x| x.rep == r && x.method == m);
                Some(metric(find(a)?)? - metric(find(b)?)?)
            })
            .collect();
        Stat::of(&diffs)
    }

    /// `summary.csv`, `reps.csv` and `widths.csv` plus `report.json` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let err = |e: csv::Error| Error::Malformed(e.to_string());
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());

        let path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record([
            "method", "n_ok", "n_failed", "cate_mse", "cate_mse_se", "realized_utility", "realized_utility_se", "coverage", "coverage_se",
            "groups", "mean_width", "mean_width_se",
        ])
        .map_err(err)?;
        for s in &self.summaries {
            w.write_record(&[
                s.method.clone(),
                s.n_ok.to_string(),
                s.n_failed.to_string(),
                opt(s.cate_mse.map(|v| v.mean)),
                opt(s.cate_mse.map(|v| v.se)),
                opt(s.realized_utility.map(|v| v.mean)),
                opt(s.realized_utility.map(|v| v.se)),
                opt(s.coverage.map(|v| v.rate)),
                opt(s.coverage.map(|v| v.se)),
                s.coverage.map_or(String::new(), |v| v.total.to_string()),
                opt(s.width.map(|v| v.mean)),
                opt(s.width.map(|v| v.se)),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("reps.csv");
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(["rep", "seed", "method", "cate_mse", "realized_utility", "groups", "covered", "skipped_groups", "error"])
            .map_err(err)?;
        for r in &self.records {
            w.write_record(&[
                r.rep.to_string(),
                r.seed.to_string(),
                r.method.clone(),
                opt(r.cate_mse),
                opt(r.realized_utility),
                r.groups.len().to_string(),
                r.groups.iter().filter(|g| g.covered).count().to_string(),
                r.skipped_groups.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("widths.csv");
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(["method", "rep", "size", "width", "covered"]).map_err(err)?;
        for r in &self.records {
            for g in &r.groups {
                w.write_record(&[
                    r.method.clone(),
                    r.rep.to_string(),
                    g.size.to_string(),
                    (g.hi - g.lo).to_string(),
                    g.covered.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Malformed(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

fn summarize(methods: &[String], records: &[RepRecord]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|m| {
            let mine: Vec<&RepRecord> = records.iter().filter(|r| &r.method == m).collect();
            let ok: Vec<&RepRecord> = mine.iter().copied().filter(|r| r.error.is_none()).collect();
            let mse: Vec<f64> = ok.iter().filter_map(|r| r.cate_mse).collect();
            let util: Vec<f64> = ok.iter().filter_map(|r| r.realized_utility).collect();
            let groups: Vec<&GroupRecord> = ok.iter().flat_map(|r| &r.groups).collect();
            let widths: Vec<f64> = groups.iter().map(|g| g.hi - g.lo).collect();
            MethodSummary {
                method: m.clone(),
                n_ok: ok.len(),
                n_failed: mine.len() - ok.len(),
                cate_mse: Stat::of(&mse),
                realized_utility: Stat::of(&util),
                coverage: (!groups.is_empty()).then(|| Coverage::from_counts(groups.iter().filter(|g| g.covered).count(), groups.len())),
                width: Stat::of(&widths),
            }
        })
        .collect()
}

fn group_truth(truth: &[f64], part: &Partition) -> Vec<f64> {
    (0..part.k())
        .map(|k| {
            let m = part.members(k);
            m.iter().map(|&i| truth[i]).sum::<f64>() / m.len().max(1) as f64
        })
        .collect()
}

/// `[Σ_i (τ0_i − τ̄0)² − Σ_i (τ0_i − τ0(G_(i)))²] / N`: how much of the true
/// heterogeneity the partition captures.
pub fn realized_utility(truth: &[f64], part: &Partition) -> f64 {
    let n = truth.len() as f64;
    let overall = truth.iter().sum::<f64>() / n;
    let g = group_truth(truth, part);
    let sst: f64 = truth.iter().map(|t| (t - overall).powi(2)).sum();
    let within: f64 = truth.iter().zip(part.groups()).map(|(t, &k)| (t - g[k]).powi(2)).sum();
    (sst - within) / n
}

fn detect(tau_hat: &[f64], d: &Dataset, cfg: &ExperimentConfig) -> Result<SubgroupTree> {
    let grid = build_cutpoints(d, cfg.search.min_leaf, 64);
    let search = SearchConfig {
        mode: SearchMode::Greedy,
        lambda: 1.0,
        ..cfg.search
    };
    search_greedy_rn(tau_hat, d, &grid, &search)
}

fn failed(rep: usize, seed: u64, method: &str, e: Error) -> RepRecord {
    RepRecord {
        rep,
        seed,
        method: method.to_string(),
        cate_mse: None,
        realized_utility: None,
        groups: vec![],
        skipped_groups: 0,
        error: Some(e.to_string()),
    }
}

fn utility_rep(dgp: &SyntheticDgp, methods: &[Fitter], cfg: &ExperimentConfig, rep: usize, root: u64) -> Vec<RepRecord> {
    let seed = derive_indexed(root, "rep", rep as u64);
    let (d, truth) = match generate(dgp, cfg.n_fit, seed) {
        Ok(v) => v,
        Err(e) => return methods.iter().map(|m| failed(rep, seed, m.name(), e.clone_message())).collect(),
    };
    methods
        .iter()
        .map(|&m| {
            let run = || -> Result<RepRecord> {
                let fit = fit_method(m, &d, &cfg.mcmc, &cfg.rules, derive_seed(seed, m.name()))?;
                let tau_hat = fit.draws.posterior_mean();
                let mse = tau_hat.iter().zip(&truth.tau).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d.n() as f64;
                let tree = detect(&tau_hat, &d, cfg)?;
                let part = tree.partition(&d)?;
                Ok(RepRecord {
                    rep,
                    seed,
                    method: m.name().to_string(),
                    cate_mse: Some(mse),
                    realized_utility: Some(realized_utility(&truth.tau, &part)),
                    groups: vec![],
                    skipped_groups: 0,
                    error: None,
                })
            };
            run().unwrap_or_else(|e| failed(rep, seed, m.name(), e))
        })
        .collect()
}

/// Per rep: fit each method, select subgroups by greedy risk-neutral search on
/// the posterior means, and score CATE MSE and the truth-scored utility.
pub fn run_utility_experiment(dgp: &SyntheticDgp, methods: &[Fitter], cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    cfg.validate()?;
    dgp.validate()?;
    if methods.is_empty() {
        return Err(Error::invalid("at least one method is required"));
    }
    let records: Vec<RepRecord> = (0..cfg.reps)
        .into_par_iter()
        .flat_map_iter(|r| utility_rep(dgp, methods, cfg, r, seed))
        .collect();
    let names: Vec<String> = methods.iter().map(|m| m.name().to_string()).collect();
    Ok(ExperimentReport {
        kind: "utility".into(),
        seed,
        reps: cfg.reps,
        dgp: dgp.clone(),
        config: cfg.clone(),
        summaries: summarize(&names, &records),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    #[serde(rename = "bayes-ridge-doubledip")]
    RidgeDoubleDip,
    #[serde(rename = "bayes-rulebcf-doubledip")]
    RuleBcfDoubleDip,
    #[serde(rename = "flat-linear-doubledip")]
    FlatLinearDoubleDip,
    /// Subgroups and outcome model from a ridge fit on the fit set; AIPW on the holdout.
    #[serde(rename = "honest-aipw")]
    HonestAipw,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [
        Pipeline::RidgeDoubleDip,
        Pipeline::RuleBcfDoubleDip,
        Pipeline::FlatLinearDoubleDip,
        Pipeline::HonestAipw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::RidgeDoubleDip => "bayes-ridge-doubledip",
            Pipeline::RuleBcfDoubleDip => "bayes-rulebcf-doubledip",
            Pipeline::FlatLinearDoubleDip => "flat-linear-doubledip",
            Pipeline::HonestAipw => "honest-aipw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pipeline {s:?}")))
    }

    fn fitter(self) -> Fitter {
        match self {
            Pipeline::RidgeDoubleDip | Pipeline::HonestAipw => Fitter::Ridge,
            Pipeline::RuleBcfDoubleDip => Fitter::RuleBcf,
            Pipeline::FlatLinearDoubleDip => Fitter::FlatLinear,
        }
    }
}

fn coverage_rep(dgp: &SyntheticDgp, pipelines: &[Pipeline], cfg: &ExperimentConfig, rep: usize, root: u64) -> Vec<RepRecord> {
    let seed = derive_indexed(root, "rep", rep as u64);
    let data = generate(dgp, cfg.n_fit + cfg.n_holdout, seed).map(|(d, truth)| {
        let fit_rows: Vec<usize> = (0..cfg.n_fit).collect();
        let hold_rows: Vec<usize> = (cfg.n_fit..cfg.n_fit + cfg.n_holdout).collect();
        (
            d.subset(&fit_rows),
            d.subset(&hold_rows),
            truth.tau[..cfg.n_fit].to_vec(),
            truth.tau[cfg.n_fit..].to_vec(),
        )
    });
    let (fit_d, hold_d, fit_tau, hold_tau) = match data {
        Ok(v) => v,
        Err(e) => return pipelines.iter().map(|p| failed(rep, seed, p.name(), e.clone_message())).collect(),
    };
    let mut fits: Vec<(Fitter, Result<Fitted>)> = Vec::new();
    pipelines
        .iter()
        .map(|&p| {
            let fitter = p.fitter();
            if !fits.iter().any(|(f, _)| *f == fitter) {
                fits.push((fitter, fit_method(fitter, &fit_d, &cfg.mcmc, &cfg.rules, derive_seed(seed, fitter.name()))));
            }
            let fit = match &fits.iter().find(|(f, _)| *f == fitter).expect("fit present").1 {
                Ok(f) => f,
                Err(e) => return failed(rep, seed, p.name(), e.clone_message()),
            };
            let run = || -> Result<RepRecord> {
                let tau_hat = fit.draws.posterior_mean();
                let mse = tau_hat.iter().zip(&fit_tau).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / fit_d.n() as f64;
                let tree = detect(&tau_hat, &fit_d, cfg)?;
                let mut skipped = 0;
                let groups = if p == Pipeline::HonestAipw {
                    let assign = tree.assign(&hold_d)?;
                    let (mu0, mu1) = fit.predict_arms(&hold_d)?;
                    let k = tree.root.n_leaves();
                    let mut out = Vec::new();
                    for g in 0..k {
                        let mask: Vec<bool> = assign.iter().map(|&a| a == g).collect();
                        let size = mask.iter().filter(|&&m| m).count();
                        if size < 2 {
                            skipped += 1;
                            continue;
                        }
                        let est = aipw_subgroup(&hold_d, &mu0, &mu1, &mask)?;
                        let truth = hold_tau.iter().zip(&mask).filter(|(_, &m)| m).map(|(t, _)| t).sum::<f64>() / size as f64;
                        out.push(GroupRecord {
                            size,
                            truth,
                            estimate: est.estimate,
                            lo: est.interval.lo,
                            hi: est.interval.hi,
                            covered: est.interval.contains(truth),
                        });
                    }
                    out
                } else {
                    let part = tree.partition(&fit_d)?;
                    let summary = partition_summary(&fit.draws, &part, cfg.alpha)?;
                    let truths = group_truth(&fit_tau, &part);
                    summary
                        .groups
                        .iter()
                        .zip(truths)
                        .map(|(g, truth)| GroupRecord {
                            size: g.size,
                            truth,
                            estimate: g.tau_hat,
                            lo: g.interval.lo,
                            hi: g.interval.hi,
                            covered: g.interval.contains(truth),
                        })
                        .collect()
                };
                Ok(RepRecord {
                    rep,
                    seed,
                    method: p.name().to_string(),
                    cate_mse: Some(mse),
                    realized_utility: Some(realized_utility(&fit_tau, &tree.partition(&fit_d)?)),
                    groups,
                    skipped_groups: skipped,
                    error: None,
                })
            };
            run().unwrap_or_else(|e| failed(rep, seed, p.name(), e))
        })
        .collect()
}

/// Per rep: detect subgroups on the fit set (greedy, risk-neutral) and record
/// whether each group's interval contains its true effect. Double-dipping
/// pipelines use posterior intervals from the same fit; the honest pipeline
/// uses AIPW intervals on the holdout.
pub fn run_coverage_experiment(dgp: &SyntheticDgp, pipelines: &[Pipeline], cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    cfg.validate()?;
    dgp.validate()?;
    if pipelines.is_empty() {
        return Err(Error::invalid("at least one pipeline is required"));
    }
    if pipelines.contains(&Pipeline::HonestAipw) && cfg.n_holdout < 2 {
        return Err(Error::invalid("the honest pipeline needs a holdout of at least 2 units"));
    }
    let records: Vec<RepRecord> = (0..cfg.reps)
        .into_par_iter()
        .flat_map_iter(|r| coverage_rep(dgp, pipelines, cfg, r, seed))
        .collect();
    let names: Vec<String> = pipelines.iter().map(|p| p.name().to_string()).collect();
    Ok(ExperimentReport {
        kind: "coverage".into(),
        seed,
        reps: cfg.reps,
        dgp: dgp.clone(),
        config: cfg.clone(),
        summaries: summarize(&names, &records),
        records,
    })
}

// ---------------------------------------------------------------------------
// Prior-predictive calibration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationDesign {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub treat_prob: f64,
    pub mcmc: McmcConfig,
    pub search: SearchConfig,
}

impl Default for CalibrationDesign {
    fn default() -> Self {
        CalibrationDesign {
            n: 200,
            p: 10,
            rho: 0.0,
            treat_prob: 0.5,
            mcmc: McmcConfig {
                n_draws: 1000,
                n_burn: 500,
                thin: 1,
                seed: 0,
            },
            search: SearchConfig {
                max_depth: 2,
                min_leaf: 20,
                mode: SearchMode::Greedy,
                lambda: 1.0,
                depth_penalty: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub reps: usize,
    pub alpha: f64,
    /// Interval for `τ(G)` of the selected group holding the first unit; one event per rep.
    pub first_unit: Coverage,
    /// Same group, interval for `Δ = τ(G) − τ(𝒳)`.
    pub first_unit_delta: Coverage,
    /// All selected groups of all reps.
    pub pooled: Coverage,
    pub mean_groups: f64,
}

struct PriorDraw {
    mu0: f64,
    beta_mu: Vec<f64>,
    tau0: f64,
    beta_tau: Vec<f64>,
    sigma2: f64,
}

fn draw_from_prior(prior: &RidgePrior, p: usize, rng: &mut Rng) -> Result<PriorDraw> {
    let normal = |rng: &mut Rng, sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
    let mu0 = normal(rng, prior.intercept_sd);
    let beta_mu = (0..p).map(|_| normal(rng, prior.sigma_mu)).collect();
    let tau0 = normal(rng, prior.intercept_sd);
    let sigma_tau = prior.sigma_tau.sample(rng);
    let beta_tau = (0..p).map(|_| normal(rng, sigma_tau)).collect();
    let sigma2 = match prior.noise {
        NoisePrior::Fixed(v) => v,
        NoisePrior::InverseGamma { shape, rate } => {
            let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::invalid(e.to_string()))?;
            1.0 / g.sample(rng)
        }
    };
    Ok(PriorDraw {
        mu0,
        beta_mu,
        tau0,
        beta_tau,
        sigma2,
    })
}

/// Outcome of one rep: (first-unit τ covered, first-unit Δ covered, covered groups, groups).
fn calibration_rep(generating: &RidgePrior, fitting: &RidgePrior, design: &CalibrationDesign, alpha: f64, rep: usize, root: u64) -> Result<(bool, bool, usize, usize)> {
    let seed = derive_indexed(root, "calibration", rep as u64);
    let mut rng = stream(seed, "theta");
    let theta = draw_from_prior(generating, design.p, &mut rng)?;
    let dgp = SyntheticDgp {
        p: design.p,
        rho: design.rho,
        categorical: vec![],
        mu: Surface::Constant { value: 0.0 },
        tau: Surface::Constant { value: 0.0 },
        treat_prob: design.treat_prob,
        sigma: 1.0,
    };
    let x = dgp.covariates(design.n, &mut rng);
    let mut a = Vec::with_capacity(design.n);
    let mut y = Vec::with_capacity(design.n);
    let mut tau = Vec::with_capacity(design.n);
    for i in 0..design.n {
        let xi = x.row(i);
        let t = theta.tau0 + theta.beta_tau.iter().zip(xi.iter()).map(|(b, v)| b * v).sum::<f64>();
        let m = theta.mu0 + theta.beta_mu.iter().zip(xi.iter()).map(|(b, v)| b * v).sum::<f64>();
        let treated = rng.random::<f64>() < design.treat_prob;
        let z: f64 = rng.sample(StandardNormal);
        a.push(treated as u8);
        y.push(m + if treated { t } else { 0.0 } + theta.sigma2.sqrt() * z);
        tau.push(t);
    }
    let d = Dataset::new(y, a, x, dgp.columns(), Propensity::Constant(design.treat_prob))?;
    let mcmc = McmcConfig {
        seed: derive_seed(seed, "mcmc"),
        ..design.mcmc
    };
    let draws = fit_ridge(&d, fitting, &mcmc, false)?;
    let grid = build_cutpoints(&d, design.search.min_leaf, 64);
    let tree = search_greedy_rn(
        &draws.posterior_mean(),
        &d,
        &grid,
        &SearchConfig {
            mode: SearchMode::Greedy,
            lambda: 1.0,
            ..design.search
        },
    )?;
    let part = tree.partition(&d)?;
    let summary = partition_summary(&draws, &part, alpha)?;
    let truths = group_truth(&tau, &part);
    let overall = tau.iter().sum::<f64>() / tau.len() as f64;
    let g0 = part.groups()[0];
    let first = summary.groups[g0].interval.contains(truths[g0]);
    let first_delta = summary.groups[g0].delta_interval.contains(truths[g0] - overall);
    let covered = summary
        .groups
        .iter()
        .zip(&truths)
        .filter(|(g, &t)| g.interval.contains(t))
        .count();
    Ok((first, first_delta, covered, part.k()))
}

/// Coverage of data-dependent subgroup intervals when the truth is drawn from
/// `generating` and the model is fit with `fitting`.
pub fn prior_predictive_coverage(generating: &RidgePrior, fitting: &RidgePrior, design: &CalibrationDesign, reps: usize, alpha: f64, seed: u64) -> Result<CalibrationOutcome> {
    generating.validate()?;
    fitting.validate()?;
    design.mcmc.validate()?;
    design.search.validate()?;
    if reps < 50 {
        return Err(Error::invalid("at least 50 replications are required"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    if design.n < 2 * design.search.min_leaf.max(1) || design.p == 0 {
        return Err(Error::invalid("design too small"));
    }
    let results: Vec<(bool, bool, usize, usize)> = (0..reps)
        .into_par_iter()
        .map(|r| calibration_rep(generating, fitting, design, alpha, r, seed))
        .collect::<Result<_>>()?;
    let count = |f: fn(&(bool, bool, usize, usize)) -> bool| results.iter().filter(|r| f(r)).count();
    let covered: usize = results.iter().map(|r| r.2).sum();
    let total: usize = results.iter().map(|r| r.3).sum();
    Ok(CalibrationOutcome {
        reps,
        alpha,
        first_unit: Coverage::from_counts(count(|r| r.0), reps),
        first_unit_delta: Coverage::from_counts(count(|r| r.1), reps),
        pooled: Coverage::from_counts(covered, total),
        mean_groups: total as f64 / reps as f64,
    })
}

/// Matched-prior calibration check.
pub fn prior_predictive_calibration(prior: &RidgePrior, design: &CalibrationDesign, reps: usize, alpha: f64, seed: u64) -> Result<CalibrationOutcome> {
    prior_predictive_coverage(prior, prior, design, reps, alpha, seed)
}

/// Prior with the effect-modifier scale multiplied by `factor`.
pub fn scale_modifier_prior(prior: &RidgePrior, factor: f64) -> RidgePrior {
    let sigma_tau = match prior.sigma_tau {
        ScalePrior::Fixed(v) => ScalePrior::Fixed(v * factor),
        ScalePrior::Exponential { scale } => ScalePrior::Exponential { scale: scale * factor },
    };
    RidgePrior { sigma_tau, ..*prior }
}

// ---------------------------------------------------------------------------
// AIPW robustness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipwCheck {
    pub reps: usize,
    /// Reps whose estimate lies within 3 SE of the true subgroup effect.
    pub within_3se: usize,
    pub mean_z: f64,
}

/// AIPW with a deliberately wrong outcome model (`μ̂ ≡ 0`) for the units
/// selected by `group` (leaf 0 of the tree) on fresh data each rep.
pub fn aipw_robustness(dgp: &SyntheticDgp, group: &SubgroupTree, n: usize, reps: usize, seed: u64) -> Result<AipwCheck> {
    let zs: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let (d, truth) = generate(dgp, n, derive_indexed(seed, "aipw", r as u64))?;
            let assign = group.assign(&d)?;
            let zero = vec![0.0; d.n()];
            let mask: Vec<bool> = assign.iter().map(|&a| a == 0).collect();
            let est = aipw_subgroup(&d, &zero, &zero, &mask)?;
            let m = mask.iter().filter(|&&b| b).count() as f64;
            let t = truth.tau.iter().zip(&mask).filter(|(_, &b)| b).map(|(t, _)| t).sum::<f64>() / m;
            Ok((est.estimate - t) / est.se)
        })
        .collect::<Result<_>>()?;
    Ok(AipwCheck {
        reps,
        within_3se: zs.iter().filter(|z| z.abs() <= 3.0).count(),
        mean_z: zs.iter().sum::<f64>() / reps as f64,
    })
}

/// AIPW estimates for every leaf of `tree` on `d`.
pub fn aipw_for_tree(d: &Dataset, mu0: &[f64], mu1: &[f64], tree: &SubgroupTree) -> Result<Vec<crate::inference::AipwEstimate>> {
    aipw_by_group(d, mu0, mu1, &tree.partition(d)?)
}
