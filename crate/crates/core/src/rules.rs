//! Rule-ensemble approximation of the Bayesian causal forest.
//!
//! Two small gradient-boosted ensembles are grown: one on the outcome (for
//! prognostic rules) and one on an inverse-propensity effect proxy (for
//! effect-modifying rules). Every non-root node of every tree contributes the
//! conjunction of conditions on its path as a candidate rule. The rule
//! indicators, centered at their training support, then enter the ridge
//! sampler as the two coefficient blocks.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::cutpoints::{build_cutpoints, CutpointGrid};
use crate::data::{Covariate, Dataset};
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::ridge::{sample_effects, treatment_design, EffectsDesign, FeatureMap, LinearFeatures, McmcConfig, RidgePrior};
use crate::rng::{stream, Rng};
use crate::search::split_scores;
use crate::tree::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub split: Split,
    /// `true` for the side where `split` sends rows left.
    pub left: bool,
}

impl Condition {
    pub fn holds(&self, x: &DMatrix<f64>, row: usize) -> bool {
        self.split.goes_left(x, row) == self.left
    }

    pub fn describe(&self, columns: &[Covariate]) -> String {
        let text = self.split.describe(columns);
        if self.left {
            text
        } else {
            format!("not ({text})")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub conditions: Vec<Condition>,
    /// Fraction of training units satisfying the rule.
    pub support: f64,
    /// Human-readable form.
    pub text: String,
}

impl Rule {
    pub fn holds(&self, x: &DMatrix<f64>, row: usize) -> bool {
        self.conditions.iter().all(|c| c.holds(x, row))
    }

    pub fn indicator(&self, d: &Dataset) -> Vec<bool> {
        (0..d.n()).map(|i| self.holds(d.x(), i)).collect()
    }

    fn new(conditions: Vec<Condition>, d: &Dataset) -> Self {
        let hits = (0..d.n()).filter(|&i| conditions.iter().all(|c| c.holds(d.x(), i))).count();
        let text = conditions.iter().map(|c| c.describe(d.columns())).collect::<Vec<_>>().join(" & ");
        Rule {
            conditions,
            support: hits as f64 / d.n() as f64,
            text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisStatus {
    Ok,
    /// At least one ensemble produced no splits.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleBasis {
    pub prognostic: Vec<Rule>,
    pub modifier: Vec<Rule>,
    /// Linear covariate terms added to the prognostic block.
    pub linear: Option<LinearFeatures>,
    /// Linear covariate terms added to the modifier block.
    #[serde(default)]
    pub linear_modifier: Option<LinearFeatures>,
    pub status: BasisStatus,
}

impl RuleBasis {
    /// Basis from explicit rule lists; supports are computed on `d`.
    pub fn from_rules(d: &Dataset, prognostic: Vec<Vec<Condition>>, modifier: Vec<Vec<Condition>>, linear: bool) -> Result<Self> {
        for c in prognostic.iter().chain(&modifier).flatten() {
            if c.split.column() >= d.p() {
                return Err(Error::invalid(format!("rule references missing column {}", c.split.column())));
            }
        }
        let build = |rules: Vec<Vec<Condition>>| rules.into_iter().map(|c| Rule::new(c, d)).collect::<Vec<_>>();
        Ok(RuleBasis {
            prognostic: build(prognostic),
            modifier: build(modifier),
            linear: linear.then(|| LinearFeatures::from_dataset(d)),
            linear_modifier: None,
            status: BasisStatus::Ok,
        })
    }

    /// Rules as a JSON document.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))
    }

    /// One line per rule: block, support and conditions.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (block, rules) in [("prognostic", &self.prognostic), ("modifier", &self.modifier)] {
            for r in rules {
                out.push_str(&format!("{block}\t{:.4}\t{}\n", r.support, r.text));
            }
        }
        out
    }

    fn centered(rules: &[Rule], d: &Dataset) -> DMatrix<f64> {
        DMatrix::from_fn(d.n(), rules.len(), |i, k| f64::from(rules[k].holds(d.x(), i)) - rules[k].support)
    }

    fn block(linear: Option<&LinearFeatures>, rules: &[Rule], d: &Dataset) -> Result<DMatrix<f64>> {
        let rules = Self::centered(rules, d);
        let Some(lin) = linear else { return Ok(rules) };
        let l = lin.matrix(d)?;
        let mut out = DMatrix::zeros(d.n(), l.ncols() + rules.ncols());
        out.columns_mut(0, l.ncols()).copy_from(&l);
        out.columns_mut(l.ncols(), rules.ncols()).copy_from(&rules);
        Ok(out)
    }

    fn names(linear: Option<&LinearFeatures>, rules: &[Rule]) -> Vec<String> {
        let mut names = linear.map(|l| l.prognostic_names()).unwrap_or_default();
        names.extend(rules.iter().map(|r| r.text.clone()));
        names
    }
}

impl FeatureMap for RuleBasis {
    fn prognostic(&self, d: &Dataset) -> Result<DMatrix<f64>> {
        Self::block(self.linear.as_ref(), &self.prognostic, d)
    }

    fn modifier(&self, d: &Dataset) -> Result<DMatrix<f64>> {
        Self::block(self.linear_modifier.as_ref(), &self.modifier, d)
    }

    fn prognostic_names(&self) -> Vec<String> {
        Self::names(self.linear.as_ref(), &self.prognostic)
    }

    fn modifier_names(&self) -> Vec<String> {
        Self::names(self.linear_modifier.as_ref(), &self.modifier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleConfig {
    pub n_trees: usize,
    /// Mean number of leaves per tree; each tree draws `2 + ⌊Exp(mean_leaves − 2)⌋`.
    pub mean_leaves: f64,
    /// Depth cap of every tree.
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub min_support: f64,
    /// Smallest node the boosting trees may create.
    pub min_node: usize,
    /// Thresholds considered per continuous column.
    pub max_thresholds: usize,
    /// Cap on rules kept per block, in order of first appearance.
    pub max_rules: usize,
    pub linear_prognostic: bool,
    pub linear_modifier: bool,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            n_trees: 50,
            mean_leaves: 4.0,
            max_depth: 3,
            learning_rate: 0.1,
            subsample: 0.8,
            min_support: 0.05,
            min_node: 10,
            max_thresholds: 32,
            max_rules: 50,
            linear_prognostic: true,
            linear_modifier: true,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 {
            return Err(Error::invalid("n_trees and max_depth must be positive"));
        }
        if !(self.mean_leaves >= 2.0 && self.mean_leaves.is_finite()) {
            return Err(Error::invalid("mean_leaves must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::invalid("learning_rate must lie in (0, 1]"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::invalid("subsample must lie in (0, 1]"));
        }
        if !(0.0..0.5).contains(&self.min_support) {
            return Err(Error::invalid("min_support must lie in [0, 0.5)"));
        }
        if self.min_node == 0 || self.max_thresholds == 0 {
            return Err(Error::invalid("min_node and max_thresholds must be positive"));
        }
        Ok(())
    }
}

/// Path conditions of every non-root node of one regression tree.
struct Booster<'a> {
    x: &'a DMatrix<f64>,
    grid: &'a CutpointGrid,
    cfg: &'a RuleConfig,
}

impl Booster<'_> {
    fn sse(target: &[f64], rows: &[usize]) -> f64 {
        let m = rows.iter().map(|&i| target[i]).sum::<f64>() / rows.len() as f64;
        rows.iter().map(|&i| (target[i] - m).powi(2)).sum()
    }

    fn best_split(&self, target: &[f64], rows: &[usize]) -> Option<(f64, Split)> {
        let parent = Self::sse(target, rows);
        let mut best: Option<(f64, &Split)> = None;
        for (j, splits) in self.grid.columns.iter().enumerate() {
            if splits.is_empty() {
                continue;
            }
            let scored: Vec<(usize, f64)> = if matches!(splits[0], Split::Threshold { .. }) {
                split_scores(target, self.x, rows, j, &self.grid.thresholds(j), self.cfg.min_node)
                    .into_iter()
                    .enumerate()
                    .filter_map(|(c, s)| s.map(|s| (c, s)))
                    .collect()
            } else {
                splits
                    .iter()
                    .enumerate()
                    .filter_map(|(c, s)| {
                        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| s.goes_left(self.x, i));
                        (l.len() >= self.cfg.min_node && r.len() >= self.cfg.min_node)
                            .then(|| (c, Self::sse(target, &l) + Self::sse(target, &r)))
                    })
                    .collect()
            };
            for (c, child) in scored {
                let gain = parent - child;
                if gain > 1e-12 * (1.0 + parent) && best.map_or(true, |(g, _)| gain > g) {
                    best = Some((gain, &splits[c]));
                }
            }
        }
        best.map(|(g, s)| (g, s.clone()))
    }

    /// Grows a tree best first to at most `leaves` leaves on the sampled `rows`,
    /// adds `learning_rate × leaf mean` to `pred` for every unit, and appends
    /// the path of each non-root node to `paths`.
    fn grow(&self, target: &[f64], rows: Vec<usize>, leaves: usize, pred: &mut [f64], paths: &mut Vec<Vec<Condition>>) {
        struct Leaf {
            rows: Vec<usize>,
            all: Vec<usize>,
            path: Vec<Condition>,
            split: Option<(f64, Split)>,
        }
        let candidate = |rows: &[usize], depth: usize| {
            if depth >= self.cfg.max_depth || rows.len() < 2 * self.cfg.min_node {
                return None;
            }
            self.best_split(target, rows)
        };
        let n = pred.len();
        let mut open = vec![Leaf {
            split: candidate(&rows, 0),
            rows,
            all: (0..n).collect(),
            path: Vec::new(),
        }];
        while open.len() < leaves {
            let Some(at) = open
                .iter()
                .enumerate()
                .filter_map(|(k, l)| l.split.as_ref().map(|(g, _)| (k, *g)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
            else {
                break;
            };
            let leaf = open.remove(at);
            let (_, s) = leaf.split.expect("chosen leaf has a split");
            let (rl, rr): (Vec<usize>, Vec<usize>) = leaf.rows.into_iter().partition(|&i| s.goes_left(self.x, i));
            let (al, ar): (Vec<usize>, Vec<usize>) = leaf.all.into_iter().partition(|&i| s.goes_left(self.x, i));
            let mut children = Vec::with_capacity(2);
            for (left, rows, all) in [(true, rl, al), (false, rr, ar)] {
                let mut path = leaf.path.clone();
                path.push(Condition { split: s.clone(), left });
                paths.push(path.clone());
                children.push(Leaf {
                    split: candidate(&rows, path.len()),
                    rows,
                    all,
                    path,
                });
            }
            open.splice(at..at, children);
        }
        for leaf in open {
            let m = if leaf.rows.is_empty() {
                0.0
            } else {
                leaf.rows.iter().map(|&i| target[i]).sum::<f64>() / leaf.rows.len() as f64
            };
            for i in leaf.all {
                pred[i] += self.cfg.learning_rate * m;
            }
        }
    }

    /// Node paths of the ensemble and its in-sample fit.
    fn ensemble(&self, y: &[f64], rng: &mut Rng) -> (Vec<Vec<Condition>>, Vec<f64>) {
        let n = y.len();
        let base = y.iter().sum::<f64>() / n as f64;
        let mut pred = vec![base; n];
        let mut paths = Vec::new();
        let m = ((self.cfg.subsample * n as f64).round() as usize).clamp(1, n);
        for _ in 0..self.cfg.n_trees {
            let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
            let mut rows = sample(rng, n, m).into_vec();
            rows.sort_unstable();
            let extra: f64 = Exp1.sample(rng);
            let leaves = 2 + (extra * (self.cfg.mean_leaves - 2.0)).floor() as usize;
            self.grow(&resid, rows, leaves, &mut pred, &mut paths);
        }
        (paths, pred)
    }
}

/// Deduplicate (treating a rule and its complement as the same), filter by
/// support, and keep at most `max_rules` in order of first appearance.
fn select_rules(paths: Vec<Vec<Condition>>, d: &Dataset, cfg: &RuleConfig) -> Vec<Rule> {
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    let mut out = Vec::new();
    for conds in paths {
        if out.len() >= cfg.max_rules {
            break;
        }
        let rule = Rule::new(conds, d);
        if rule.support < cfg.min_support || rule.support > 1.0 - cfg.min_support || rule.support == 0.0 || rule.support == 1.0 {
            continue;
        }
        let ind = rule.indicator(d);
        // canonical orientation: the first unit is outside the rule
        let key: Vec<bool> = if ind[0] { ind.iter().map(|b| !b).collect() } else { ind };
        if seen.insert(key) {
            out.push(rule);
        }
    }
    out
}

/// `(Y − m̂(X))(A − e) / {e (1 − e)}`. Its conditional mean is `τ(X)` for any
/// `m̂` that depends on the covariates alone.
pub fn effect_proxy(d: &Dataset, m_hat: &[f64]) -> Result<Vec<f64>> {
    d.require_both_arms()?;
    if m_hat.len() != d.n() {
        return Err(Error::invalid("one outcome prediction per unit is required"));
    }
    Ok((0..d.n())
        .map(|i| {
            let e = d.propensity(i);
            (d.y()[i] - m_hat[i]) * (f64::from(d.treatment()[i]) - e) / (e * (1.0 - e))
        })
        .collect())
}

/// Arm means as the centering, `(Y − Ȳ_A)(A − e) / {e (1 − e)}`.
pub fn arm_mean_centering(d: &Dataset) -> Vec<f64> {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (&y, &a) in d.y().iter().zip(d.treatment()) {
        sums[a as usize] += y;
        counts[a as usize] += 1;
    }
    d.treatment()
        .iter()
        .map(|&a| sums[a as usize] / counts[a as usize].max(1) as f64)
        .collect()
}

/// Extract prognostic rules (boosting on `Y`) and modifier rules (boosting on
/// the effect proxy centered at the prognostic ensemble's fit).
pub fn extract_rules(d: &Dataset, cfg: &RuleConfig, seed: u64) -> Result<RuleBasis> {
    cfg.validate()?;
    let grid = build_cutpoints(d, 1, cfg.max_thresholds);
    let booster = Booster { x: d.x(), grid: &grid, cfg };
    let (prog_paths, m_hat) = booster.ensemble(d.y(), &mut stream(seed, "rules-prognostic"));
    let proxy = effect_proxy(d, &m_hat)?;
    let (mod_paths, _) = booster.ensemble(&proxy, &mut stream(seed, "rules-modifier"));
    let degenerate = prog_paths.is_empty() || mod_paths.is_empty();
    Ok(RuleBasis {
        prognostic: select_rules(prog_paths, d, cfg),
        modifier: select_rules(mod_paths, d, cfg),
        linear: cfg.linear_prognostic.then(|| LinearFeatures::from_dataset(d)),
        linear_modifier: cfg.linear_modifier.then(|| LinearFeatures::from_dataset(d)),
        status: if degenerate { BasisStatus::Degenerate } else { BasisStatus::Ok },
    })
}

/// Ridge Gibbs sampler over the rule basis. An empty modifier block gives a
/// homogeneous-effect model.
pub fn fit_rule_bcf(d: &Dataset, basis: &RuleBasis, prior: &RidgePrior, mcmc: &McmcConfig, observational: bool) -> Result<PosteriorDraws> {
    d.require_both_arms()?;
    let prognostic = basis.prognostic(d)?;
    if prognostic.ncols() == 0 {
        return Err(Error::invalid("the prognostic basis is empty"));
    }
    let modifier = basis.modifier(d)?;
    let treat = treatment_design(d, observational);
    let design = EffectsDesign {
        y: d.y(),
        treat: &treat,
        prognostic: &prognostic,
        modifier: &modifier,
        prognostic_names: basis.prognostic_names(),
        modifier_names: basis.modifier_names(),
    };
    sample_effects(&design, prior, mcmc, "rule-bcf")
}
