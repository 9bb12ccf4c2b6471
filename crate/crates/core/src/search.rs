//! Searching depth-bounded trees for high expected utility.
//!
//! * [`search_exact`] finds the best subgroup tree over a cutpoint grid for any
//!   risk parameter. The utility is a sum of per-leaf terms, so the search is
//!   a dynamic program over nodes; leaf variances still need a full pass over
//!   the draws, which is why it is limited to depth 3.
//! * [`search_greedy_rn`] is CART on posterior means for the risk-neutral case,
//!   scoring every threshold of a column with one prefix-sum sweep.
//! * [`evaluate_prespecified`] ranks user-defined categorical partitions.
//! * [`policy_search_exact`] finds the best treat / don't-treat tree of depth
//!   at most 2 for per-unit scores.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutpoints::CutpointGrid;
use crate::data::Dataset;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::tree::{cmp_tree_encoding, Action, Node, Partition, PolicyTree, Split, SubgroupTree};
use crate::utility::{expected_utility, UtilityReport};

pub const MAX_EXACT_DEPTH: usize = 3;
pub const MAX_POLICY_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Exact,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub mode: SearchMode,
    pub lambda: f64,
    /// Utility cost per level of tree depth (η).
    pub depth_penalty: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_depth: 2,
            min_leaf: 10,
            mode: SearchMode::Greedy,
            lambda: 1.0,
            depth_penalty: 0.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_leaf == 0 {
            return Err(Error::invalid("min_leaf must be at least 1"));
        }
        if self.depth_penalty < 0.0 || !self.depth_penalty.is_finite() {
            return Err(Error::invalid("depth penalty must be finite and nonnegative"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite"));
        }
        if self.mode == SearchMode::Exact && self.max_depth > MAX_EXACT_DEPTH {
            return Err(Error::invalid(format!(
                "exact search supports max_depth <= {MAX_EXACT_DEPTH}, got {}",
                self.max_depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub tree: SubgroupTree,
    pub report: UtilityReport,
    /// `report.value − η · depth`
    pub penalized_value: f64,
    /// Number of distinct grid trees covered by the search.
    pub trees_covered: f64,
}

fn tie_tol(a: f64, b: f64) -> f64 {
    1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Is candidate `(va, ta)` better than incumbent `(vb, tb)`?
fn better<A, B>(va: f64, ta: &Node<A>, vb: f64, tb: &Node<B>) -> bool {
    if va > vb + tie_tol(va, vb) {
        true
    } else if va < vb - tie_tol(va, vb) {
        false
    } else {
        cmp_tree_encoding(ta, tb) == Ordering::Less
    }
}

fn split_units(x: &DMatrix<f64>, units: &[usize], split: &Split) -> (Vec<usize>, Vec<usize>) {
    units.iter().partition(|&&i| split.goes_left(x, i))
}

// ---------------------------------------------------------------------------
// Exact search

struct Exact<'a> {
    x: &'a DMatrix<f64>,
    /// Draws centered at each unit's posterior mean, row-major S × N.
    centered: Vec<f64>,
    s: usize,
    n_units: usize,
    tau_hat: Vec<f64>,
    grid: &'a CutpointGrid,
    min_leaf: usize,
    lambda: f64,
    n_total: f64,
}

struct Best {
    value: f64,
    tree: Node<()>,
    covered: f64,
}

impl<'a> Exact<'a> {
    fn new(draws: &PosteriorDraws, d: &'a Dataset, grid: &'a CutpointGrid, cfg: &SearchConfig) -> Self {
        let tau_hat = draws.posterior_mean();
        let (s, n) = (draws.n_draws(), draws.n_units());
        let mut centered = Vec::with_capacity(s * n);
        for r in 0..s {
            centered.extend(draws.row(r).iter().zip(&tau_hat).map(|(v, m)| v - m));
        }
        Exact {
            x: d.x(),
            centered,
            s,
            n_units: n,
            tau_hat,
            grid,
            min_leaf: cfg.min_leaf,
            lambda: cfg.lambda,
            n_total: n as f64,
        }
    }

    /// `[(1 − λ) n Var{τ(G)} − Σ_{i∈G} (τ̂_i − τ̂(G))²] / N`
    fn leaf_score(&self, units: &[usize]) -> f64 {
        let nk = units.len() as f64;
        let (mut sum, mut sq) = (0.0, 0.0);
        for r in 0..self.s {
            let row = &self.centered[r * self.n_units..(r + 1) * self.n_units];
            let m = units.iter().map(|&i| row[i]).sum::<f64>() / nk;
            sum += m;
            sq += m * m;
        }
        let s = self.s as f64;
        let var = (sq / s - (sum / s).powi(2)).max(0.0);
        let hat = units.iter().map(|&i| self.tau_hat[i]).sum::<f64>() / nk;
        let within: f64 = units.iter().map(|&i| (self.tau_hat[i] - hat).powi(2)).sum();
        ((1.0 - self.lambda) * nk * var - within) / self.n_total
    }

    fn best(&self, units: &[usize], depth_left: usize) -> Best {
        if depth_left == 1 {
            return self.best_depth1(units);
        }
        let mut best = Best {
            value: self.leaf_score(units),
            tree: Node::Leaf(()),
            covered: 1.0,
        };
        if depth_left == 0 || units.len() < 2 * self.min_leaf {
            return best;
        }
        let candidates: Vec<&Split> = self.grid.iter().collect();
        let results: Vec<Option<Best>> = candidates
            .par_iter()
            .map(|split| {
                let (l, r) = split_units(self.x, units, split);
                if l.len() < self.min_leaf || r.len() < self.min_leaf {
                    return None;
                }
                let bl = self.best(&l, depth_left - 1);
                let br = self.best(&r, depth_left - 1);
                Some(Best {
                    value: bl.value + br.value,
                    covered: bl.covered * br.covered,
                    tree: Node::split((*split).clone(), bl.tree, br.tree),
                })
            })
            .collect();
        for cand in results.into_iter().flatten() {
            best.covered += cand.covered;
            if better(cand.value, &cand.tree, best.value, &best.tree) {
                best.value = cand.value;
                best.tree = cand.tree;
            }
        }
        best
    }

    /// Best of the leaf and every single split, scoring all thresholds of a
    /// continuous column in one sweep over the draws.
    fn best_depth1(&self, units: &[usize]) -> Best {
        let mut best = Best {
            value: self.leaf_score(units),
            tree: Node::Leaf(()),
            covered: 1.0,
        };
        let n = units.len();
        if n < 2 * self.min_leaf {
            return best;
        }
        for (j, splits) in self.grid.columns.iter().enumerate() {
            if splits.is_empty() {
                continue;
            }
            let continuous = matches!(splits[0], Split::Threshold { .. });
            let scored: Vec<(usize, f64)> = if continuous {
                self.sweep_column(units, j, splits)
            } else {
                splits
                    .iter()
                    .enumerate()
                    .filter_map(|(c, split)| {
                        let (l, r) = split_units(self.x, units, split);
                        (l.len() >= self.min_leaf && r.len() >= self.min_leaf)
                            .then(|| (c, self.leaf_score(&l) + self.leaf_score(&r)))
                    })
                    .collect()
            };
            for (c, value) in scored {
                best.covered += 1.0;
                let tree = Node::split(splits[c].clone(), Node::Leaf(()), Node::Leaf(()));
                if better(value, &tree, best.value, &best.tree) {
                    best.value = value;
                    best.tree = tree;
                }
            }
        }
        best
    }

    /// Scores `(index into splits, left + right leaf score)` of every feasible
    /// threshold split of column `j`.
    fn sweep_column(&self, units: &[usize], j: usize, splits: &[Split]) -> Vec<(usize, f64)> {
        let mut order = units.to_vec();
        order.sort_by(|&a, &b| self.x[(a, j)].total_cmp(&self.x[(b, j)]));
        let n = order.len();
        let vals: Vec<f64> = order.iter().map(|&i| self.x[(i, j)]).collect();
        // (split index, number of units going left)
        let cuts: Vec<(usize, usize)> = splits
            .iter()
            .enumerate()
            .filter_map(|(c, s)| match s {
                Split::Threshold { threshold, .. } => {
                    let left = vals.partition_point(|v| v <= threshold);
                    (left >= self.min_leaf && n - left >= self.min_leaf).then_some((c, left))
                }
                Split::Levels { .. } => None,
            })
            .collect();
        if cuts.is_empty() {
            return Vec::new();
        }
        let m = cuts.len();
        let (mut sum_l, mut sq_l, mut sum_r, mut sq_r) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut prefix = vec![0.0; n + 1];
        for r in 0..self.s {
            let row = &self.centered[r * self.n_units..(r + 1) * self.n_units];
            for (k, &i) in order.iter().enumerate() {
                prefix[k + 1] = prefix[k] + row[i];
            }
            let total = prefix[n];
            for (c, &(_, left)) in cuts.iter().enumerate() {
                let ml = prefix[left] / left as f64;
                let mr = (total - prefix[left]) / (n - left) as f64;
                sum_l[c] += ml;
                sq_l[c] += ml * ml;
                sum_r[c] += mr;
                sq_r[c] += mr * mr;
            }
        }
        // Within-group sums of squares of τ̂ from prefix sums, centered at the
        // node mean for accuracy.
        let center = order.iter().map(|&i| self.tau_hat[i]).sum::<f64>() / n as f64;
        let mut p1 = vec![0.0; n + 1];
        let mut p2 = vec![0.0; n + 1];
        for (k, &i) in order.iter().enumerate() {
            let v = self.tau_hat[i] - center;
            p1[k + 1] = p1[k] + v;
            p2[k + 1] = p2[k] + v * v;
        }
        let s = self.s as f64;
        cuts.iter()
            .enumerate()
            .map(|(c, &(idx, left))| {
                let (nl, nr) = (left as f64, (n - left) as f64);
                let var_l = (sq_l[c] / s - (sum_l[c] / s).powi(2)).max(0.0);
                let var_r = (sq_r[c] / s - (sum_r[c] / s).powi(2)).max(0.0);
                let sse_l = (p2[left] - p1[left] * p1[left] / nl).max(0.0);
                let sse_r = ((p2[n] - p2[left]) - (p1[n] - p1[left]).powi(2) / nr).max(0.0);
                let value = ((1.0 - self.lambda) * (nl * var_l + nr * var_r) - sse_l - sse_r) / self.n_total;
                (idx, value)
            })
            .collect()
    }
}

/// Exhaustive search over all grid trees of depth at most `cfg.max_depth`
/// whose leaves hold at least `cfg.min_leaf` units. Maximizes the expected
/// utility minus `η · depth`; ties go to the shallower tree, then to the
/// lexicographically smallest preorder `(column, threshold)` encoding.
pub fn search_exact(draws: &PosteriorDraws, d: &Dataset, grid: &CutpointGrid, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    if cfg.max_depth > MAX_EXACT_DEPTH {
        return Err(Error::invalid(format!("exact search supports max_depth <= {MAX_EXACT_DEPTH}")));
    }
    if draws.n_units() != d.n() {
        return Err(Error::invalid("draws and data set disagree on the number of units"));
    }
    if d.n() < cfg.min_leaf {
        return Err(Error::Infeasible(format!(
            "min_leaf = {} exceeds the {} available units",
            cfg.min_leaf,
            d.n()
        )));
    }
    let ctx = Exact::new(draws, d, grid, cfg);
    let units: Vec<usize> = (0..d.n()).collect();
    let mut chosen: Option<(f64, Node<()>)> = None;
    let mut covered = 0.0;
    for depth in 0..=cfg.max_depth {
        let b = ctx.best(&units, depth);
        covered = b.covered;
        let penalized = b.value - cfg.depth_penalty * b.tree.depth() as f64;
        let replace = match &chosen {
            None => true,
            Some((v, t)) => better(penalized, &b.tree, *v, t),
        };
        if replace {
            chosen = Some((penalized, b.tree));
        }
    }
    let (_, shape) = chosen.expect("depth 0 is always feasible");
    let tree = SubgroupTree::from_shape(&shape);
    let report = expected_utility(draws, &tree.partition(d)?, cfg.lambda)?;
    Ok(SearchOutcome {
        penalized_value: report.value - cfg.depth_penalty * tree.depth() as f64,
        report,
        tree,
        trees_covered: covered,
    })
}

// ---------------------------------------------------------------------------
// Greedy risk-neutral search

/// Left + right within-group SSE of `tau_hat` for each threshold of a
/// continuous column, restricted to `units`; `None` where a side would hold
/// fewer than `min_leaf` units. One sort plus one prefix-sum pass.
pub fn split_scores(
    tau_hat: &[f64],
    x: &DMatrix<f64>,
    units: &[usize],
    column: usize,
    thresholds: &[f64],
    min_leaf: usize,
) -> Vec<Option<f64>> {
    let mut order = units.to_vec();
    order.sort_by(|&a, &b| x[(a, column)].total_cmp(&x[(b, column)]));
    let n = order.len();
    if n == 0 {
        return vec![None; thresholds.len()];
    }
    let vals: Vec<f64> = order.iter().map(|&i| x[(i, column)]).collect();
    let center = order.iter().map(|&i| tau_hat[i]).sum::<f64>() / n as f64;
    let mut p1 = vec![0.0; n + 1];
    let mut p2 = vec![0.0; n + 1];
    for (k, &i) in order.iter().enumerate() {
        let v = tau_hat[i] - center;
        p1[k + 1] = p1[k] + v;
        p2[k + 1] = p2[k] + v * v;
    }
    thresholds
        .iter()
        .map(|t| {
            let left = vals.partition_point(|v| v <= t);
            if left < min_leaf.max(1) || n - left < min_leaf.max(1) {
                return None;
            }
            let (nl, nr) = (left as f64, (n - left) as f64);
            let sse_l = (p2[left] - p1[left] * p1[left] / nl).max(0.0);
            let sse_r = ((p2[n] - p2[left]) - (p1[n] - p1[left]).powi(2) / nr).max(0.0);
            Some(sse_l + sse_r)
        })
        .collect()
}

fn sse(tau_hat: &[f64], units: &[usize]) -> f64 {
    let m = units.iter().map(|&i| tau_hat[i]).sum::<f64>() / units.len() as f64;
    units.iter().map(|&i| (tau_hat[i] - m).powi(2)).sum()
}

fn greedy_node(tau_hat: &[f64], x: &DMatrix<f64>, grid: &CutpointGrid, cfg: &SearchConfig, units: &[usize], depth: usize) -> Node<()> {
    if depth >= cfg.max_depth || units.len() < 2 * cfg.min_leaf {
        return Node::Leaf(());
    }
    let parent = sse(tau_hat, units);
    let mut best: Option<(f64, Split)> = None;
    for (j, splits) in grid.columns.iter().enumerate() {
        if splits.is_empty() {
            continue;
        }
        let scored: Vec<(usize, f64)> = if matches!(splits[0], Split::Threshold { .. }) {
            let thresholds = grid.thresholds(j);
            split_scores(tau_hat, x, units, j, &thresholds, cfg.min_leaf)
                .into_iter()
                .enumerate()
                .filter_map(|(c, s)| s.map(|s| (c, s)))
                .collect()
        } else {
            splits
                .iter()
                .enumerate()
                .filter_map(|(c, split)| {
                    let (l, r) = split_units(x, units, split);
                    (l.len() >= cfg.min_leaf && r.len() >= cfg.min_leaf)
                        .then(|| (c, sse(tau_hat, &l) + sse(tau_hat, &r)))
                })
                .collect()
        };
        for (c, child_sse) in scored {
            let gain = parent - child_sse;
            let replace = match &best {
                None => true,
                Some((g, _)) => gain > *g + tie_tol(gain, *g),
            };
            if replace {
                best = Some((gain, splits[c].clone()));
            }
        }
    }
    match best {
        Some((gain, split)) if gain / tau_hat.len() as f64 > cfg.depth_penalty + tie_tol(gain, 0.0) => {
            let (l, r) = split_units(x, units, &split);
            Node::split(
                split,
                greedy_node(tau_hat, x, grid, cfg, &l, depth + 1),
                greedy_node(tau_hat, x, grid, cfg, &r, depth + 1),
            )
        }
        _ => Node::Leaf(()),
    }
}

/// CART-style recursive partitioning of the posterior means `tau_hat`
/// (risk-neutral utility). A node is split on the grid split with the largest
/// SSE reduction, unless that reduction divided by `N` is at most `η`.
pub fn search_greedy_rn(tau_hat: &[f64], d: &Dataset, grid: &CutpointGrid, cfg: &SearchConfig) -> Result<SubgroupTree> {
    cfg.validate()?;
    if cfg.lambda != 1.0 {
        return Err(Error::invalid("greedy search is only valid for the risk-neutral utility (lambda = 1)"));
    }
    if tau_hat.len() != d.n() {
        return Err(Error::invalid("tau_hat length does not match the data set"));
    }
    let units: Vec<usize> = (0..d.n()).collect();
    Ok(SubgroupTree::from_shape(&greedy_node(tau_hat, d.x(), grid, cfg, &units, 0)))
}

/// Run the search selected by `cfg.mode` and report its utility.
pub fn search(draws: &PosteriorDraws, d: &Dataset, grid: &CutpointGrid, cfg: &SearchConfig) -> Result<SearchOutcome> {
    match cfg.mode {
        SearchMode::Exact => search_exact(draws, d, grid, cfg),
        SearchMode::Greedy => {
            let tree = search_greedy_rn(&draws.posterior_mean(), d, grid, cfg)?;
            let report = expected_utility(draws, &tree.partition(d)?, cfg.lambda)?;
            Ok(SearchOutcome {
                penalized_value: report.value - cfg.depth_penalty * tree.depth() as f64,
                report,
                tree,
                trees_covered: f64::NAN,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Prespecified partitions

/// A partition by one categorical factor or the crossing of two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrespecifiedPartition {
    pub name: String,
    pub factors: Vec<String>,
}

/// Cells of the partition with their labels.
pub fn prespecified_cells(d: &Dataset, spec: &PrespecifiedPartition) -> Result<(Partition, Vec<String>)> {
    if spec.factors.is_empty() || spec.factors.len() > 2 {
        return Err(Error::invalid(format!(
            "partition {:?} must name one or two factors",
            spec.name
        )));
    }
    let mut codes = vec![0usize; d.n()];
    let mut labels = vec![String::new()];
    for f in &spec.factors {
        let j = d.column_index(f)?;
        let col = &d.columns()[j];
        let levels = col
            .levels()
            .ok_or_else(|| Error::invalid(format!("factor {f:?} is not categorical")))?;
        for (i, c) in codes.iter_mut().enumerate() {
            *c = *c * levels + d.x()[(i, j)] as usize;
        }
        labels = labels
            .iter()
            .flat_map(|prefix| {
                (0..levels).map(move |l| {
                    let cell = format!("{}={}", col.name, col.label(l));
                    if prefix.is_empty() {
                        cell
                    } else {
                        format!("{prefix} & {cell}")
                    }
                })
            })
            .collect();
    }
    let k = labels.len();
    Ok((Partition::new(codes, k)?, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub partition: String,
    pub lambda: f64,
    /// `None` when the partition is infeasible.
    pub value: Option<f64>,
    /// 1 = best within this λ.
    pub rank: Option<usize>,
    /// `"ok"` or a description of why the partition was excluded.
    pub status: String,
}

/// Expected utility and within-λ rank of each prespecified partition.
pub fn evaluate_prespecified(draws: &PosteriorDraws, d: &Dataset, groups: &[PrespecifiedPartition], lambdas: &[f64]) -> Result<Vec<RankingRow>> {
    let cells: Vec<(Partition, Vec<String>)> = groups
        .iter()
        .map(|g| prespecified_cells(d, g))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(groups.len() * lambdas.len());
    for &lambda in lambdas {
        let mut block: Vec<RankingRow> = groups
            .iter()
            .zip(&cells)
            .map(|(g, (part, labels))| match part.first_empty() {
                Some(k) => Ok(RankingRow {
                    partition: g.name.clone(),
                    lambda,
                    value: None,
                    rank: None,
                    status: format!("infeasible: empty cell {}", labels[k]),
                }),
                None => Ok(RankingRow {
                    partition: g.name.clone(),
                    lambda,
                    value: Some(expected_utility(draws, part, lambda)?.value),
                    rank: None,
                    status: "ok".into(),
                }),
            })
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..block.len()).filter(|&i| block[i].value.is_some()).collect();
        order.sort_by(|&a, &b| {
            block[b].value.unwrap().total_cmp(&block[a].value.unwrap()).then(a.cmp(&b))
        });
        for (r, &i) in order.iter().enumerate() {
            block[i].rank = Some(r + 1);
        }
        rows.extend(block);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Policy search

fn leaf_action(sum: f64) -> (f64, Action) {
    if sum > 0.0 {
        (sum, Action::Treat)
    } else {
        (0.0, Action::Control)
    }
}

fn policy_depth1(scores: &[f64], x: &DMatrix<f64>, grid: &CutpointGrid, units: &[usize]) -> (f64, Node<Action>) {
    let total: f64 = units.iter().map(|&i| scores[i]).sum();
    let (v, a) = leaf_action(total);
    let mut best = (v, Node::Leaf(a));
    for (j, splits) in grid.columns.iter().enumerate() {
        if splits.is_empty() {
            continue;
        }
        let scored: Vec<(usize, f64, f64)> = if matches!(splits[0], Split::Threshold { .. }) {
            let mut order = units.to_vec();
            order.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]));
            let vals: Vec<f64> = order.iter().map(|&i| x[(i, j)]).collect();
            let mut prefix = vec![0.0; order.len() + 1];
            for (k, &i) in order.iter().enumerate() {
                prefix[k + 1] = prefix[k] + scores[i];
            }
            let n = order.len();
            splits
                .iter()
                .enumerate()
                .filter_map(|(c, s)| match s {
                    Split::Threshold { threshold, .. } => {
                        let left = vals.partition_point(|v| v <= threshold);
                        Some((c, prefix[left], prefix[n] - prefix[left]))
                    }
                    Split::Levels { .. } => None,
                })
                .collect()
        } else {
            splits
                .iter()
                .enumerate()
                .map(|(c, split)| {
                    let (l, r): (Vec<usize>, Vec<usize>) = split_units(x, units, split);
                    (c, l.iter().map(|&i| scores[i]).sum(), r.iter().map(|&i| scores[i]).sum())
                })
                .collect()
        };
        for (c, sl, sr) in scored {
            let ((vl, al), (vr, ar)) = (leaf_action(sl), leaf_action(sr));
            let tree = Node::split(splits[c].clone(), Node::Leaf(al), Node::Leaf(ar));
            if better(vl + vr, &tree, best.0, &best.1) {
                best = (vl + vr, tree);
            }
        }
    }
    best
}

/// Exact maximizer of `Σ_i Γ_i V(X_i)` over policy trees of depth at most
/// `max_depth ≤ 2` built from grid splits. Each leaf treats iff its score sum
/// is positive.
pub fn policy_search_exact(scores: &[f64], d: &Dataset, grid: &CutpointGrid, max_depth: usize) -> Result<(PolicyTree, f64)> {
    if max_depth > MAX_POLICY_DEPTH {
        return Err(Error::invalid(format!(
            "exact policy search supports depth <= {MAX_POLICY_DEPTH}, got {max_depth}"
        )));
    }
    if scores.len() != d.n() {
        return Err(Error::invalid("one score per unit is required"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let x = d.x();
    let units: Vec<usize> = (0..d.n()).collect();
    let (value, root) = match max_depth {
        0 => {
            let (v, a) = leaf_action(scores.iter().sum());
            (v, Node::Leaf(a))
        }
        1 => policy_depth1(scores, x, grid, &units),
        _ => {
            let mut best = policy_depth1(scores, x, grid, &units);
            let splits: Vec<&Split> = grid.iter().collect();
            let results: Vec<(f64, Node<Action>)> = splits
                .par_iter()
                .map(|split| {
                    let (l, r) = split_units(x, &units, split);
                    let (vl, tl) = policy_depth1(scores, x, grid, &l);
                    let (vr, tr) = policy_depth1(scores, x, grid, &r);
                    (vl + vr, Node::split((*split).clone(), tl, tr))
                })
                .collect();
            for (v, t) in results {
                if better(v, &t, best.0, &best.1) {
                    best = (v, t);
                }
            }
            best
        }
    };
    Ok((PolicyTree { root }, value))
}
