//! Candidate splits for tree search.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, Dataset};
use crate::tree::Split;

/// Categorical columns with at most this many observed levels get every
/// level subset as a candidate; wider columns only get one-vs-rest splits.
pub const MAX_SUBSET_LEVELS: usize = 4;

/// Candidate splits per covariate column, each leaving at least `min_leaf`
/// units of the data set on either side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutpointGrid {
    pub min_leaf: usize,
    pub columns: Vec<Vec<Split>>,
}

impl CutpointGrid {
    pub fn len(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every split in column order.
    pub fn iter(&self) -> impl Iterator<Item = &Split> {
        self.columns.iter().flatten()
    }

    /// Thresholds of a continuous column (empty for categorical columns).
    pub fn thresholds(&self, column: usize) -> Vec<f64> {
        self.columns[column]
            .iter()
            .filter_map(|s| match s {
                Split::Threshold { threshold, .. } => Some(*threshold),
                Split::Levels { .. } => None,
            })
            .collect()
    }
}

/// Midpoints between consecutive distinct values for continuous columns
/// (evenly subsampled down to `max_thresholds`), and level-subset splits for
/// categorical columns.
pub fn build_cutpoints(d: &Dataset, min_leaf: usize, max_thresholds: usize) -> CutpointGrid {
    let min_leaf = min_leaf.max(1);
    let n = d.n();
    let columns = d
        .columns()
        .iter()
        .enumerate()
        .map(|(j, col)| {
            let values: Vec<f64> = d.x().column(j).iter().copied().collect();
            match col.kind {
                ColumnKind::Continuous => continuous_splits(j, &values, min_leaf, max_thresholds),
                ColumnKind::Categorical { levels } => {
                    categorical_splits(j, &values, levels, min_leaf, n)
                }
            }
        })
        .collect();
    CutpointGrid { min_leaf, columns }
}

fn continuous_splits(column: usize, values: &[f64], min_leaf: usize, max_thresholds: usize) -> Vec<Split> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut thresholds = Vec::new();
    // `i` units lie at or below sorted[i - 1].
    for i in 1..n {
        if sorted[i] > sorted[i - 1] && i >= min_leaf && n - i >= min_leaf {
            thresholds.push(0.5 * (sorted[i - 1] + sorted[i]));
        }
    }
    if max_thresholds > 0 && thresholds.len() > max_thresholds {
        let m = thresholds.len();
        thresholds = if max_thresholds == 1 {
            vec![thresholds[m / 2]]
        } else {
            let picked: BTreeSet<usize> = (0..max_thresholds)
                .map(|k| ((k as f64) * (m - 1) as f64 / (max_thresholds - 1) as f64).round() as usize)
                .collect();
            picked.into_iter().map(|k| thresholds[k]).collect()
        };
    }
    thresholds
        .into_iter()
        .map(|threshold| Split::Threshold { column, threshold })
        .collect()
}

/// Canonical representative of `{mask, complement}` over the present levels:
/// the smaller side, or on equal size the side holding the lowest level.
fn canonical(mask: u64, present: u64) -> u64 {
    let other = present & !mask;
    match mask.count_ones().cmp(&other.count_ones()) {
        std::cmp::Ordering::Less => mask,
        std::cmp::Ordering::Greater => other,
        std::cmp::Ordering::Equal => {
            if mask.trailing_zeros() < other.trailing_zeros() {
                mask
            } else {
                other
            }
        }
    }
}

fn categorical_splits(column: usize, values: &[f64], levels: usize, min_leaf: usize, n: usize) -> Vec<Split> {
    let mut counts = vec![0usize; levels];
    for &v in values {
        counts[v as usize] += 1;
    }
    let present: Vec<usize> = (0..levels).filter(|&l| counts[l] > 0).collect();
    let present_mask = present.iter().fold(0u64, |m, &l| m | (1 << l));
    let mut masks = BTreeSet::new();
    if present.len() <= MAX_SUBSET_LEVELS {
        let m = present.len();
        for bits in 1..(1u64 << m).saturating_sub(1) {
            let mask = (0..m)
                .filter(|b| (bits >> b) & 1 == 1)
                .fold(0u64, |acc, b| acc | (1 << present[b]));
            masks.insert(canonical(mask, present_mask));
        }
    } else {
        for &l in &present {
            masks.insert(canonical(1 << l, present_mask));
        }
    }
    masks
        .into_iter()
        .filter(|&mask| {
            let left: usize = (0..levels).filter(|l| (mask >> l) & 1 == 1).map(|l| counts[l]).sum();
            left >= min_leaf && n - left >= min_leaf
        })
        .map(|mask| Split::Levels { column, mask })
        .collect()
}
