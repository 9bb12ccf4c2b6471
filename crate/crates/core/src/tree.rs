//! Depth-bounded binary decision trees over dataset covariates.
//!
//! The same node type backs both subgroup trees (leaves carry a group index)
//! and policy trees (leaves carry a treat/control action).

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Covariate, Dataset};
use crate::error::{Error, Result};

/// An axis-aligned split. Units satisfying the condition go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Split {
    /// `x[column] <= threshold`
    Threshold { column: usize, threshold: f64 },
    /// `x[column]` is one of the levels set in `mask`
    Levels { column: usize, mask: u64 },
}

impl Split {
    pub fn column(&self) -> usize {
        match *self {
            Split::Threshold { column, .. } | Split::Levels { column, .. } => column,
        }
    }

    #[inline]
    pub fn goes_left_value(&self, v: f64) -> bool {
        match *self {
            Split::Threshold { threshold, .. } => v <= threshold,
            Split::Levels { mask, .. } => (mask >> (v as u64)) & 1 == 1,
        }
    }

    #[inline]
    pub fn goes_left(&self, x: &DMatrix<f64>, row: usize) -> bool {
        self.goes_left_value(x[(row, self.column())])
    }

    /// Total order used for deterministic tie-breaking: column first, then
    /// threshold (or mask).
    pub fn cmp_key(&self, other: &Split) -> Ordering {
        self.column().cmp(&other.column()).then_with(|| match (self, other) {
            (Split::Threshold { threshold: a, .. }, Split::Threshold { threshold: b, .. }) => {
                a.total_cmp(b)
            }
            (Split::Levels { mask: a, .. }, Split::Levels { mask: b, .. }) => a.cmp(b),
            (Split::Threshold { .. }, Split::Levels { .. }) => Ordering::Less,
            (Split::Levels { .. }, Split::Threshold { .. }) => Ordering::Greater,
        })
    }

    pub fn describe(&self, columns: &[Covariate]) -> String {
        let name = |j: usize| {
            columns
                .get(j)
                .map(|c| c.name.clone())
                .unwrap_or_else(|| format!("x{j}"))
        };
        match *self {
            Split::Threshold { column, threshold } => format!("{} <= {threshold:.4}", name(column)),
            Split::Levels { column, mask } => {
                let labels: Vec<String> = (0..64)
                    .filter(|l| (mask >> l) & 1 == 1)
                    .map(|l| {
                        columns
                            .get(column)
                            .map(|c| c.label(l))
                            .unwrap_or_else(|| l.to_string())
                    })
                    .collect();
                format!("{} in {{{}}}", name(column), labels.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node<L> {
    Leaf(L),
    Split {
        rule: Split,
        left: Box<Node<L>>,
        right: Box<Node<L>>,
    },
}

impl<L> Node<L> {
    pub fn split(rule: Split, left: Node<L>, right: Node<L>) -> Self {
        Node::Split {
            rule,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf(_) => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    pub fn leaf_for(&self, x: &DMatrix<f64>, row: usize) -> &L {
        let mut node = self;
        loop {
            match node {
                Node::Leaf(l) => return l,
                Node::Split { rule, left, right } => {
                    node = if rule.goes_left(x, row) { left } else { right };
                }
            }
        }
    }

    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Node<M> {
        match self {
            Node::Leaf(l) => Node::Leaf(f(l)),
            Node::Split { rule, left, right } => Node::split(rule.clone(), left.map(f), right.map(f)),
        }
    }

    /// Preorder split sequence, used as the lexicographic tie-break key.
    pub fn splits_preorder(&self) -> Vec<&Split> {
        fn walk<'a, L>(n: &'a Node<L>, out: &mut Vec<&'a Split>) {
            if let Node::Split { rule, left, right } = n {
                out.push(rule);
                walk(left, out);
                walk(right, out);
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    fn check_columns(&self, p: usize) -> Result<()> {
        match self {
            Node::Leaf(_) => Ok(()),
            Node::Split { rule, left, right } => {
                if rule.column() >= p {
                    return Err(Error::invalid(format!(
                        "split references column {} but data has {p}",
                        rule.column()
                    )));
                }
                left.check_columns(p)?;
                right.check_columns(p)
            }
        }
    }

    /// Indented rendering; `leaf` formats each leaf payload.
    pub fn render(&self, columns: &[Covariate], leaf: &impl Fn(&L) -> String) -> String {
        fn walk<L>(
            n: &Node<L>,
            columns: &[Covariate],
            leaf: &impl Fn(&L) -> String,
            indent: usize,
            out: &mut String,
        ) {
            let pad = "    ".repeat(indent);
            match n {
                Node::Leaf(l) => {
                    let _ = writeln!(out, "{pad}{}", leaf(l));
                }
                Node::Split { rule, left, right } => {
                    let _ = writeln!(out, "{pad}if {}:", rule.describe(columns));
                    walk(left, columns, leaf, indent + 1, out);
                    let _ = writeln!(out, "{pad}else:");
                    walk(right, columns, leaf, indent + 1, out);
                }
            }
        }
        let mut out = String::new();
        walk(self, columns, leaf, 0, &mut out);
        out
    }
}

/// Compare two trees by (depth, preorder split encoding).
pub fn cmp_tree_encoding<A, B>(a: &Node<A>, b: &Node<B>) -> Ordering {
    a.depth().cmp(&b.depth()).then_with(|| {
        let (ea, eb) = (a.splits_preorder(), b.splits_preorder());
        for (x, y) in ea.iter().zip(&eb) {
            match x.cmp_key(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        ea.len().cmp(&eb.len())
    })
}

/// A partition of the units into `K` groups given by the leaves of a tree.
/// Leaves are numbered `0..K` from left to right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTree {
    pub root: Node<usize>,
    pub k: usize,
}

impl SubgroupTree {
    /// The single-group tree.
    pub fn trivial() -> Self {
        SubgroupTree {
            root: Node::Leaf(0),
            k: 1,
        }
    }

    /// Number the leaves of `shape` from left to right.
    pub fn from_shape<L>(shape: &Node<L>) -> Self {
        let mut k = 0;
        let root = shape.map(&mut |_| {
            k += 1;
            k - 1
        });
        SubgroupTree { root, k }
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Group index of every row of `d`.
    pub fn assign(&self, d: &Dataset) -> Result<Vec<usize>> {
        self.root.check_columns(d.p())?;
        Ok((0..d.n()).map(|i| *self.root.leaf_for(d.x(), i)).collect())
    }

    pub fn partition(&self, d: &Dataset) -> Result<Partition> {
        Partition::new(self.assign(d)?, self.k)
    }

    pub fn render(&self, d: &Dataset) -> String {
        let sizes = self.partition(d).map(|p| p.sizes().to_vec()).ok();
        self.root.render(d.columns(), &|k: &usize| match &sizes {
            Some(s) => format!("group {} (n = {})", k + 1, s[*k]),
            None => format!("group {}", k + 1),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Control,
    Treat,
}

impl Action {
    pub fn treats(self) -> bool {
        self == Action::Treat
    }
}

/// A depth-bounded treatment rule `V(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub root: Node<Action>,
}

impl PolicyTree {
    pub fn constant(action: Action) -> Self {
        PolicyTree {
            root: Node::Leaf(action),
        }
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn actions(&self, d: &Dataset) -> Result<Vec<Action>> {
        self.root.check_columns(d.p())?;
        Ok((0..d.n()).map(|i| *self.root.leaf_for(d.x(), i)).collect())
    }

    pub fn render(&self, d: &Dataset) -> String {
        self.root.render(d.columns(), &|a: &Action| match a {
            Action::Treat => "treat".to_string(),
            Action::Control => "do not treat".to_string(),
        })
    }
}

/// Group labels `0..k` for every unit, with cached group sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    groups: Vec<usize>,
    sizes: Vec<usize>,
}

impl Partition {
    pub fn new(groups: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("a partition needs at least one group"));
        }
        let mut sizes = vec![0; k];
        for &g in &groups {
            if g >= k {
                return Err(Error::invalid(format!("group label {g} not below {k}")));
            }
            sizes[g] += 1;
        }
        Ok(Partition { groups, sizes })
    }

    pub fn pooled(n: usize) -> Self {
        Partition {
            groups: vec![0; n],
            sizes: vec![n],
        }
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn n(&self) -> usize {
        self.groups.len()
    }

    pub fn first_empty(&self) -> Option<usize> {
        self.sizes.iter().position(|&s| s == 0)
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == k)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Propensity;

    fn toy() -> Dataset {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 1.0, 0.0, 2.0, 2.0, 3.0, 0.0]);
        Dataset::new(
            vec![0.0; 4],
            vec![0, 1, 0, 1],
            x,
            vec![Covariate::continuous("x1"), Covariate::categorical("c", 3)],
            Propensity::Constant(0.5),
        )
        .unwrap()
    }

    #[test]
    fn numbering_and_assignment() {
        let shape = Node::split(
            Split::Threshold {
                column: 0,
                threshold: 1.5,
            },
            Node::split(Split::Levels { column: 1, mask: 0b001 }, Node::Leaf(()), Node::Leaf(())),
            Node::Leaf(()),
        );
        let t = SubgroupTree::from_shape(&shape);
        assert_eq!((t.k, t.depth()), (3, 2));
        assert_eq!(t.assign(&toy()).unwrap(), vec![1, 0, 2, 2]);
        let text = t.render(&toy());
        assert!(text.contains("x1 <= 1.5000"));
        assert!(text.contains("c in {0}"));
    }

    #[test]
    fn serde_round_trip() {
        let t = SubgroupTree::from_shape(&Node::split(
            Split::Threshold {
                column: 0,
                threshold: 0.25,
            },
            Node::Leaf(()),
            Node::Leaf(()),
        ));
        let s = serde_json::to_string(&t).unwrap();
        let back: SubgroupTree = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn encoding_order_prefers_shallow_then_low_column() {
        let a: Node<()> = Node::Leaf(());
        let b = Node::split(
            Split::Threshold {
                column: 1,
                threshold: 0.0,
            },
            Node::Leaf(()),
            Node::Leaf(()),
        );
        let c = Node::split(
            Split::Threshold {
                column: 0,
                threshold: 5.0,
            },
            Node::Leaf(()),
            Node::Leaf(()),
        );
        assert_eq!(cmp_tree_encoding(&a, &b), Ordering::Less);
        assert_eq!(cmp_tree_encoding(&c, &b), Ordering::Less);
    }

    #[test]
    fn partition_rejects_bad_labels() {
        assert!(Partition::new(vec![0, 2], 2).is_err());
        let p = Partition::new(vec![0, 0, 2], 3).unwrap();
        assert_eq!(p.first_empty(), Some(1));
    }
}
