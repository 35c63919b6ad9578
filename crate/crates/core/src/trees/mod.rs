//! Binary regression trees with vector-valued leaves.
//!
//! Trees are stored as a flat arena kept in pre-order, so leaf `k` is the
//! `k`-th leaf met in a depth-first, left-first walk. Every structural edit
//! re-compacts the arena to keep that numbering stable and dense.

mod codec;
mod proposal;

pub use proposal::{propose_move, MoveKind, MoveProposal, MOVE_WEIGHTS};

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Minimum number of training rows a leaf may hold.
pub const MIN_LEAF_SIZE: usize = 5;

/// "Go left if `x[variable] < cutpoint`".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRule {
    pub variable: usize,
    pub cutpoint: f64,
}

impl SplitRule {
    pub fn new(variable: usize, cutpoint: f64) -> Self {
        Self { variable, cutpoint }
    }

    #[inline]
    pub fn goes_left(&self, value: f64) -> bool {
        value < self.cutpoint
    }
}

/// Depth-penalty prior on tree shapes: a node at depth `d` splits with
/// probability `alpha * (1 + d)^(-beta)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TreePriorConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl TreePriorConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let cfg = Self { alpha, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tree prior needs alpha in (0,1) and beta >= 0, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn split_probability(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

impl Default for TreePriorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            beta: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum NodeKind {
    Leaf(Vec<f64>),
    Split {
        rule: SplitRule,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Node {
    pub depth: usize,
    pub kind: NodeKind,
}

/// A binary decision tree whose leaves carry a length-`dim` parameter vector.
/// Equality is structural: arena layout is ignored.
#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
    dim: usize,
    /// arena index of each leaf, in leaf order
    leaves: Vec<usize>,
}

impl PartialEq for Tree {
    fn eq(&self, other: &Self) -> bool {
        fn same(a: &Tree, i: usize, b: &Tree, j: usize) -> bool {
            match (&a.nodes[i].kind, &b.nodes[j].kind) {
                (NodeKind::Leaf(u), NodeKind::Leaf(v)) => u == v,
                (
                    NodeKind::Split { rule: r, left: l, right: rr },
                    NodeKind::Split { rule: s, left: m, right: sr },
                ) => r == s && same(a, *l, b, *m) && same(a, *rr, b, *sr),
                _ => false,
            }
        }
        self.dim == other.dim && same(self, 0, other, 0)
    }
}

impl Tree {
    /// A single leaf holding the zero vector.
    pub fn stump(dim: usize) -> Self {
        Self::stump_with(vec![0.0; dim])
    }

    pub fn stump_with(value: Vec<f64>) -> Self {
        let dim = value.len();
        Tree {
            nodes: vec![Node {
                depth: 0,
                kind: NodeKind::Leaf(value),
            }],
            dim,
            leaves: vec![0],
        }
    }

    /// Builds `split(rule, left, right)`; depths of the subtrees are shifted.
    pub fn join(rule: SplitRule, left: Tree, right: Tree) -> Result<Self> {
        if left.dim != right.dim {
            return Err(Error::Shape("subtrees have different leaf dimensions".into()));
        }
        let dim = left.dim;
        let mut nodes = vec![Node {
            depth: 0,
            kind: NodeKind::Split {
                rule,
                left: 1,
                right: 1 + left.nodes.len(),
            },
        }];
        for (offset, sub) in [(1, &left), (1 + left.nodes.len(), &right)] {
            for node in &sub.nodes {
                let kind = match &node.kind {
                    NodeKind::Leaf(v) => NodeKind::Leaf(v.clone()),
                    NodeKind::Split { rule, left, right } => NodeKind::Split {
                        rule: *rule,
                        left: left + offset,
                        right: right + offset,
                    },
                };
                nodes.push(Node {
                    depth: node.depth + 1,
                    kind,
                });
            }
        }
        let mut tree = Tree {
            nodes,
            dim,
            leaves: Vec::new(),
        };
        tree.compact();
        Ok(tree)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn num_internal(&self) -> usize {
        self.nodes.len() - self.leaves.len()
    }

    pub fn is_stump(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn leaf_value(&self, leaf: usize) -> &[f64] {
        match &self.nodes[self.leaves[leaf]].kind {
            NodeKind::Leaf(v) => v,
            NodeKind::Split { .. } => unreachable!("leaf table points at a split"),
        }
    }

    pub fn set_leaf_value(&mut self, leaf: usize, value: Vec<f64>) {
        debug_assert_eq!(value.len(), self.dim);
        let idx = self.leaves[leaf];
        self.nodes[idx].kind = NodeKind::Leaf(value);
    }

    pub fn leaf_depth(&self, leaf: usize) -> usize {
        self.nodes[self.leaves[leaf]].depth
    }

    /// Split rules in pre-order.
    pub fn split_rules(&self) -> Vec<SplitRule> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Split { rule, .. } => Some(rule),
                NodeKind::Leaf(_) => None,
            })
            .collect()
    }

    pub fn max_variable(&self) -> Option<usize> {
        self.split_rules().iter().map(|r| r.variable).max()
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut Vec<Node> {
        &mut self.nodes
    }

    /// Leaf index reached by a single row.
    #[inline]
    pub fn leaf_for(&self, row: impl Fn(usize) -> f64) -> usize {
        let mut idx = 0;
        loop {
            match &self.nodes[idx].kind {
                NodeKind::Leaf(_) => return self.leaf_slot(idx),
                NodeKind::Split { rule, left, right } => {
                    idx = if rule.goes_left(row(rule.variable)) {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    #[inline]
    fn leaf_slot(&self, node: usize) -> usize {
        // leaves are few; a linear scan beats a side table here
        self.leaves.iter().position(|&l| l == node).expect("leaf node")
    }

    /// Rebuilds the arena in pre-order, dropping unreachable nodes and
    /// recomputing depths and the leaf table.
    pub(crate) fn compact(&mut self) {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut leaves = Vec::new();
        fn visit(src: &[Node], idx: usize, depth: usize, out: &mut Vec<Node>, leaves: &mut Vec<usize>) -> usize {
            let pos = out.len();
            match &src[idx].kind {
                NodeKind::Leaf(v) => {
                    leaves.push(pos);
                    out.push(Node {
                        depth,
                        kind: NodeKind::Leaf(v.clone()),
                    });
                }
                NodeKind::Split { rule, left, right } => {
                    out.push(Node {
                        depth,
                        kind: NodeKind::Split {
                            rule: *rule,
                            left: 0,
                            right: 0,
                        },
                    });
                    let l = visit(src, *left, depth + 1, out, leaves);
                    let r = visit(src, *right, depth + 1, out, leaves);
                    out[pos].kind = NodeKind::Split {
                        rule: *rule,
                        left: l,
                        right: r,
                    };
                }
            }
            pos
        }
        visit(&self.nodes, 0, 0, &mut out, &mut leaves);
        self.nodes = out;
        self.leaves = leaves;
    }

    /// Sum-of-contributions helper: the value of the leaf a row lands in.
    pub fn predict_row(&self, x: &ArrayView2<f64>, row: usize) -> &[f64] {
        self.leaf_value(self.leaf_for(|v| x[[row, v]]))
    }
}

/// Assigns every row of `x` to a leaf of `tree`.
pub fn partition(tree: &Tree, x: &ArrayView2<f64>) -> Vec<usize> {
    (0..x.nrows())
        .map(|i| tree.leaf_for(|v| x[[i, v]]))
        .collect()
}

/// Log prior of the tree shape under the depth penalty.
pub fn log_tree_prior(tree: &Tree, prior: &TreePriorConfig) -> f64 {
    tree.nodes
        .iter()
        .map(|n| match n.kind {
            NodeKind::Leaf(_) => (1.0 - prior.split_probability(n.depth)).ln(),
            NodeKind::Split { .. } => prior.alpha.ln() - prior.beta * (1.0 + n.depth as f64).ln(),
        })
        .sum()
}

/// Distinct observed values of each covariate, ascending. Split cutpoints are
/// drawn from these grids.
#[derive(Debug, Clone)]
pub struct CutGrid {
    values: Vec<Vec<f64>>,
}

impl CutGrid {
    pub fn from_matrix(x: &ArrayView2<f64>) -> Self {
        let values = x
            .columns()
            .into_iter()
            .map(|col| {
                let mut v: Vec<f64> = col.iter().copied().collect();
                v.sort_by(|a, b| a.total_cmp(b));
                v.dedup();
                v
            })
            .collect();
        Self { values }
    }

    pub fn num_variables(&self) -> usize {
        self.values.len()
    }

    pub fn cutpoints(&self, variable: usize) -> &[f64] {
        &self.values[variable]
    }
}

/// Per-leaf sufficient statistics of the partial residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafStats {
    pub count: usize,
    /// `Σ R_i`
    pub sum: Vec<f64>,
    /// `Σ R_i R_iᵀ`, row-major `p×p`
    pub outer: Vec<f64>,
    pub treatment: Option<TreatmentStats>,
}

/// Treatment cross-terms for leaves of a treatment-effect tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentStats {
    /// `Σ Z_i Z_iᵀ`, row-major
    pub ztz: Vec<f64>,
    /// `zr[a*p + b] = Σ_i Z_ia R_ib`; with it `Σ_i Z_i ∘ (Σ⁻¹ R_i)` has
    /// component `a` equal to `Σ_b Σ⁻¹_ab zr[a*p + b]`.
    pub zr: Vec<f64>,
}

impl LeafStats {
    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    fn empty(p: usize, treated: bool) -> Self {
        LeafStats {
            count: 0,
            sum: vec![0.0; p],
            outer: vec![0.0; p * p],
            treatment: treated.then(|| TreatmentStats {
                ztz: vec![0.0; p * p],
                zr: vec![0.0; p * p],
            }),
        }
    }
}

/// Accumulates leaf statistics from a precomputed partition. `residuals` and
/// `z` are row-major `n×p`.
pub(crate) fn accumulate_stats(
    num_leaves: usize,
    assignment: &[usize],
    residuals: &[f64],
    z: Option<&[f64]>,
    p: usize,
) -> Result<Vec<LeafStats>> {
    let mut stats: Vec<LeafStats> = (0..num_leaves)
        .map(|_| LeafStats::empty(p, z.is_some()))
        .collect();
    for (i, &leaf) in assignment.iter().enumerate() {
        let r = &residuals[i * p..(i + 1) * p];
        let s = &mut stats[leaf];
        s.count += 1;
        for a in 0..p {
            s.sum[a] += r[a];
            for b in 0..p {
                s.outer[a * p + b] += r[a] * r[b];
            }
        }
        if let (Some(z), Some(t)) = (z, s.treatment.as_mut()) {
            let zi = &z[i * p..(i + 1) * p];
            for a in 0..p {
                if zi[a] == 0.0 {
                    continue;
                }
                for b in 0..p {
                    t.ztz[a * p + b] += zi[a] * zi[b];
                    t.zr[a * p + b] += zi[a] * r[b];
                }
            }
        }
    }
    if let Some(leaf) = stats.iter().position(|s| s.count == 0) {
        return Err(Error::TreeInvariant {
            leaf,
            reason: "no training rows".into(),
        });
    }
    Ok(stats)
}

/// Sufficient statistics of `residuals` (n×p) per leaf of `tree`; `z` (n×p
/// binary) adds the treatment cross-terms.
pub fn leaf_suffstats(
    tree: &Tree,
    x: &ArrayView2<f64>,
    residuals: &ArrayView2<f64>,
    z: Option<&ArrayView2<f64>>,
) -> Result<Vec<LeafStats>> {
    if residuals.nrows() != x.nrows() {
        return Err(Error::Shape(format!(
            "{} residual rows for {} covariate rows",
            residuals.nrows(),
            x.nrows()
        )));
    }
    let p = residuals.ncols();
    let assignment = partition(tree, x);
    let r: Vec<f64> = residuals.iter().copied().collect();
    let zf: Option<Vec<f64>> = z.map(|z| z.iter().copied().collect());
    accumulate_stats(tree.num_leaves(), &assignment, &r, zf.as_deref(), p)
}
