use ndarray::ArrayView2;
use rand::Rng;

use super::{partition, CutGrid, NodeKind, SplitRule, Tree};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
    Swap,
}

/// Base selection weights for grow, prune, change and swap, renormalised over
/// the moves a given tree admits.
pub const MOVE_WEIGHTS: [(MoveKind, f64); 4] = [
    (MoveKind::Grow, 0.25),
    (MoveKind::Prune, 0.25),
    (MoveKind::Change, 0.4),
    (MoveKind::Swap, 0.1),
];

/// A candidate tree together with its partition of the training rows.
#[derive(Debug, Clone)]
pub struct MoveProposal {
    pub kind: MoveKind,
    pub new_tree: Tree,
    /// `log q(T | T') - log q(T' | T)`. The split-rule prior is uniform over
    /// (variable, observed value) pairs, the same law the proposal draws rules
    /// from, so rule factors cancel and are left out on both sides.
    pub log_transition_ratio: f64,
    pub assignment: Vec<usize>,
}

fn split_nodes(tree: &Tree) -> Vec<usize> {
    tree.nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.kind, NodeKind::Split { .. }))
        .map(|(i, _)| i)
        .collect()
}

/// Internal nodes whose two children are leaves.
fn prunable_nodes(tree: &Tree) -> Vec<usize> {
    let nodes = tree.nodes();
    split_nodes(tree)
        .into_iter()
        .filter(|&i| match nodes[i].kind {
            NodeKind::Split { left, right, .. } => {
                matches!(nodes[left].kind, NodeKind::Leaf(_))
                    && matches!(nodes[right].kind, NodeKind::Leaf(_))
            }
            NodeKind::Leaf(_) => false,
        })
        .collect()
}

/// (parent, child) pairs where both are internal.
fn swappable_pairs(tree: &Tree) -> Vec<(usize, usize)> {
    let nodes = tree.nodes();
    let mut pairs = Vec::new();
    for i in split_nodes(tree) {
        if let NodeKind::Split { left, right, .. } = nodes[i].kind {
            for c in [left, right] {
                if matches!(nodes[c].kind, NodeKind::Split { .. }) {
                    pairs.push((i, c));
                }
            }
        }
    }
    pairs
}

fn is_feasible(tree: &Tree, kind: MoveKind) -> bool {
    match kind {
        MoveKind::Grow => true,
        MoveKind::Prune | MoveKind::Change => !tree.is_stump(),
        MoveKind::Swap => !swappable_pairs(tree).is_empty(),
    }
}

/// Probability of selecting `kind` for `tree` after renormalising over
/// feasible moves.
pub(crate) fn move_probability(tree: &Tree, kind: MoveKind) -> f64 {
    let total: f64 = MOVE_WEIGHTS
        .iter()
        .filter(|(k, _)| is_feasible(tree, *k))
        .map(|(_, w)| w)
        .sum();
    let w = MOVE_WEIGHTS.iter().find(|(k, _)| *k == kind).unwrap().1;
    if is_feasible(tree, kind) {
        w / total
    } else {
        0.0
    }
}

fn choose_kind<R: Rng + ?Sized>(tree: &Tree, rng: &mut R) -> MoveKind {
    let feasible: Vec<(MoveKind, f64)> = MOVE_WEIGHTS
        .iter()
        .copied()
        .filter(|(k, _)| is_feasible(tree, *k))
        .collect();
    let total: f64 = feasible.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in &feasible {
        if u < *w {
            return *k;
        }
        u -= w;
    }
    feasible.last().unwrap().0
}

fn random_rule<R: Rng + ?Sized>(grid: &CutGrid, rng: &mut R) -> Option<SplitRule> {
    let variable = rng.random_range(0..grid.num_variables());
    let cuts = grid.cutpoints(variable);
    if cuts.is_empty() {
        return None;
    }
    Some(SplitRule::new(variable, cuts[rng.random_range(0..cuts.len())]))
}

pub(crate) fn grow_log_ratio(old: &Tree, new: &Tree) -> f64 {
    let reverse = move_probability(new, MoveKind::Prune).ln() - (prunable_nodes(new).len() as f64).ln();
    let forward = move_probability(old, MoveKind::Grow).ln() - (old.num_leaves() as f64).ln();
    reverse - forward
}

pub(crate) fn prune_log_ratio(old: &Tree, new: &Tree) -> f64 {
    -grow_log_ratio(new, old)
}

/// Draws a structural move for `tree`.
///
/// Returns `Ok(None)` when the drawn proposal leaves a leaf with fewer than
/// `min_leaf` rows of `x`; the caller treats that as a rejection.
pub fn propose_move<R: Rng + ?Sized>(
    tree: &Tree,
    x: &ArrayView2<f64>,
    grid: &CutGrid,
    min_leaf: usize,
    rng: &mut R,
) -> Result<Option<MoveProposal>> {
    let kind = choose_kind(tree, rng);
    let mut new_tree = tree.clone();
    match kind {
        MoveKind::Grow => {
            let leaf = rng.random_range(0..tree.num_leaves());
            let Some(rule) = random_rule(grid, rng) else {
                return Ok(None);
            };
            let node = tree.leaves[leaf];
            let depth = tree.nodes()[node].depth;
            let value = tree.leaf_value(leaf).to_vec();
            let nodes = new_tree.nodes_mut();
            let left = nodes.len();
            for _ in 0..2 {
                nodes.push(super::Node {
                    depth: depth + 1,
                    kind: NodeKind::Leaf(value.clone()),
                });
            }
            nodes[node].kind = NodeKind::Split {
                rule,
                left,
                right: left + 1,
            };
        }
        MoveKind::Prune => {
            let candidates = prunable_nodes(tree);
            let node = candidates[rng.random_range(0..candidates.len())];
            new_tree.nodes_mut()[node].kind = NodeKind::Leaf(vec![0.0; tree.dim()]);
        }
        MoveKind::Change => {
            let candidates = split_nodes(tree);
            let node = candidates[rng.random_range(0..candidates.len())];
            let Some(rule) = random_rule(grid, rng) else {
                return Ok(None);
            };
            if let NodeKind::Split { rule: r, .. } = &mut new_tree.nodes_mut()[node].kind {
                *r = rule;
            }
        }
        MoveKind::Swap => {
            let pairs = swappable_pairs(tree);
            let (parent, child) = pairs[rng.random_range(0..pairs.len())];
            let nodes = new_tree.nodes_mut();
            let rule_of = |k: &NodeKind| match k {
                NodeKind::Split { rule, .. } => *rule,
                NodeKind::Leaf(_) => unreachable!(),
            };
            let (pr, cr) = (rule_of(&nodes[parent].kind), rule_of(&nodes[child].kind));
            for (idx, rule) in [(parent, cr), (child, pr)] {
                if let NodeKind::Split { rule: r, .. } = &mut nodes[idx].kind {
                    *r = rule;
                }
            }
        }
    }
    new_tree.compact();

    let assignment = partition(&new_tree, x);
    if kind != MoveKind::Prune {
        let mut counts = vec![0usize; new_tree.num_leaves()];
        for &leaf in &assignment {
            counts[leaf] += 1;
        }
        if counts.iter().any(|&c| c < min_leaf) {
            return Ok(None);
        }
    }

    let log_transition_ratio = match kind {
        MoveKind::Grow => grow_log_ratio(tree, &new_tree),
        MoveKind::Prune => prune_log_ratio(tree, &new_tree),
        MoveKind::Change | MoveKind::Swap => 0.0,
    };
    Ok(Some(MoveProposal {
        kind,
        new_tree,
        log_transition_ratio,
        assignment,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::MIN_LEAF_SIZE;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>())
    }

    fn check_invariants(tree: &Tree, x: &Array2<f64>, min_leaf: usize) {
        let nodes = tree.nodes();
        assert_eq!(nodes[0].depth, 0);
        for n in nodes {
            if let NodeKind::Split { left, right, .. } = n.kind {
                assert_eq!(nodes[left].depth, n.depth + 1);
                assert_eq!(nodes[right].depth, n.depth + 1);
            }
        }
        let assign = partition(tree, &x.view());
        let mut counts = vec![0usize; tree.num_leaves()];
        for a in assign {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c >= min_leaf), "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), x.nrows());
    }

    #[test]
    fn stump_only_grows() {
        let x = data(100, 3, 1);
        let grid = CutGrid::from_matrix(&x.view());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stump = Tree::stump(1);
        for _ in 0..200 {
            if let Some(p) = propose_move(&stump, &x.view(), &grid, MIN_LEAF_SIZE, &mut rng).unwrap() {
                assert_eq!(p.kind, MoveKind::Grow);
            }
        }
        assert_eq!(move_probability(&stump, MoveKind::Grow), 1.0);
    }

    #[test]
    fn grow_then_prune_ratios_cancel() {
        // Enumerate every grow of a depth-1 tree and its exact reverse prune.
        let x = data(60, 2, 3);
        let grid = CutGrid::from_matrix(&x.view());
        let base = Tree::join(
            SplitRule::new(0, 0.5),
            Tree::stump(1),
            Tree::stump(1),
        )
        .unwrap();
        for leaf in 0..base.num_leaves() {
            for var in 0..2 {
                for &cut in grid.cutpoints(var).iter().step_by(7) {
                    let mut grown = base.clone();
                    let node = grown.leaves[leaf];
                    let depth = grown.nodes()[node].depth;
                    let nodes = grown.nodes_mut();
                    let l = nodes.len();
                    for _ in 0..2 {
                        nodes.push(crate::trees::Node { depth: depth + 1, kind: NodeKind::Leaf(vec![0.0]) });
                    }
                    nodes[node].kind = NodeKind::Split { rule: SplitRule::new(var, cut), left: l, right: l + 1 };
                    grown.compact();
                    let forward = grow_log_ratio(&base, &grown);
                    let backward = prune_log_ratio(&grown, &base);
                    assert!((forward + backward).abs() < 1e-12);
                    // depth-1 base: grow 0.25/0.9 over 2 leaves; depth-2 tree: prune 0.25/1.0 over 1 node
                    let expected = (0.25_f64).ln() - (0.25_f64 / 0.9 / 2.0).ln();
                    assert!((forward - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn change_and_swap_are_symmetric() {
        let x = data(400, 3, 5);
        let grid = CutGrid::from_matrix(&x.view());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tree = Tree::join(
            SplitRule::new(0, 0.5),
            Tree::join(SplitRule::new(1, 0.5), Tree::stump(1), Tree::stump(1)).unwrap(),
            Tree::stump(1),
        )
        .unwrap();
        let mut seen_swap = false;
        for _ in 0..500 {
            if let Some(p) = propose_move(&tree, &x.view(), &grid, MIN_LEAF_SIZE, &mut rng).unwrap() {
                if matches!(p.kind, MoveKind::Change | MoveKind::Swap) {
                    assert_eq!(p.log_transition_ratio, 0.0);
                }
                seen_swap |= p.kind == MoveKind::Swap;
            }
        }
        assert!(seen_swap);
    }

    #[test]
    fn undersized_leaves_are_never_returned() {
        let x = data(30, 2, 9);
        let grid = CutGrid::from_matrix(&x.view());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tree = Tree::stump(1);
        for _ in 0..500 {
            if let Some(p) = propose_move(&tree, &x.view(), &grid, 8, &mut rng).unwrap() {
                check_invariants(&p.new_tree, &x, 8);
                tree = p.new_tree;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn random_move_sequences_keep_invariants(seed in 0u64..10_000, steps in 1usize..120) {
            let x = data(80, 3, seed);
            let grid = CutGrid::from_matrix(&x.view());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut tree = Tree::stump(2);
            for _ in 0..steps {
                if let Some(p) = propose_move(&tree, &x.view(), &grid, MIN_LEAF_SIZE, &mut rng).unwrap() {
                    prop_assert!(p.log_transition_ratio.is_finite());
                    tree = p.new_tree;
                    check_invariants(&tree, &x, MIN_LEAF_SIZE);
                }
            }
        }

        #[test]
        fn grow_prior_change_is_local(seed in 0u64..10_000) {
            use crate::trees::{log_tree_prior, TreePriorConfig};
            let prior = TreePriorConfig::default();
            let x = data(200, 2, seed);
            let grid = CutGrid::from_matrix(&x.view());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tree = Tree::stump(1);
            for _ in 0..40 {
                if let Some(p) = propose_move(&tree, &x.view(), &grid, MIN_LEAF_SIZE, &mut rng).unwrap() {
                    if p.kind == MoveKind::Grow {
                        // the grown leaf sat at some depth d; its term is replaced by
                        // a split at d plus two leaves at d+1
                        let old_depths: Vec<usize> = (0..tree.num_leaves()).map(|k| tree.leaf_depth(k)).collect();
                        let new_depths: Vec<usize> = (0..p.new_tree.num_leaves()).map(|k| p.new_tree.leaf_depth(k)).collect();
                        let d = (0..=old_depths.iter().copied().max().unwrap())
                            .find(|d| old_depths.iter().filter(|x| **x == *d).count()
                                > new_depths.iter().filter(|x| **x == *d).count())
                            .unwrap();
                        let leaf_term = |d: usize| (1.0 - prior.split_probability(d)).ln();
                        let local = prior.split_probability(d).ln() + 2.0 * leaf_term(d + 1) - leaf_term(d);
                        let delta = log_tree_prior(&p.new_tree, &prior) - log_tree_prior(&tree, &prior);
                        prop_assert!((delta - local).abs() < 1e-9);
                    }
                    tree = p.new_tree;
                }
            }
        }
    }
}
