//! Bayesian backfitting over one sum-of-trees ensemble.
//!
//! A [`Forest`] owns its trees, the partition each tree induces on the
//! training rows and each tree's per-row contribution. A sweep visits the
//! trees in order; for each it forms the partial residual, proposes a
//! structural move, accepts or rejects it with a Metropolis-Hastings step on
//! the leaf-integrated likelihood, and redraws the leaf parameters.

use ndarray::ArrayView2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::trees::{accumulate_stats, log_tree_prior, partition, propose_move, CutGrid, LeafStats, MoveKind, Tree, TreePriorConfig};

/// Leaf likelihood and conditional posterior used during backfitting.
pub(crate) trait LeafModel {
    fn log_marginal(&self, stats: &LeafStats) -> Result<f64>;
    fn sample<R: Rng + ?Sized>(&self, stats: &LeafStats, rng: &mut R) -> Result<Vec<f64>>;
}

/// Accepted and proposed structural moves, indexed grow, prune, change, swap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoveCounts {
    pub proposed: [u64; 4],
    pub accepted: [u64; 4],
}

impl MoveCounts {
    fn slot(kind: MoveKind) -> usize {
        match kind {
            MoveKind::Grow => 0,
            MoveKind::Prune => 1,
            MoveKind::Change => 2,
            MoveKind::Swap => 3,
        }
    }

    pub fn merge(&mut self, other: &MoveCounts) {
        for k in 0..4 {
            self.proposed[k] += other.proposed[k];
            self.accepted[k] += other.accepted[k];
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Forest {
    trees: Vec<Tree>,
    assignment: Vec<Vec<usize>>,
    /// per tree, row-major n×p leaf values
    contribution: Vec<Vec<f64>>,
    fit: Vec<f64>,
    n: usize,
    p: usize,
}

pub(crate) struct SweepSettings<'a> {
    pub x: ArrayView2<'a, f64>,
    pub grid: &'a CutGrid,
    pub prior: &'a TreePriorConfig,
    pub min_leaf: usize,
}

impl Forest {
    pub fn new(num_trees: usize, n: usize, p: usize) -> Self {
        Forest {
            trees: vec![Tree::stump(p); num_trees],
            assignment: vec![vec![0; n]; num_trees],
            contribution: vec![vec![0.0; n * p]; num_trees],
            fit: vec![0.0; n * p],
            n,
            p,
        }
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Row-major `n×p` sum of tree contributions.
    pub fn fit(&self) -> &[f64] {
        &self.fit
    }

    /// Backfits every tree so that the forest explains `target` (row-major
    /// `n×p`); with `mask` the forest's effect on row `i` is `fit_i ∘ mask_i`.
    pub fn sweep<M: LeafModel, R: Rng + ?Sized>(
        &mut self,
        settings: &SweepSettings<'_>,
        target: &[f64],
        mask: Option<&[f64]>,
        model: &M,
        rng: &mut R,
    ) -> Result<MoveCounts> {
        let (n, p) = (self.n, self.p);
        debug_assert_eq!(target.len(), n * p);
        let mut counts = MoveCounts::default();
        let apply_mask = |v: f64, k: usize| match mask {
            Some(m) => v * m[k],
            None => v,
        };
        let mut resid: Vec<f64> = (0..n * p).map(|k| target[k] - apply_mask(self.fit[k], k)).collect();

        for j in 0..self.trees.len() {
            // partial residual for tree j
            for k in 0..n * p {
                resid[k] += apply_mask(self.contribution[j][k], k);
            }
            let tree = &self.trees[j];
            let mut stats = accumulate_stats(tree.num_leaves(), &self.assignment[j], &resid, mask, p)?;

            if let Some(prop) = propose_move(tree, &settings.x, settings.grid, settings.min_leaf, rng)? {
                let slot = MoveCounts::slot(prop.kind);
                counts.proposed[slot] += 1;
                let new_stats = accumulate_stats(prop.new_tree.num_leaves(), &prop.assignment, &resid, mask, p)?;
                let old_ml = sum_marginals(model, &stats)?;
                let new_ml = sum_marginals(model, &new_stats)?;
                let log_ratio = log_tree_prior(&prop.new_tree, settings.prior) - log_tree_prior(tree, settings.prior)
                    + new_ml
                    - old_ml
                    + prop.log_transition_ratio;
                if !log_ratio.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "non-finite acceptance log-ratio ({log_ratio}) for a {:?} move",
                        prop.kind
                    )));
                }
                if rng.random::<f64>().ln() < log_ratio {
                    counts.accepted[slot] += 1;
                    self.trees[j] = prop.new_tree;
                    self.assignment[j] = prop.assignment;
                    stats = new_stats;
                }
            }

            let tree = &mut self.trees[j];
            for (leaf, s) in stats.iter().enumerate() {
                let value = model.sample(s, rng)?;
                tree.set_leaf_value(leaf, value);
            }
            let contrib = &mut self.contribution[j];
            for (i, &leaf) in self.assignment[j].iter().enumerate() {
                contrib[i * p..(i + 1) * p].copy_from_slice(tree.leaf_value(leaf));
            }
            for k in 0..n * p {
                resid[k] -= apply_mask(contrib[k], k);
            }
        }
        self.refresh_fit();
        Ok(counts)
    }

    /// Recomputes the total fit as the in-order sum of tree contributions, the
    /// same order [`predict_trees`] uses, so stored fits replay bit for bit.
    fn refresh_fit(&mut self) {
        self.fit.iter_mut().for_each(|v| *v = 0.0);
        for contrib in &self.contribution {
            for (f, c) in self.fit.iter_mut().zip(contrib) {
                *f += c;
            }
        }
    }
}

fn sum_marginals<M: LeafModel>(model: &M, stats: &[LeafStats]) -> Result<f64> {
    let mut total = 0.0;
    for (leaf, s) in stats.iter().enumerate() {
        total += model.log_marginal(s).map_err(|e| match e {
            Error::Decomposition(msg) => Error::Decomposition(format!("leaf {leaf}: {msg}")),
            other => other,
        })?;
    }
    Ok(total)
}

/// Sum of tree predictions for every row of `x`, row-major `n×p`.
pub fn predict_trees(trees: &[Tree], x: &ArrayView2<f64>, p: usize) -> Vec<f64> {
    let n = x.nrows();
    let mut out = vec![0.0; n * p];
    for tree in trees {
        let assign = partition(tree, x);
        for (i, &leaf) in assign.iter().enumerate() {
            let v = tree.leaf_value(leaf);
            for a in 0..p {
                out[i * p + a] += v[a];
            }
        }
    }
    out
}
