use crate::error::{shape_err, Error, Result};
use crate::numeric::Matrix;

use super::{leaves_per_tree, nodes_per_tree};

/// Hard routing outcome: one root-to-leaf path per (sample, tree).
///
/// Stored as the visited level-order node index at every level, so the
/// dense `B x P x N` mask is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteMask {
    batch: usize,
    trees: usize,
    depth: usize,
    paths: Vec<u32>,
}

impl RouteMask {
    /// Builds a mask from explicit paths (`batch·trees·(depth+1)` node ids) and validates it.
    pub fn from_paths(batch: usize, trees: usize, depth: usize, paths: Vec<u32>) -> Result<Self> {
        if paths.len() != batch * trees * (depth + 1) {
            return shape_err(format!(
                "{} path entries for batch {batch}, {trees} trees, depth {depth}",
                paths.len()
            ));
        }
        let m = Self {
            batch,
            trees,
            depth,
            paths,
        };
        m.validate()?;
        Ok(m)
    }

    pub(crate) fn from_paths_unchecked(
        batch: usize,
        trees: usize,
        depth: usize,
        paths: Vec<u32>,
    ) -> Self {
        debug_assert_eq!(paths.len(), batch * trees * (depth + 1));
        Self {
            batch,
            trees,
            depth,
            paths,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn trees(&self) -> usize {
        self.trees
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Visited nodes of one (sample, tree), root first.
    #[inline]
    pub fn path(&self, sample: usize, tree: usize) -> &[u32] {
        let k = self.depth + 1;
        let off = (sample * self.trees + tree) * k;
        &self.paths[off..off + k]
    }

    pub fn raw_paths(&self) -> &[u32] {
        &self.paths
    }

    #[inline]
    pub fn node(&self, sample: usize, tree: usize, level: usize) -> usize {
        self.path(sample, tree)[level] as usize
    }

    /// Leaf slot `s_D` in `0..2^D`.
    #[inline]
    pub fn leaf(&self, sample: usize, tree: usize) -> usize {
        self.node(sample, tree, self.depth) + 1 - leaves_per_tree(self.depth)
    }

    #[inline]
    pub fn is_active(&self, sample: usize, tree: usize, node: usize) -> bool {
        if node >= nodes_per_tree(self.depth) {
            return false;
        }
        let (level, _) = super::node_level_slot(node);
        self.node(sample, tree, level) == node
    }

    /// Materialized `B x P x N` 0/1 mask.
    pub fn dense(&self) -> Vec<u8> {
        let n = nodes_per_tree(self.depth);
        let mut out = vec![0u8; self.batch * self.trees * n];
        for b in 0..self.batch {
            for p in 0..self.trees {
                for &node in self.path(b, p) {
                    out[(b * self.trees + p) * n + node as usize] = 1;
                }
            }
        }
        out
    }

    /// Checks the chain property on every (sample, tree).
    pub fn validate(&self) -> Result<()> {
        for b in 0..self.batch {
            for p in 0..self.trees {
                let path = self.path(b, p);
                if path[0] != 0 {
                    return Err(Error::Format(format!(
                        "sample {b} tree {p}: path does not start at the root"
                    )));
                }
                for l in 0..self.depth {
                    let parent = path[l];
                    let child = path[l + 1];
                    if child != 2 * parent + 1 && child != 2 * parent + 2 {
                        return Err(Error::Format(format!(
                            "sample {b} tree {p}: node {child} at level {} is not a child of {parent}",
                            l + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Routes every sample through every tree given the full logit tensor
/// `Z` (`B x P·N`). A logit `>= 0` moves to the higher child.
pub fn compute_mask(z: &Matrix, trees: usize, depth: usize) -> Result<RouteMask> {
    let n = nodes_per_tree(depth);
    if z.cols() != trees * n {
        return shape_err(format!(
            "logits have {} columns, expected {trees} trees x {n} nodes",
            z.cols()
        ));
    }
    let batch = z.rows();
    let mut paths = Vec::with_capacity(batch * trees * (depth + 1));
    for b in 0..batch {
        let row = z.row(b);
        for p in 0..trees {
            let logits = &row[p * n..(p + 1) * n];
            let mut node = 0usize;
            paths.push(0);
            for _ in 0..depth {
                let zl = logits[node];
                if !zl.is_finite() {
                    return Err(Error::NonFinite(format!("routing logit of sample {b}, tree {p}, node {node}")));
                }
                node = 2 * node + 1 + usize::from(zl >= 0.0);
                paths.push(node as u32);
            }
        }
    }
    Ok(RouteMask::from_paths_unchecked(batch, trees, depth, paths))
}
