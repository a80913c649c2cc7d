//! Routing statistics: visit ledgers, dead leaves, path shares, the
//! positive-branch probability, mean-logit drift probes and tree priors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::forest::{leaves_per_tree, nodes_per_tree, ForestParams, LayerGradients, RouteMask};
use crate::numeric::{dot, std_normal_cdf, Matrix, Rng};

/// Visit counts per node and per leaf path, for every tree of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilizationLedger {
    pub depth: usize,
    pub trees: usize,
    /// `trees x 2^depth`
    pub leaf_counts: Vec<Vec<u64>>,
    /// `trees x (2^(depth+1) - 1)`
    pub node_counts: Vec<Vec<u64>>,
    /// Samples observed (each sample visits every tree once).
    pub total: u64,
}

impl UtilizationLedger {
    pub fn new(trees: usize, depth: usize) -> Self {
        Self {
            depth,
            trees,
            leaf_counts: vec![vec![0; leaves_per_tree(depth)]; trees],
            node_counts: vec![vec![0; nodes_per_tree(depth)]; trees],
            total: 0,
        }
    }

    pub fn for_layer(params: &ForestParams) -> Self {
        Self::new(params.trees(), params.depth())
    }

    pub fn record_batch(&mut self, mask: &RouteMask) -> Result<()> {
        if mask.trees() != self.trees || mask.depth() != self.depth {
            return shape_err(format!(
                "mask for {} trees of depth {} recorded into ledger for {} trees of depth {}",
                mask.trees(),
                mask.depth(),
                self.trees,
                self.depth
            ));
        }
        for b in 0..mask.batch() {
            for p in 0..self.trees {
                for &n in mask.path(b, p) {
                    self.node_counts[p][n as usize] += 1;
                }
                self.leaf_counts[p][mask.leaf(b, p)] += 1;
            }
        }
        self.total += mask.batch() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &UtilizationLedger) -> Result<()> {
        if other.trees != self.trees || other.depth != self.depth {
            return shape_err("merging ledgers of different shape");
        }
        for p in 0..self.trees {
            for (a, b) in self.leaf_counts[p].iter_mut().zip(&other.leaf_counts[p]) {
                *a += b;
            }
            for (a, b) in self.node_counts[p].iter_mut().zip(&other.node_counts[p]) {
                *a += b;
            }
        }
        self.total += other.total;
        Ok(())
    }

    fn require_samples(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::Empty("utilization ledger has no samples".into()));
        }
        Ok(())
    }

    /// Share of each leaf in one tree, by leaf index.
    pub fn leaf_shares(&self, tree: usize) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.leaf_counts[tree].iter().map(|&c| c as f64 / t).collect()
    }

    /// Leaf distribution pooled over all trees.
    pub fn pooled_leaf_distribution(&self) -> Result<Vec<f64>> {
        self.require_samples()?;
        let denom = (self.total * self.trees as u64) as f64;
        let mut out = vec![0.0; leaves_per_tree(self.depth)];
        for counts in &self.leaf_counts {
            for (o, &c) in out.iter_mut().zip(counts) {
                *o += c as f64;
            }
        }
        Ok(out.into_iter().map(|v| v / denom).collect())
    }

    /// Fraction of leaves (over all trees) visited at most `threshold` times.
    pub fn dead_leaf_fraction(&self, threshold: u64) -> Result<f64> {
        self.require_samples()?;
        let all = self.trees * leaves_per_tree(self.depth);
        let dead = self
            .leaf_counts
            .iter()
            .flatten()
            .filter(|&&c| c <= threshold)
            .count();
        Ok(dead as f64 / all as f64)
    }

    /// Largest single-leaf share in any tree.
    pub fn max_path_share(&self) -> Result<f64> {
        self.require_samples()?;
        let m = self.leaf_counts.iter().flatten().copied().max().unwrap_or(0);
        Ok(m as f64 / self.total as f64)
    }

    /// Leaf shares averaged over trees, sorted descending.
    pub fn path_histogram(&self) -> Result<Vec<f64>> {
        let mut d = self.pooled_leaf_distribution()?;
        d.sort_by(|a, b| b.total_cmp(a));
        Ok(d)
    }

    /// Checks level sums and parent = sum of children for every tree.
    pub fn check_conservation(&self) -> Result<()> {
        for p in 0..self.trees {
            let nodes = &self.node_counts[p];
            if self.leaf_counts[p].iter().sum::<u64>() != self.total {
                return Err(Error::Format(format!("tree {p}: leaf counts do not sum to total")));
            }
            for l in 0..=self.depth {
                let start = (1 << l) - 1;
                let s: u64 = nodes[start..start + (1 << l)].iter().sum();
                if s != self.total {
                    return Err(Error::Format(format!("tree {p}: level {l} sums to {s}")));
                }
            }
            for n in 0..(nodes.len() - leaves_per_tree(self.depth)) {
                if nodes[2 * n + 1] + nodes[2 * n + 2] != nodes[n] {
                    return Err(Error::Format(format!("tree {p}: children of {n} do not sum")));
                }
            }
            let first_leaf = leaves_per_tree(self.depth) - 1;
            if nodes[first_leaf..] != self.leaf_counts[p][..] {
                return Err(Error::Format(format!("tree {p}: leaf nodes disagree with paths")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }

    /// `tree,leaf,count,share` rows, leaves in index order.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("tree,leaf,count,share\n");
        for p in 0..self.trees {
            for (leaf, &c) in self.leaf_counts[p].iter().enumerate() {
                let share = c as f64 / self.total.max(1) as f64;
                s.push_str(&format!("{p},{leaf},{c},{share}\n"));
            }
        }
        s
    }
}

/// `P(z > 0) = Φ(μ/σ)` for a Gaussian logit.
pub fn positive_branch_prob(mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need finite mu and sigma > 0, got mu={mu} sigma={sigma}"
        )));
    }
    Ok(std_normal_cdf(mu / sigma))
}

/// Tracks one routing node across training steps to estimate the expected
/// per-step change of its mean logit under SGD:
/// `E[Δμ] = -η · E[(∂L/∂z)(mᵀh + 1)]` with `m = E[h]`.
#[derive(Debug, Clone)]
pub struct DriftProbe {
    pub tree: usize,
    pub node: usize,
    h_sum: Vec<f64>,
    h_count: u64,
    z_sum: f64,
    z_sq_sum: f64,
    /// Σ over recorded batches of Σ_b (∂L/∂z_b) h_b.
    weighted_h: Vec<f64>,
    /// Σ over recorded batches of Σ_b ∂L/∂z_b.
    grad_sum: f64,
    upstream_sum: f64,
    upstream_count: u64,
    batches: u64,
}

impl DriftProbe {
    pub fn new(tree: usize, node: usize, d_in: usize) -> Self {
        Self {
            tree,
            node,
            h_sum: vec![0.0; d_in],
            h_count: 0,
            z_sum: 0.0,
            z_sq_sum: 0.0,
            weighted_h: vec![0.0; d_in],
            grad_sum: 0.0,
            upstream_sum: 0.0,
            upstream_count: 0,
            batches: 0,
        }
    }

    /// Records one batch: node input `h` (the layer input), the mask and the
    /// gradients from the matching backward call.
    pub fn record(
        &mut self,
        params: &ForestParams,
        h: &Matrix,
        mask: &RouteMask,
        grads: &LayerGradients,
    ) -> Result<()> {
        if h.cols() != self.h_sum.len() || h.rows() != mask.batch() {
            return shape_err("drift probe input does not match");
        }
        if self.tree >= params.trees() || self.node >= params.nodes_per_tree() {
            return Err(Error::InvalidArgument(format!(
                "probe node ({}, {}) outside the layer",
                self.tree, self.node
            )));
        }
        let (level, _) = crate::forest::node_level_slot(self.node);
        let per_path = params.depth() + 1;
        for b in 0..h.rows() {
            let hb = h.row(b);
            for (s, v) in self.h_sum.iter_mut().zip(hb) {
                *s += v;
            }
            let z = params.logit(self.tree, self.node, hb);
            self.z_sum += z;
            self.z_sq_sum += z * z;
            if mask.node(b, self.tree, level) == self.node {
                let k = (b * params.trees() + self.tree) * per_path + level;
                let gz = grads.path_logit_grad[k];
                crate::numeric::axpy(gz, hb, &mut self.weighted_h);
                self.grad_sum += gz;
                self.upstream_sum += grads.path_upstream[k];
                self.upstream_count += 1;
            }
        }
        self.h_count += h.rows() as u64;
        self.batches += 1;
        Ok(())
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    /// Running estimate of `m = E[h]`.
    pub fn mean_input(&self) -> Vec<f64> {
        let n = self.h_count.max(1) as f64;
        self.h_sum.iter().map(|v| v / n).collect()
    }

    pub fn logit_mean(&self) -> f64 {
        self.z_sum / self.h_count.max(1) as f64
    }

    pub fn logit_std(&self) -> f64 {
        let n = self.h_count.max(1) as f64;
        let mu = self.z_sum / n;
        (self.z_sq_sum / n - mu * mu).max(0.0).sqrt()
    }

    /// Mean upstream gradient `g` over visits.
    pub fn upstream_mean(&self) -> f64 {
        self.upstream_sum / self.upstream_count.max(1) as f64
    }

    /// Predicted mean-logit change for one SGD step of size `lr`.
    pub fn predict_drift(&self, lr: f64) -> Result<f64> {
        if self.batches == 0 {
            return Err(Error::Empty("drift probe has no recorded batches".into()));
        }
        let m = self.mean_input();
        let per_step = (dot(&m, &self.weighted_h) + self.grad_sum) / self.batches as f64;
        Ok(-lr * per_step)
    }
}

/// Mean logit change implied by a parameter update at one node:
/// `(w⁺ - w)ᵀm + (b⁺ - b)`.
pub fn observed_drift(
    before: &ForestParams,
    after: &ForestParams,
    tree: usize,
    node: usize,
    m: &[f64],
) -> f64 {
    let r = before.row_of(tree, node);
    let dw: Vec<f64> = after
        .w_in
        .row(r)
        .iter()
        .zip(before.w_in.row(r))
        .map(|(a, b)| a - b)
        .collect();
    dot(&dw, m) + (after.b_in[r] - before.b_in[r])
}

/// Branch weights of a perfect binary tree; `q[n]` is the probability of
/// moving from internal node `n` to its higher-index child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreePrior {
    pub depth: usize,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafOrder {
    /// Rank `r` sits on leaf `r`.
    DepthFirst,
    /// Rank `r` sits on the bit-reversed leaf index, alternating subtrees.
    BreadthFirst,
}

/// Builds branch weights realizing `target` (any non-negative weights over
/// `2^D` leaves) by summing masses bottom-up.
pub fn build_tree_prior(target: &[f64]) -> Result<TreePrior> {
    let leaves = target.len();
    if leaves == 0 || !leaves.is_power_of_two() {
        return shape_err(format!("{leaves} leaves is not a power of two"));
    }
    if target.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("target weights must be finite and >= 0".into()));
    }
    let total: f64 = target.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("target distribution is all zero".into()));
    }
    let depth = leaves.trailing_zeros() as usize;
    let n = nodes_per_tree(depth);
    let mut mass = vec![0.0; n];
    for (i, &t) in target.iter().enumerate() {
        mass[leaves - 1 + i] = t / total;
    }
    for node in (0..leaves - 1).rev() {
        mass[node] = mass[2 * node + 1] + mass[2 * node + 2];
    }
    let q = (0..leaves - 1)
        .map(|node| {
            if mass[node] > 0.0 {
                mass[2 * node + 2] / mass[node]
            } else {
                0.5
            }
        })
        .collect();
    Ok(TreePrior { depth, q })
}

impl TreePrior {
    pub fn uniform(depth: usize) -> Self {
        Self {
            depth,
            q: vec![0.5; leaves_per_tree(depth) - 1],
        }
    }

    /// Product of branch weights along each root-to-leaf path.
    pub fn leaf_distribution(&self) -> Vec<f64> {
        let leaves = leaves_per_tree(self.depth);
        let mut prob = vec![0.0; nodes_per_tree(self.depth)];
        prob[0] = 1.0;
        for node in 0..leaves - 1 {
            prob[2 * node + 1] = prob[node] * (1.0 - self.q[node]);
            prob[2 * node + 2] = prob[node] * self.q[node];
        }
        prob[leaves - 1..].to_vec()
    }

    /// Leaf counts from `n` walks down the tree.
    pub fn sample_paths(&self, rng: &mut Rng, n: usize) -> Vec<u64> {
        let leaves = leaves_per_tree(self.depth);
        let mut counts = vec![0u64; leaves];
        for _ in 0..n {
            let mut node = 0;
            for _ in 0..self.depth {
                node = 2 * node + 1 + usize::from(rng.uniform() < self.q[node]);
            }
            counts[node + 1 - leaves] += 1;
        }
        counts
    }
}

/// Discretized Pareto(α, x_m = 1) over `2^depth` ranks: rank `r` gets
/// `F(r + 2) - F(r + 1)`, renormalized over the finite support.
pub fn pareto_target(depth: usize, alpha: f64, order: LeafOrder) -> Vec<f64> {
    let leaves = leaves_per_tree(depth);
    let cdf = |x: f64| 1.0 - x.powf(-alpha);
    let ranked: Vec<f64> = (0..leaves)
        .map(|r| cdf(r as f64 + 2.0) - cdf(r as f64 + 1.0))
        .collect();
    let total: f64 = ranked.iter().sum();
    let mut out = vec![0.0; leaves];
    for (r, v) in ranked.into_iter().enumerate() {
        let leaf = match order {
            LeafOrder::DepthFirst => r,
            LeafOrder::BreadthFirst => bit_reverse(r, depth),
        };
        out[leaf] = v / total;
    }
    out
}

fn bit_reverse(v: usize, bits: usize) -> usize {
    if bits == 0 {
        return 0;
    }
    v.reverse_bits() >> (usize::BITS as usize - bits)
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Total-variation distance between the ledger's pooled leaf distribution
/// and the prior's, leaf by leaf.
pub fn prior_distance(ledger: &UtilizationLedger, prior: &TreePrior) -> Result<f64> {
    if ledger.depth != prior.depth {
        return shape_err(format!(
            "ledger depth {} vs prior depth {}",
            ledger.depth, prior.depth
        ));
    }
    Ok(total_variation(
        &ledger.pooled_leaf_distribution()?,
        &prior.leaf_distribution(),
    ))
}

/// As [`prior_distance`] but compares the two distributions after sorting
/// each in descending order, so only the shape of the imbalance matters and
/// not which side of the tree is favoured.
pub fn rank_aligned_distance(ledger: &UtilizationLedger, prior: &TreePrior) -> Result<f64> {
    if ledger.depth != prior.depth {
        return shape_err(format!(
            "ledger depth {} vs prior depth {}",
            ledger.depth, prior.depth
        ));
    }
    let mut prior_sorted = prior.leaf_distribution();
    prior_sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(total_variation(&ledger.path_histogram()?, &prior_sorted))
}
