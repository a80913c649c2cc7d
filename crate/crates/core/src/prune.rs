//! Utilization-based path pruning, analytic sparsity and FLOP accounting,
//! and the layer wall-clock benchmark.

use std::time::Instant;

use serde::Serialize;

use crate::baselines::DenseFF;
use crate::error::{shape_err, Error, Result};
use crate::forest::{
    forward_sequential, forward_with_policy, init_forest, leaves_per_tree, mlp_block_sparsity,
    nodes_per_tree, ForestParams, ForwardCache, InitScheme, RoutePolicy, Variant,
};
use crate::numeric::{sample_uniform, Matrix, Rng};
use crate::routing::UtilizationLedger;

/// Leaves disabled per tree, and the nodes that only serve disabled leaves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruneMask {
    pub trees: usize,
    pub depth: usize,
    disabled_leaves: Vec<Vec<bool>>,
    disabled_nodes: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn empty(trees: usize, depth: usize) -> Self {
        Self {
            trees,
            depth,
            disabled_leaves: vec![vec![false; leaves_per_tree(depth)]; trees],
            disabled_nodes: vec![vec![false; nodes_per_tree(depth)]; trees],
        }
    }

    /// `leaves[p]` lists disabled leaf slots of tree `p`; every tree must
    /// keep at least one live leaf.
    pub fn from_disabled_leaves(trees: usize, depth: usize, leaves: &[Vec<usize>]) -> Result<Self> {
        if leaves.len() != trees {
            return shape_err(format!("{} leaf lists for {trees} trees", leaves.len()));
        }
        let n_leaves = leaves_per_tree(depth);
        let mut m = Self::empty(trees, depth);
        for (p, list) in leaves.iter().enumerate() {
            for &l in list {
                if l >= n_leaves {
                    return Err(Error::InvalidArgument(format!("leaf {l} outside tree of depth {depth}")));
                }
                m.disabled_leaves[p][l] = true;
            }
            if m.disabled_leaves[p].iter().all(|&d| d) {
                return Err(Error::InvalidArgument(format!("tree {p} would have no live leaf")));
            }
            let first_leaf = n_leaves - 1;
            for l in 0..n_leaves {
                m.disabled_nodes[p][first_leaf + l] = m.disabled_leaves[p][l];
            }
            for n in (0..first_leaf).rev() {
                m.disabled_nodes[p][n] =
                    m.disabled_nodes[p][2 * n + 1] && m.disabled_nodes[p][2 * n + 2];
            }
        }
        Ok(m)
    }

    pub fn is_leaf_disabled(&self, tree: usize, leaf: usize) -> bool {
        self.disabled_leaves[tree][leaf]
    }

    pub fn is_node_disabled(&self, tree: usize, node: usize) -> bool {
        self.disabled_nodes[tree][node]
    }

    pub fn disabled_leaves(&self, tree: usize) -> Vec<usize> {
        (0..leaves_per_tree(self.depth))
            .filter(|&l| self.disabled_leaves[tree][l])
            .collect()
    }

    pub fn disabled_node_count(&self) -> usize {
        self.disabled_nodes.iter().flatten().filter(|&&d| d).count()
    }

    pub fn is_empty(&self) -> bool {
        self.disabled_node_count() == 0
    }
}

/// Disables the `⌊fraction·2^D⌋` least-visited leaves of every tree; equal
/// counts go to the lower leaf index first.
pub fn build_prune_mask(ledger: &UtilizationLedger, fraction: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("prune fraction {fraction} outside [0, 1)")));
    }
    if ledger.total == 0 {
        return Err(Error::Empty("cannot prune from an empty ledger".into()));
    }
    let n = leaves_per_tree(ledger.depth);
    let k = ((fraction * n as f64).floor() as usize).min(n - 1);
    let lists: Vec<Vec<usize>> = ledger
        .leaf_counts
        .iter()
        .map(|counts| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&l| (counts[l], l));
            order.truncate(k);
            order
        })
        .collect();
    PruneMask::from_disabled_leaves(ledger.trees, ledger.depth, &lists)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PrunedRouting {
    /// A decision entering a fully disabled subtree takes the sibling.
    Reroute,
    /// Routing is unchanged; disabled nodes contribute nothing.
    ZeroContribution,
}

struct PrunePolicy<'a> {
    mask: &'a PruneMask,
    mode: PrunedRouting,
}

impl RoutePolicy for PrunePolicy<'_> {
    fn next(&self, tree: usize, node: usize, logit: f64) -> usize {
        let child = 2 * node + 1 + usize::from(logit >= 0.0);
        if self.mode == PrunedRouting::Reroute && self.mask.is_node_disabled(tree, child) {
            if child % 2 == 1 {
                child + 1
            } else {
                child - 1
            }
        } else {
            child
        }
    }

    fn contributes(&self, tree: usize, node: usize) -> bool {
        self.mode == PrunedRouting::Reroute || !self.mask.is_node_disabled(tree, node)
    }
}

/// Sequential forward under a prune mask. The returned cache records the
/// path actually taken.
pub fn forward_pruned(
    params: &ForestParams,
    x: &Matrix,
    mask: &PruneMask,
    mode: PrunedRouting,
) -> Result<(Matrix, ForwardCache)> {
    if mask.trees != params.trees() || mask.depth != params.depth() {
        return shape_err(format!(
            "prune mask for {} trees of depth {} applied to {} trees of depth {}",
            mask.trees,
            mask.depth,
            params.trees(),
            params.depth()
        ));
    }
    forward_with_policy(params, x, &PrunePolicy { mask, mode }, None)
}

/// FLOPs of one forest-layer call per sample: 2 per multiply-add over the
/// `P·(D+1)` visited nodes.
pub fn fff_layer_flops(trees: usize, depth: usize, d_in: usize, d_out: usize) -> u64 {
    2 * (trees * (depth + 1) * (d_in + d_out)) as u64
}

/// FLOPs of a dense two-matrix block per sample.
pub fn dense_layer_flops(d_in: usize, d_ff: usize, d_out: usize) -> u64 {
    2 * (d_in * d_ff + d_ff * d_out) as u64
}

/// Attention FLOPs per token for a single-head block of width `d` over
/// `context` positions: four `d x d` projections plus scores and mixing.
pub fn attention_flops(d_model: usize, context: usize) -> f64 {
    (8 * d_model * d_model + 4 * context * d_model) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub runs_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub depth: usize,
    pub trees: usize,
    pub d_model: usize,
    pub d_ff_dense: usize,
    pub mlp_block_sparsity: f64,
    pub fff_flops: u64,
    pub dense_flops: u64,
    /// Forest FLOPs over dense-block FLOPs.
    pub relative_flops_layer: f64,
    pub attention_flops: f64,
    /// `(attention + forest) / (attention + dense)`.
    pub relative_flops_model: f64,
    /// Share of the dense model's per-token FLOPs skipped by the forest.
    pub overall_model_sparsity: f64,
    pub fff_timing: Option<TimingStats>,
    pub dense_timing: Option<TimingStats>,
    pub speedup: Option<f64>,
}

pub fn sparsity_report(
    trees: usize,
    depth: usize,
    d_model: usize,
    d_ff_dense: usize,
    attention_flops_per_token: f64,
) -> Result<EfficiencyReport> {
    if trees == 0 || d_model == 0 || d_ff_dense == 0 || !(attention_flops_per_token >= 0.0) {
        return Err(Error::InvalidArgument("report needs positive dimensions".into()));
    }
    let fff = fff_layer_flops(trees, depth, d_model, d_model);
    let dense = dense_layer_flops(d_model, d_ff_dense, d_model);
    let attn = attention_flops_per_token;
    let rel_model = (attn + fff as f64) / (attn + dense as f64);
    Ok(EfficiencyReport {
        depth,
        trees,
        d_model,
        d_ff_dense,
        mlp_block_sparsity: mlp_block_sparsity(depth),
        fff_flops: fff,
        dense_flops: dense,
        relative_flops_layer: fff as f64 / dense as f64,
        attention_flops: attn,
        relative_flops_model: rel_model,
        overall_model_sparsity: 1.0 - rel_model,
        fff_timing: None,
        dense_timing: None,
        speedup: None,
    })
}

/// Runs `f` `warmup` times untimed, then `repeats` timed runs.
pub fn time_runs(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<TimingStats> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        runs.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let std = if runs.len() > 1 {
        (runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(TimingStats {
        mean_ms: mean,
        std_ms: std,
        runs_ms: runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub trees: usize,
    pub depth: usize,
    pub d_model: usize,
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Worker threads splitting the batch; 1 keeps timing single-threaded.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub report: EfficiencyReport,
    pub batch: usize,
    pub threads: usize,
    /// Counted FLOPs of one forest call over the whole batch.
    pub executed_flops: u64,
    pub analytic_flops: u64,
}

fn forest_pass(params: &ForestParams, x: &Matrix, threads: usize) -> Result<()> {
    if threads <= 1 {
        forward_sequential(params, x)?;
        return Ok(());
    }
    let rows: Vec<usize> = (0..x.rows()).collect();
    let chunk = x.rows().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .chunks(chunk)
            .map(|idx| {
                let part = x.gather_rows(idx);
                s.spawn(move || forward_sequential(params, &part).map(|_| ()))
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("bench worker panicked"))
    })
}

fn dense_pass(d: &DenseFF, x: &Matrix, threads: usize) -> Result<()> {
    if threads <= 1 {
        d.forward(x)?;
        return Ok(());
    }
    let rows: Vec<usize> = (0..x.rows()).collect();
    let chunk = x.rows().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .chunks(chunk)
            .map(|idx| {
                let part = x.gather_rows(idx);
                s.spawn(move || d.forward(&part).map(|_| ()))
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("bench worker panicked"))
    })
}

/// Times sequential forest execution against a dense block with
/// `d_ff = P·(2^(D+1) − 1)` hidden units.
pub fn bench_layer(rng: &mut Rng, cfg: BenchConfig, attention_flops_per_token: f64) -> Result<BenchResult> {
    let d = cfg.d_model;
    let params = init_forest(rng, cfg.trees, cfg.depth, d, d, Variant::PreGelu, InitScheme::Scaled)?;
    let d_ff = params.total_nodes();
    let dense = DenseFF::init(rng, d, d_ff, d)?;
    let x = sample_uniform(rng, cfg.batch, d, -1.0, 1.0);

    let mut executed = 0u64;
    crate::forest::forward_sequential_counted(&params, &x, &mut executed)?;
    let analytic = fff_layer_flops(cfg.trees, cfg.depth, d, d) * cfg.batch as u64;

    let threads = cfg.threads.max(1);
    let fff_t = time_runs(cfg.warmup, cfg.repeats, || forest_pass(&params, &x, threads))?;
    let dense_t = time_runs(cfg.warmup, cfg.repeats, || dense_pass(&dense, &x, threads))?;
    let mut report = sparsity_report(cfg.trees, cfg.depth, d, d_ff, attention_flops_per_token)?;
    report.speedup = Some(dense_t.mean_ms / fff_t.mean_ms);
    report.fff_timing = Some(fff_t);
    report.dense_timing = Some(dense_t);
    Ok(BenchResult {
        report,
        batch: cfg.batch,
        threads,
        executed_flops: executed,
        analytic_flops: analytic,
    })
}

/// Trees needed to reach at least `width` nodes at `depth`.
pub fn trees_for_width(width: usize, depth: usize) -> usize {
    width.div_ceil(nodes_per_tree(depth)).max(1)
}

pub const SWEEP_HEADER: &str = "depth,sparsity,rel_flops,mean_ms,std_ms,speedup";

pub fn sweep_csv(results: &[BenchResult]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in results {
        let t = r.report.fff_timing.as_ref();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.report.depth,
            r.report.mlp_block_sparsity,
            r.report.relative_flops_layer,
            t.map(|t| t.mean_ms).unwrap_or(f64::NAN),
            t.map(|t| t.std_ms).unwrap_or(f64::NAN),
            r.report.speedup.unwrap_or(f64::NAN)
        ));
    }
    s
}

/// Layer execution-time speedups over a dense block reported for GPU
/// kernels at depths 3, 6 and 13; kept for comparison only.
pub const REFERENCE_SPEEDUPS: [(usize, f64); 3] = [(3, 8.7), (6, 5.3), (13, 2.8)];
