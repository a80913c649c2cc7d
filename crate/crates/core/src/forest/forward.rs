use crate::error::{shape_err, Error, Result};
use crate::numeric::{axpy, dot, gelu, Matrix};

use super::mask::{compute_mask, RouteMask};
use super::{node_level_slot, ForestParams, Variant};

/// Logits retained for the backward pass.
#[derive(Debug, Clone)]
pub enum CacheMode {
    /// Full `B x P·N` logit tensor.
    Masked { z: Matrix },
    /// Only the visited logits, aligned with the mask paths.
    Sequential { path_logits: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) signature: (usize, usize, usize, usize, Variant),
    pub input: Matrix,
    pub mask: RouteMask,
    pub mode: CacheMode,
    /// Accumulated output before the final GELU (post-GELU variant only).
    pub pre_activation: Option<Matrix>,
}

impl ForwardCache {
    /// Logit of the node visited at `level` in `tree` for `sample`.
    pub fn path_logit(&self, sample: usize, tree: usize, level: usize) -> f64 {
        let (trees, depth) = (self.signature.0, self.signature.1);
        match &self.mode {
            CacheMode::Masked { z } => {
                let n = super::nodes_per_tree(depth);
                let node = self.mask.node(sample, tree, level);
                z[(sample, tree * n + node)]
            }
            CacheMode::Sequential { path_logits } => {
                path_logits[(sample * trees + tree) * (depth + 1) + level]
            }
        }
    }
}

/// Routing rule consulted at every internal node during sequential traversal.
pub(crate) trait RoutePolicy {
    fn next(&self, tree: usize, node: usize, logit: f64) -> usize;

    fn contributes(&self, _tree: usize, _node: usize) -> bool {
        true
    }
}

pub(crate) struct NaturalRouting;

impl RoutePolicy for NaturalRouting {
    #[inline]
    fn next(&self, _tree: usize, node: usize, logit: f64) -> usize {
        2 * node + 1 + usize::from(logit >= 0.0)
    }
}

fn check_input(params: &ForestParams, x: &Matrix) -> Result<()> {
    if x.cols() != params.d_in() {
        return shape_err(format!(
            "input has {} features, layer expects {}",
            x.cols(),
            params.d_in()
        ));
    }
    Ok(())
}

/// Evaluates only the visited nodes of every tree.
pub fn forward_sequential(params: &ForestParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    forward_with_policy(params, x, &NaturalRouting, None)
}

/// As [`forward_sequential`], adding the floating-point operations performed
/// on node vectors to `flops` (2 per multiply-add).
pub fn forward_sequential_counted(
    params: &ForestParams,
    x: &Matrix,
    flops: &mut u64,
) -> Result<(Matrix, ForwardCache)> {
    forward_with_policy(params, x, &NaturalRouting, Some(flops))
}

pub(crate) fn forward_with_policy(
    params: &ForestParams,
    x: &Matrix,
    policy: &dyn RoutePolicy,
    mut flops: Option<&mut u64>,
) -> Result<(Matrix, ForwardCache)> {
    check_input(params, x)?;
    let (trees, depth, d_in, d_out) = (params.trees(), params.depth(), params.d_in(), params.d_out());
    let batch = x.rows();
    let per_path = depth + 1;
    let mut paths = Vec::with_capacity(batch * trees * per_path);
    let mut path_logits = Vec::with_capacity(batch * trees * per_path);
    let mut y = Matrix::zeros(batch, d_out);
    let mut pre = match params.variant() {
        Variant::PostGelu => Some(Matrix::zeros(batch, d_out)),
        Variant::PreGelu => None,
    };
    let mut acc = vec![0.0; d_out];
    let mut work = 0u64;

    for b in 0..batch {
        let xb = x.row(b);
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..trees {
            let mut node = 0usize;
            for level in 0..per_path {
                let r = params.row_of(p, node);
                let z = dot(xb, params.w_in.row(r)) + params.b_in[r];
                work += 2 * d_in as u64;
                if !z.is_finite() {
                    let (l, s) = node_level_slot(node);
                    return Err(Error::NonFinite(format!(
                        "logit of sample {b} at tree {p}, level {l}, slot {s}"
                    )));
                }
                paths.push(node as u32);
                path_logits.push(z);
                if policy.contributes(p, node) {
                    let a = match params.variant() {
                        Variant::PreGelu => gelu(z),
                        Variant::PostGelu => z,
                    };
                    axpy(a, params.w_out.row(r), &mut acc);
                    work += 2 * d_out as u64;
                }
                if level < depth {
                    node = policy.next(p, node, z);
                }
            }
        }
        let out = y.row_mut(b);
        for ((o, a), bias) in out.iter_mut().zip(&acc).zip(&params.b_out) {
            *o = a + bias;
        }
        if let Some(u) = pre.as_mut() {
            u.row_mut(b).copy_from_slice(out);
            out.iter_mut().for_each(|v| *v = gelu(*v));
        }
    }
    y.check_finite("layer output")?;
    if let Some(f) = flops.as_deref_mut() {
        *f += work;
    }
    let mask = RouteMask::from_paths_unchecked(batch, trees, depth, paths);
    Ok((
        y,
        ForwardCache {
            signature: params.signature(),
            input: x.clone(),
            mask,
            mode: CacheMode::Sequential { path_logits },
            pre_activation: pre,
        },
    ))
}

/// Computes all node logits, routes on the detached logits, then masks:
/// `Y = linear_out(M ⊙ GELU(Z))` or `Y = GELU(linear_out(M ⊙ Z))`.
pub fn forward_masked(params: &ForestParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    check_input(params, x)?;
    let mut z = x.matmul_nt(&params.w_in)?;
    z.add_row_vector(&params.b_in)?;
    z.check_finite("node logits")?;
    let mask = compute_mask(&z, params.trees(), params.depth())?;
    let a = masked_activations(params, &z, &mask);
    let mut y = a.matmul(&params.w_out)?;
    y.add_row_vector(&params.b_out)?;
    let pre = match params.variant() {
        Variant::PreGelu => None,
        Variant::PostGelu => {
            let u = y.clone();
            y = u.map(gelu);
            Some(u)
        }
    };
    y.check_finite("layer output")?;
    Ok((
        y,
        ForwardCache {
            signature: params.signature(),
            input: x.clone(),
            mask,
            mode: CacheMode::Masked { z },
            pre_activation: pre,
        },
    ))
}

/// `Ā = M ⊙ GELU(Z)` (pre) or `M ⊙ Z` (post), flattened to `B x P·N`.
pub(crate) fn masked_activations(params: &ForestParams, z: &Matrix, mask: &RouteMask) -> Matrix {
    let n = params.nodes_per_tree();
    let mut a = Matrix::zeros(z.rows(), z.cols());
    for b in 0..z.rows() {
        for p in 0..params.trees() {
            for &node in mask.path(b, p) {
                let c = p * n + node as usize;
                a[(b, c)] = match params.variant() {
                    Variant::PreGelu => gelu(z[(b, c)]),
                    Variant::PostGelu => z[(b, c)],
                };
            }
        }
    }
    a
}
