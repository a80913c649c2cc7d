//! Tree-routed fast feed-forward layer.
//!
//! A layer holds `P` perfect binary trees of depth `D`. Every node owns a
//! routing vector and bias (producing the logit `z = w·x + b`) and an output
//! vector. An input visits exactly one root-to-leaf path per tree; the sign of
//! each visited logit picks the next child (`z >= 0` goes to the higher slot).
//!
//! Nodes are stored level-order: node `n` at level `l`, slot `s` has
//! `n = 2^l - 1 + s` and children `2n + 1`, `2n + 2`.

mod backward;
mod checkpoint;
mod forward;
mod mask;

pub use backward::{backward, LayerGradients};
pub use checkpoint::{read_forest, write_forest, FOREST_MAGIC};
pub use forward::{
    forward_masked, forward_sequential, forward_sequential_counted, CacheMode, ForwardCache,
};
pub use mask::{compute_mask, RouteMask};
pub(crate) use forward::{forward_with_policy, RoutePolicy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// GELU on each visited node's logit before the output projection.
    PreGelu,
    /// GELU once, on the accumulated output (bias included).
    PostGelu,
}

impl Variant {
    pub fn code(self) -> u32 {
        match self {
            Variant::PreGelu => 0,
            Variant::PostGelu => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Variant::PreGelu),
            1 => Ok(Variant::PostGelu),
            c => Err(Error::Format(format!("unknown variant code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// Routing weights ~ N(0, 1/d_in), output weights ~ N(0, 1/(P(D+1))), zero biases.
    Scaled,
    /// Every weight ~ N(0, std²), zero biases.
    Gaussian { std: f64 },
    Zeros,
}

/// Number of nodes in a perfect binary tree of depth `depth`.
#[inline]
pub fn nodes_per_tree(depth: usize) -> usize {
    (1usize << (depth + 1)) - 1
}

#[inline]
pub fn leaves_per_tree(depth: usize) -> usize {
    1usize << depth
}

#[inline]
pub fn node_index(level: usize, slot: usize) -> usize {
    (1usize << level) - 1 + slot
}

/// `(level, slot)` of a level-order node index.
#[inline]
pub fn node_level_slot(n: usize) -> (usize, usize) {
    let level = (usize::BITS - 1 - (n + 1).leading_zeros()) as usize;
    (level, n + 1 - (1usize << level))
}

/// Fraction of nodes that stay idle for one input: `1 - (D+1)/(2^(D+1)-1)`.
pub fn mlp_block_sparsity(depth: usize) -> f64 {
    1.0 - (depth + 1) as f64 / nodes_per_tree(depth) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    trees: usize,
    depth: usize,
    d_in: usize,
    d_out: usize,
    variant: Variant,
    /// `(P·N) x d_in`; row `p·N + n` is node `n` of tree `p`.
    pub w_in: Matrix,
    /// `P·N`
    pub b_in: Vec<f64>,
    /// `(P·N) x d_out`
    pub w_out: Matrix,
    /// `d_out`
    pub b_out: Vec<f64>,
}

impl ForestParams {
    pub fn zeros(
        trees: usize,
        depth: usize,
        d_in: usize,
        d_out: usize,
        variant: Variant,
    ) -> Result<Self> {
        if trees == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "forest needs trees, d_in, d_out >= 1 (got {trees}, {d_in}, {d_out})"
            )));
        }
        if depth > 24 {
            return Err(Error::InvalidArgument(format!("depth {depth} is too large")));
        }
        let total = trees * nodes_per_tree(depth);
        Ok(Self {
            trees,
            depth,
            d_in,
            d_out,
            variant,
            w_in: Matrix::zeros(total, d_in),
            b_in: vec![0.0; total],
            w_out: Matrix::zeros(total, d_out),
            b_out: vec![0.0; d_out],
        })
    }

    pub fn trees(&self) -> usize {
        self.trees
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn set_variant(&mut self, variant: Variant) {
        self.variant = variant;
    }

    pub fn nodes_per_tree(&self) -> usize {
        nodes_per_tree(self.depth)
    }

    pub fn leaves_per_tree(&self) -> usize {
        leaves_per_tree(self.depth)
    }

    pub fn total_nodes(&self) -> usize {
        self.trees * self.nodes_per_tree()
    }

    /// Flat row of node `n` in tree `p`.
    #[inline]
    pub fn row_of(&self, tree: usize, node: usize) -> usize {
        tree * self.nodes_per_tree() + node
    }

    /// Logit of one node for one input row.
    #[inline]
    pub fn logit(&self, tree: usize, node: usize, x: &[f64]) -> f64 {
        let r = self.row_of(tree, node);
        crate::numeric::dot(x, self.w_in.row(r)) + self.b_in[r]
    }

    /// Nodes evaluated per input: `P·(D+1)`.
    pub fn active_node_count(&self) -> usize {
        self.trees * (self.depth + 1)
    }

    pub fn active_param_count(&self) -> usize {
        self.active_node_count() * (self.d_in + 1 + self.d_out) + self.d_out
    }

    pub fn total_param_count(&self) -> usize {
        self.total_nodes() * (self.d_in + 1 + self.d_out) + self.d_out
    }

    pub fn active_fraction(&self) -> f64 {
        (self.depth + 1) as f64 / self.nodes_per_tree() as f64
    }

    pub(crate) fn signature(&self) -> (usize, usize, usize, usize, Variant) {
        (self.trees, self.depth, self.d_in, self.d_out, self.variant)
    }
}

impl Params for ForestParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w_in.data(), &self.b_in, self.w_out.data(), &self.b_out]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_in.data_mut(),
            &mut self.b_in,
            self.w_out.data_mut(),
            &mut self.b_out,
        ]
    }
}

pub fn init_forest(
    rng: &mut Rng,
    trees: usize,
    depth: usize,
    d_in: usize,
    d_out: usize,
    variant: Variant,
    scheme: InitScheme,
) -> Result<ForestParams> {
    let mut params = ForestParams::zeros(trees, depth, d_in, d_out, variant)?;
    let (std_in, std_out) = match scheme {
        InitScheme::Scaled => (
            1.0 / (d_in as f64).sqrt(),
            1.0 / ((trees * (depth + 1)) as f64).sqrt(),
        ),
        InitScheme::Gaussian { std } => {
            if !(std >= 0.0) {
                return Err(Error::InvalidArgument(format!("init std {std}")));
            }
            (std, std)
        }
        InitScheme::Zeros => return Ok(params),
    };
    for v in params.w_in.data_mut() {
        *v = rng.gaussian(0.0, std_in);
    }
    for v in params.w_out.data_mut() {
        *v = rng.gaussian(0.0, std_out);
    }
    Ok(params)
}
