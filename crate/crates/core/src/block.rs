//! Interchangeable feed-forward blocks used inside the task models.

use serde::{Deserialize, Serialize};

use crate::baselines::{moe_expert_width, DenseCache, DenseFF, MoECache, MoE};
use crate::error::Result;
use crate::forest::{
    backward, forward_sequential, init_forest, ForestParams, ForwardCache, InitScheme,
    LayerGradients, RouteMask, Variant,
};
use crate::numeric::{Matrix, Rng};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Dense,
    Fff,
    FffPost,
    Moe,
}

/// Shape of a block, independent of its input/output widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockSpec {
    Dense { hidden: usize },
    Forest { trees: usize, depth: usize, variant: Variant },
    /// `expert_hidden = None` sizes experts to match a dense block of `dense_hidden`.
    Moe {
        experts: usize,
        top_k: usize,
        expert_hidden: Option<usize>,
        dense_hidden: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Dense(DenseFF),
    Forest(ForestParams),
    Moe(MoE),
}

#[derive(Debug, Clone)]
pub enum BlockCache {
    Dense(DenseCache),
    Forest(ForwardCache),
    Moe(MoECache),
}

#[derive(Debug, Clone)]
pub enum BlockGrads {
    Dense(DenseFF),
    Forest(LayerGradients),
    Moe(MoE),
}

impl Block {
    pub fn init(rng: &mut Rng, spec: BlockSpec, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(match spec {
            BlockSpec::Dense { hidden } => Block::Dense(DenseFF::init(rng, d_in, hidden, d_out)?),
            BlockSpec::Forest {
                trees,
                depth,
                variant,
            } => Block::Forest(init_forest(
                rng,
                trees,
                depth,
                d_in,
                d_out,
                variant,
                InitScheme::Scaled,
            )?),
            BlockSpec::Moe {
                experts,
                top_k,
                expert_hidden,
                dense_hidden,
            } => {
                let width = expert_hidden
                    .unwrap_or_else(|| moe_expert_width(d_in, dense_hidden, d_out, experts));
                Block::Moe(MoE::init(rng, d_in, width, d_out, experts, top_k)?)
            }
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, BlockCache)> {
        Ok(match self {
            Block::Dense(p) => {
                let (y, c) = p.forward(x)?;
                (y, BlockCache::Dense(c))
            }
            Block::Forest(p) => {
                let (y, c) = forward_sequential(p, x)?;
                (y, BlockCache::Forest(c))
            }
            Block::Moe(p) => {
                let (y, c) = p.forward(x)?;
                (y, BlockCache::Moe(c))
            }
        })
    }

    pub fn backward(&self, cache: &BlockCache, gy: &Matrix) -> Result<(BlockGrads, Matrix)> {
        match (self, cache) {
            (Block::Dense(p), BlockCache::Dense(c)) => {
                let (g, gx) = p.backward(c, gy)?;
                Ok((BlockGrads::Dense(g), gx))
            }
            (Block::Forest(p), BlockCache::Forest(c)) => {
                let mut g = backward(p, c, gy)?;
                let gx = std::mem::replace(&mut g.g_x, Matrix::zeros(0, 0));
                Ok((BlockGrads::Forest(g), gx))
            }
            (Block::Moe(p), BlockCache::Moe(c)) => {
                let (g, gx) = p.backward(c, gy)?;
                Ok((BlockGrads::Moe(g), gx))
            }
            _ => Err(crate::Error::StaleCache("block kind does not match cache".into())),
        }
    }

    pub fn forest(&self) -> Option<&ForestParams> {
        match self {
            Block::Forest(p) => Some(p),
            _ => None,
        }
    }

    pub fn forest_mut(&mut self) -> Option<&mut ForestParams> {
        match self {
            Block::Forest(p) => Some(p),
            _ => None,
        }
    }

    /// Parameters touched for one input.
    pub fn active_param_count(&self) -> usize {
        match self {
            Block::Dense(p) => p.num_params(),
            Block::Forest(p) => p.active_param_count(),
            Block::Moe(m) => {
                m.router.data().len() + m.top_k() * m.experts[0].num_params()
            }
        }
    }

    pub fn kind_tag(&self) -> u32 {
        match self {
            Block::Dense(_) => 0,
            Block::Forest(_) => 1,
            Block::Moe(_) => 2,
        }
    }
}

impl BlockCache {
    pub fn route_mask(&self) -> Option<&RouteMask> {
        match self {
            BlockCache::Forest(c) => Some(&c.mask),
            _ => None,
        }
    }
}

impl Params for Block {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Block::Dense(p) => p.tensors(),
            Block::Forest(p) => p.tensors(),
            Block::Moe(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Block::Dense(p) => p.tensors_mut(),
            Block::Forest(p) => p.tensors_mut(),
            Block::Moe(p) => p.tensors_mut(),
        }
    }
}

impl Params for BlockGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            BlockGrads::Dense(p) => p.tensors(),
            BlockGrads::Forest(p) => p.tensors(),
            BlockGrads::Moe(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            BlockGrads::Dense(p) => p.tensors_mut(),
            BlockGrads::Forest(p) => p.tensors_mut(),
            BlockGrads::Moe(p) => p.tensors_mut(),
        }
    }
}
