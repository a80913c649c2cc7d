use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, gelu, gelu_prime, Matrix};
use crate::params::Params;

use super::forward::{masked_activations, CacheMode, ForwardCache};
use super::{ForestParams, Variant};

/// Gradients of a scalar loss with respect to every layer parameter and the input.
///
/// Rows of nodes that no sample visited are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub g_w_in: Matrix,
    pub g_b_in: Vec<f64>,
    pub g_w_out: Matrix,
    pub g_b_out: Vec<f64>,
    pub g_x: Matrix,
    /// `∂L/∂a` at each visited node, aligned with the mask paths (`a` is the
    /// masked activation feeding the output projection).
    pub path_upstream: Vec<f64>,
    /// `∂L/∂z` at each visited node, aligned with the mask paths.
    pub path_logit_grad: Vec<f64>,
}

impl Params for LayerGradients {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.g_w_in.data(), &self.g_b_in, self.g_w_out.data(), &self.g_b_out]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.g_w_in.data_mut(),
            &mut self.g_b_in,
            self.g_w_out.data_mut(),
            &mut self.g_b_out,
        ]
    }
}

/// Backward pass with the routing mask held constant (no gradient through routing).
pub fn backward(
    params: &ForestParams,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<LayerGradients> {
    if cache.signature != params.signature() {
        return Err(Error::StaleCache(format!(
            "cache built for {:?}, layer is {:?}",
            cache.signature,
            params.signature()
        )));
    }
    if upstream.shape() != (cache.input.rows(), params.d_out()) {
        return Err(Error::StaleCache(format!(
            "upstream gradient {:?} vs expected {:?}",
            upstream.shape(),
            (cache.input.rows(), params.d_out())
        )));
    }
    // Through the final GELU of the post variant: ∇U = G_Y ⊙ GELU'(U).
    let gy = match params.variant() {
        Variant::PreGelu => upstream.clone(),
        Variant::PostGelu => {
            let u = cache
                .pre_activation
                .as_ref()
                .ok_or_else(|| Error::StaleCache("post-GELU cache lacks U".into()))?;
            upstream.zip_map(u, |g, u| g * gelu_prime(u))?
        }
    };
    match &cache.mode {
        CacheMode::Masked { z } => masked_backward(params, cache, z, &gy),
        CacheMode::Sequential { path_logits } => sequential_backward(params, cache, path_logits, &gy),
    }
}

fn masked_backward(
    params: &ForestParams,
    cache: &ForwardCache,
    z: &Matrix,
    gy: &Matrix,
) -> Result<LayerGradients> {
    let x = &cache.input;
    let mask = &cache.mask;
    let a = masked_activations(params, z, mask);
    let g_a = gy.matmul_nt(&params.w_out)?;
    let g_w_out = a.matmul_tn(gy)?;
    let g_b_out = gy.column_sums();

    let n = params.nodes_per_tree();
    let per_path = params.depth() + 1;
    let mut g_z = Matrix::zeros(z.rows(), z.cols());
    let mut path_upstream = Vec::with_capacity(x.rows() * params.trees() * per_path);
    let mut path_logit_grad = Vec::with_capacity(path_upstream.capacity());
    for b in 0..x.rows() {
        for p in 0..params.trees() {
            for &node in mask.path(b, p) {
                let c = p * n + node as usize;
                let up = g_a[(b, c)];
                let gz = match params.variant() {
                    Variant::PreGelu => up * gelu_prime(z[(b, c)]),
                    Variant::PostGelu => up,
                };
                g_z[(b, c)] = gz;
                path_upstream.push(up);
                path_logit_grad.push(gz);
            }
        }
    }
    Ok(LayerGradients {
        g_w_in: g_z.matmul_tn(x)?,
        g_b_in: g_z.column_sums(),
        g_w_out,
        g_b_out,
        g_x: g_z.matmul(&params.w_in)?,
        path_upstream,
        path_logit_grad,
    })
}

fn sequential_backward(
    params: &ForestParams,
    cache: &ForwardCache,
    path_logits: &[f64],
    gy: &Matrix,
) -> Result<LayerGradients> {
    let x = &cache.input;
    let (trees, depth) = (params.trees(), params.depth());
    let total = params.total_nodes();
    let mut g_w_in = Matrix::zeros(total, params.d_in());
    let mut g_b_in = vec![0.0; total];
    let mut g_w_out = Matrix::zeros(total, params.d_out());
    let mut g_x = Matrix::zeros(x.rows(), params.d_in());
    let mut path_upstream = Vec::with_capacity(path_logits.len());
    let mut path_logit_grad = Vec::with_capacity(path_logits.len());
    let mut k = 0;
    for b in 0..x.rows() {
        let xb = x.row(b);
        let gyb = gy.row(b);
        for p in 0..trees {
            for level in 0..=depth {
                let node = cache.mask.node(b, p, level);
                let r = params.row_of(p, node);
                let z = path_logits[k];
                k += 1;
                let up = dot(gyb, params.w_out.row(r));
                let (act, gz) = match params.variant() {
                    Variant::PreGelu => (gelu(z), up * gelu_prime(z)),
                    Variant::PostGelu => (z, up),
                };
                axpy(act, gyb, g_w_out.row_mut(r));
                axpy(gz, xb, g_w_in.row_mut(r));
                g_b_in[r] += gz;
                axpy(gz, params.w_in.row(r), g_x.row_mut(b));
                path_upstream.push(up);
                path_logit_grad.push(gz);
            }
        }
    }
    Ok(LayerGradients {
        g_w_in,
        g_b_in,
        g_w_out,
        g_b_out: gy.column_sums(),
        g_x,
        path_upstream,
        path_logit_grad,
    })
}
