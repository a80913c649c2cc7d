use crate::block::{Block, BlockCache, BlockGrads, BlockSpec};
use crate::error::{shape_err, Error, Result};
use crate::forest::RouteMask;
use crate::numeric::{axpy, dot, sample_gaussian, Matrix, Rng};
use crate::params::Params;

const LN_EPS: f64 = 1e-5;

/// Evaluates one feed-forward block: `(layer index, block, input)`.
pub type FfForward<'a> = dyn Fn(usize, &Block, &Matrix) -> Result<(Matrix, BlockCache)> + 'a;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub vocab: usize,
    pub context: usize,
    pub d_model: usize,
    pub layers: usize,
    /// Reuse the token embedding as the output projection.
    pub tied: bool,
    pub ff: BlockSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmLayer {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub ff: Block,
}

/// Pre-norm transformer with single-head causal attention and one
/// swappable feed-forward block per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    cfg: LmConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LmLayer>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head: Option<Matrix>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: NormCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per sequence, `t x t` lower-triangular attention weights.
    probs: Vec<Matrix>,
    o: Matrix,
    ln2: NormCache,
    ff: BlockCache,
}

#[derive(Debug, Clone)]
pub struct LmCache {
    tokens: Vec<Vec<usize>>,
    seq_len: usize,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    hf: Matrix,
}

impl LmCache {
    /// Routing masks of the forest blocks, one entry per layer.
    pub fn route_masks(&self) -> Vec<Option<&RouteMask>> {
        self.layers.iter().map(|l| l.ff.route_mask()).collect()
    }

    pub fn block_cache(&self, layer: usize) -> Option<&BlockCache> {
        self.layers.get(layer).map(|l| &l.ff)
    }

    /// Input rows fed to the feed-forward block of `layer`.
    pub fn ff_input(&self, layer: usize) -> Option<&Matrix> {
        match &self.layers.get(layer)?.ff {
            BlockCache::Forest(c) => Some(&c.input),
            BlockCache::Dense(c) => Some(&c.input),
            BlockCache::Moe(c) => Some(&c.input),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub ff: BlockGrads,
}

#[derive(Debug, Clone)]
pub struct LmGrads {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerGrads>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head: Option<Matrix>,
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, sample_gaussian(rng, 0.0, std, rows * cols)?.into_vec())
}

fn layer_norm(x: &Matrix, g: &[f64], b: &[f64]) -> (Matrix, NormCache) {
    let d = x.cols() as f64;
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..x.cols() {
            let h = (row[c] - mean) * inv;
            xhat[(r, c)] = h;
            y[(r, c)] = g[c] * h + b[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `g_x` and accumulates into `g_g`, `g_b`.
fn layer_norm_backward(
    cache: &NormCache,
    g: &[f64],
    gy: &Matrix,
    g_g: &mut [f64],
    g_b: &mut [f64],
) -> Matrix {
    let (rows, cols) = gy.shape();
    let d = cols as f64;
    let mut gx = Matrix::zeros(rows, cols);
    let mut gxhat = vec![0.0; cols];
    for r in 0..rows {
        let xh = cache.xhat.row(r);
        let gyr = gy.row(r);
        for c in 0..cols {
            g_g[c] += gyr[c] * xh[c];
            g_b[c] += gyr[c];
            gxhat[c] = gyr[c] * g[c];
        }
        let m1 = gxhat.iter().sum::<f64>() / d;
        let m2 = dot(&gxhat, xh) / d;
        let inv = cache.inv_std[r];
        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (gxhat[c] - m1 - xh[c] * m2);
        }
    }
    gx
}

impl TinyLM {
    pub fn init(rng: &mut Rng, cfg: LmConfig) -> Result<Self> {
        if cfg.vocab == 0 || cfg.context == 0 || cfg.d_model == 0 {
            return Err(Error::InvalidArgument(format!(
                "vocab, context and d_model must be positive, got {}/{}/{}",
                cfg.vocab, cfg.context, cfg.d_model
            )));
        }
        let d = cfg.d_model;
        let attn_std = 1.0 / (d as f64).sqrt();
        let tok_emb = gaussian_matrix(rng, cfg.vocab, d, 0.1)?;
        let pos_emb = gaussian_matrix(rng, cfg.context, d, 0.1)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LmLayer {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                wq: gaussian_matrix(rng, d, d, attn_std)?,
                wk: gaussian_matrix(rng, d, d, attn_std)?,
                wv: gaussian_matrix(rng, d, d, attn_std)?,
                wo: gaussian_matrix(rng, d, d, attn_std)?,
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                ff: Block::init(rng, cfg.ff, d, d)?,
            });
        }
        let head = if cfg.tied {
            None
        } else {
            Some(gaussian_matrix(rng, d, cfg.vocab, attn_std)?)
        };
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            head,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    /// Parameters touched for one token.
    pub fn active_param_count(&self) -> usize {
        let ff_total: usize = self.layers.iter().map(|l| l.ff.num_params()).sum();
        let ff_active: usize = self.layers.iter().map(|l| l.ff.active_param_count()).sum();
        self.num_params() - ff_total + ff_active
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<usize> {
        let t = tokens.first().map(|s| s.len()).unwrap_or(0);
        if t == 0 {
            return Err(Error::Empty("no tokens".into()));
        }
        if t > self.cfg.context {
            return shape_err(format!("sequence length {t} exceeds context {}", self.cfg.context));
        }
        for s in tokens {
            if s.len() != t {
                return shape_err("sequences in a batch must share one length");
            }
            if let Some(&bad) = s.iter().find(|&&id| id >= self.cfg.vocab) {
                return Err(Error::InvalidArgument(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.cfg.vocab
                )));
            }
        }
        Ok(t)
    }

    /// Logits for every position, rows ordered sequence-major.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<(Matrix, LmCache)> {
        self.forward_with(tokens, &|_, block, x| block.forward(x))
    }

    /// As [`TinyLM::forward`], with `ff(layer, block, input)` evaluating
    /// each feed-forward block.
    pub fn forward_with(&self, tokens: &[Vec<usize>], ff: &FfForward) -> Result<(Matrix, LmCache)> {
        let t = self.check_tokens(tokens)?;
        let d = self.cfg.d_model;
        let rows = tokens.len() * t;
        let mut x = Matrix::zeros(rows, d);
        for (s, seq) in tokens.iter().enumerate() {
            for (i, &id) in seq.iter().enumerate() {
                let out = x.row_mut(s * t + i);
                for c in 0..d {
                    out[c] = self.tok_emb[(id, c)] + self.pos_emb[(i, c)];
                }
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
            let q = a.matmul(&layer.wq)?;
            let k = a.matmul(&layer.wk)?;
            let v = a.matmul(&layer.wv)?;
            let mut o = Matrix::zeros(rows, d);
            let mut probs = Vec::with_capacity(tokens.len());
            for s in 0..tokens.len() {
                let base = s * t;
                let mut p = Matrix::zeros(t, t);
                for i in 0..t {
                    let qi = q.row(base + i);
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let sc = dot(qi, k.row(base + j)) * scale;
                        p[(i, j)] = sc;
                        m = m.max(sc);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (p[(i, j)] - m).exp();
                        p[(i, j)] = e;
                        z += e;
                    }
                    let orow = o.row_mut(base + i);
                    for j in 0..=i {
                        p[(i, j)] /= z;
                        axpy(p[(i, j)], v.row(base + j), orow);
                    }
                }
                probs.push(p);
            }
            x.add_assign(&o.matmul(&layer.wo)?)?;
            let (c, ln2) = layer_norm(&x, &layer.ln2_g, &layer.ln2_b);
            let (f, ff) = ff(li, &layer.ff, &c)?;
            x.add_assign(&f)?;
            caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                ff,
            });
        }
        let (hf, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let logits = match &self.head {
            Some(w) => hf.matmul(w)?,
            None => hf.matmul_nt(&self.tok_emb)?,
        };
        logits.check_finite("language-model logits")?;
        Ok((
            logits,
            LmCache {
                tokens: tokens.to_vec(),
                seq_len: t,
                layers: caches,
                lnf,
                hf,
            },
        ))
    }

    pub fn backward(&self, cache: &LmCache, g_logits: &Matrix) -> Result<LmGrads> {
        let t = cache.seq_len;
        let rows = cache.tokens.len() * t;
        let d = self.cfg.d_model;
        if g_logits.shape() != (rows, self.cfg.vocab) || cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache("logit gradient does not match cached forward".into()));
        }
        let mut g_tok = Matrix::zeros(self.cfg.vocab, d);
        let (g_hf, g_head) = match &self.head {
            Some(w) => (g_logits.matmul_nt(w)?, Some(cache.hf.matmul_tn(g_logits)?)),
            None => {
                g_tok = g_logits.matmul_tn(&cache.hf)?;
                (g_logits.matmul(&self.tok_emb)?, None)
            }
        };
        let mut lnf_g = vec![0.0; d];
        let mut lnf_b = vec![0.0; d];
        let mut gx = layer_norm_backward(&cache.lnf, &self.lnf_g, &g_hf, &mut lnf_g, &mut lnf_b);

        let scale = 1.0 / (d as f64).sqrt();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let (g_ff, g_c) = layer.ff.backward(&lc.ff, &gx)?;
            let mut ln2_g = vec![0.0; d];
            let mut ln2_b = vec![0.0; d];
            gx.add_assign(&layer_norm_backward(&lc.ln2, &layer.ln2_g, &g_c, &mut ln2_g, &mut ln2_b))?;

            let g_wo = lc.o.matmul_tn(&gx)?;
            let g_o = gx.matmul_nt(&layer.wo)?;
            let mut g_q = Matrix::zeros(rows, d);
            let mut g_k = Matrix::zeros(rows, d);
            let mut g_v = Matrix::zeros(rows, d);
            let mut g_p = vec![0.0; t];
            for (s, p) in lc.probs.iter().enumerate() {
                let base = s * t;
                for i in 0..t {
                    let goi = g_o.row(base + i);
                    let mut inner = 0.0;
                    for j in 0..=i {
                        g_p[j] = dot(goi, lc.v.row(base + j));
                        inner += p[(i, j)] * g_p[j];
                        axpy(p[(i, j)], goi, g_v.row_mut(base + j));
                    }
                    for j in 0..=i {
                        let ds = p[(i, j)] * (g_p[j] - inner) * scale;
                        axpy(ds, lc.k.row(base + j), g_q.row_mut(base + i));
                        axpy(ds, lc.q.row(base + i), g_k.row_mut(base + j));
                    }
                }
            }
            let g_wq = lc.a.matmul_tn(&g_q)?;
            let g_wk = lc.a.matmul_tn(&g_k)?;
            let g_wv = lc.a.matmul_tn(&g_v)?;
            let mut g_a = g_q.matmul_nt(&layer.wq)?;
            g_a.add_assign(&g_k.matmul_nt(&layer.wk)?)?;
            g_a.add_assign(&g_v.matmul_nt(&layer.wv)?)?;
            let mut ln1_g = vec![0.0; d];
            let mut ln1_b = vec![0.0; d];
            gx.add_assign(&layer_norm_backward(&lc.ln1, &layer.ln1_g, &g_a, &mut ln1_g, &mut ln1_b))?;
            layer_grads.push(LayerGrads {
                ln1_g,
                ln1_b,
                wq: g_wq,
                wk: g_wk,
                wv: g_wv,
                wo: g_wo,
                ln2_g,
                ln2_b,
                ff: g_ff,
            });
        }
        layer_grads.reverse();

        let mut g_pos = Matrix::zeros(self.cfg.context, d);
        for (s, seq) in cache.tokens.iter().enumerate() {
            for (i, &id) in seq.iter().enumerate() {
                let gr = gx.row(s * t + i);
                axpy(1.0, gr, g_tok.row_mut(id));
                axpy(1.0, gr, g_pos.row_mut(i));
            }
        }
        Ok(LmGrads {
            tok_emb: g_tok,
            pos_emb: g_pos,
            layers: layer_grads,
            lnf_g,
            lnf_b,
            head: g_head,
        })
    }

    /// Splits `len + 1`-token windows into inputs and next-token targets.
    pub fn split_windows(windows: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
        let inputs = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
        let targets = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
        (inputs, targets)
    }
}

impl Params for TinyLM {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.tok_emb.data(), self.pos_emb.data()];
        for l in &self.layers {
            v.extend([
                &l.ln1_g[..],
                &l.ln1_b,
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.ln2_g,
                &l.ln2_b,
            ]);
            v.extend(l.ff.tensors());
        }
        v.push(&self.lnf_g);
        v.push(&self.lnf_b);
        if let Some(h) = &self.head {
            v.push(h.data());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for l in self.layers.iter_mut() {
            v.extend([
                &mut l.ln1_g[..],
                &mut l.ln1_b,
                l.wq.data_mut(),
                l.wk.data_mut(),
                l.wv.data_mut(),
                l.wo.data_mut(),
                &mut l.ln2_g,
                &mut l.ln2_b,
            ]);
            v.extend(l.ff.tensors_mut());
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        if let Some(h) = self.head.as_mut() {
            v.push(h.data_mut());
        }
        v
    }
}

impl Params for LmGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.tok_emb.data(), self.pos_emb.data()];
        for l in &self.layers {
            v.extend([
                &l.ln1_g[..],
                &l.ln1_b,
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.ln2_g,
                &l.ln2_b,
            ]);
            v.extend(l.ff.tensors());
        }
        v.push(&self.lnf_g);
        v.push(&self.lnf_b);
        if let Some(h) = &self.head {
            v.push(h.data());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for l in self.layers.iter_mut() {
            v.extend([
                &mut l.ln1_g[..],
                &mut l.ln1_b,
                l.wq.data_mut(),
                l.wk.data_mut(),
                l.wv.data_mut(),
                l.wo.data_mut(),
                &mut l.ln2_g,
                &mut l.ln2_b,
            ]);
            v.extend(l.ff.tensors_mut());
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        if let Some(h) = self.head.as_mut() {
            v.push(h.data_mut());
        }
        v
    }
}
