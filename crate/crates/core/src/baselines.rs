//! Comparison blocks: the dense two-layer feed-forward block and a top-k
//! mixture of dense experts with a linear router.

use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};
use crate::io::{read_f64s, read_magic, read_u32, write_f64s, write_u32};
use crate::numeric::{dot, gelu, gelu_prime, Matrix, Rng};
use crate::params::Params;

pub const DENSE_MAGIC: &[u8; 4] = b"DFF1";
pub const MOE_MAGIC: &[u8; 4] = b"MOE1";

/// Expert counts paired with tree depths in the reference comparison
/// (depth 3, 5, 7 against 8, 21, 106 experts, top-2 routing).
pub const MOE_PRESETS: [(usize, usize); 3] = [(3, 8), (5, 21), (7, 106)];

/// `y = GELU(x·W1 + b1)·W2 + b2`. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFF {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl DenseFF {
    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_hidden == 0 || d_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "dense block dims must be >= 1 (got {d_in}, {d_hidden}, {d_out})"
            )));
        }
        Ok(Self {
            w1: Matrix::zeros(d_in, d_hidden),
            b1: vec![0.0; d_hidden],
            w2: Matrix::zeros(d_hidden, d_out),
            b2: vec![0.0; d_out],
        })
    }

    pub fn init(rng: &mut Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        let mut p = Self::zeros(d_in, d_hidden, d_out)?;
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (d_hidden as f64).sqrt();
        p.w1.data_mut().iter_mut().for_each(|v| *v = rng.gaussian(0.0, s1));
        p.w2.data_mut().iter_mut().for_each(|v| *v = rng.gaussian(0.0, s2));
        Ok(p)
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, DenseCache)> {
        if x.cols() != self.d_in() {
            return shape_err(format!(
                "dense block expects {} features, got {}",
                self.d_in(),
                x.cols()
            ));
        }
        let mut pre = x.matmul(&self.w1)?;
        pre.add_row_vector(&self.b1)?;
        let act = pre.map(gelu);
        let mut y = act.matmul(&self.w2)?;
        y.add_row_vector(&self.b2)?;
        y.check_finite("dense block output")?;
        Ok((
            y,
            DenseCache {
                input: x.clone(),
                pre,
                act,
            },
        ))
    }

    /// Returns parameter gradients (as a `DenseFF`) and the input gradient.
    pub fn backward(&self, cache: &DenseCache, gy: &Matrix) -> Result<(DenseFF, Matrix)> {
        if gy.shape() != (cache.input.rows(), self.d_out()) || cache.pre.cols() != self.d_hidden() {
            return Err(Error::StaleCache(format!(
                "dense upstream {:?} does not match cache",
                gy.shape()
            )));
        }
        let g_w2 = cache.act.matmul_tn(gy)?;
        let g_b2 = gy.column_sums();
        let g_act = gy.matmul_nt(&self.w2)?;
        let g_pre = g_act.zip_map(&cache.pre, |g, p| g * gelu_prime(p))?;
        let g_w1 = cache.input.matmul_tn(&g_pre)?;
        let g_b1 = g_pre.column_sums();
        let g_x = g_pre.matmul_nt(&self.w1)?;
        Ok((
            DenseFF {
                w1: g_w1,
                b1: g_b1,
                w2: g_w2,
                b2: g_b2,
            },
            g_x,
        ))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DENSE_MAGIC)?;
        for v in [self.d_in(), self.d_hidden(), self.d_out()] {
            write_u32(&mut w, v as u32)?;
        }
        for t in self.tensors() {
            write_f64s(&mut w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        read_magic(&mut r, DENSE_MAGIC)?;
        Self::read_body(&mut r)
    }

    fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        let d_in = read_u32(r)? as usize;
        let d_hidden = read_u32(r)? as usize;
        let d_out = read_u32(r)? as usize;
        let mut p = Self::zeros(d_in, d_hidden, d_out).map_err(|e| Error::Format(e.to_string()))?;
        for t in p.tensors_mut() {
            read_f64s(r, t)?;
        }
        Ok(p)
    }
}

impl Params for DenseFF {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }
}

/// Top-k mixture of dense experts. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MoE {
    top_k: usize,
    /// `d_in x E`, no bias.
    pub router: Matrix,
    pub experts: Vec<DenseFF>,
}

#[derive(Debug, Clone)]
pub struct MoECache {
    pub input: Matrix,
    /// Selected experts per sample, best first (`B·k`).
    pub selected: Vec<usize>,
    /// Softmax weights over the selected logits (`B·k`).
    pub weights: Vec<f64>,
    /// Expert output for each (sample, slot) pair (`B·k x d_out`).
    outputs: Matrix,
    /// Per expert: the (sample·k + slot) rows it served and its cache.
    expert_rows: Vec<Option<(Vec<usize>, DenseCache)>>,
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn softmax(vals: &[f64]) -> Vec<f64> {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl MoE {
    pub fn zeros(
        d_in: usize,
        d_expert: usize,
        d_out: usize,
        experts: usize,
        top_k: usize,
    ) -> Result<Self> {
        if top_k == 0 || top_k > experts {
            return Err(Error::InvalidArgument(format!(
                "top_k must be in 1..={experts}, got {top_k}"
            )));
        }
        Ok(Self {
            top_k,
            router: Matrix::zeros(d_in, experts),
            experts: (0..experts)
                .map(|_| DenseFF::zeros(d_in, d_expert, d_out))
                .collect::<Result<_>>()?,
        })
    }

    pub fn init(
        rng: &mut Rng,
        d_in: usize,
        d_expert: usize,
        d_out: usize,
        experts: usize,
        top_k: usize,
    ) -> Result<Self> {
        let mut m = Self::zeros(d_in, d_expert, d_out, experts, top_k)?;
        let s = 1.0 / (d_in as f64).sqrt();
        m.router.data_mut().iter_mut().for_each(|v| *v = rng.gaussian(0.0, s));
        for e in m.experts.iter_mut() {
            *e = DenseFF::init(rng, d_in, d_expert, d_out)?;
        }
        Ok(m)
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_in(&self) -> usize {
        self.router.rows()
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].d_out()
    }

    pub fn d_expert(&self) -> usize {
        self.experts[0].d_hidden()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MoECache)> {
        if x.cols() != self.d_in() {
            return shape_err(format!("MoE expects {} features, got {}", self.d_in(), x.cols()));
        }
        let (batch, k) = (x.rows(), self.top_k);
        let logits = x.matmul(&self.router)?;
        logits.check_finite("router logits")?;
        let mut selected = Vec::with_capacity(batch * k);
        let mut weights = Vec::with_capacity(batch * k);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); self.num_experts()];
        for b in 0..batch {
            let row = logits.row(b);
            let top = top_k_indices(row, k);
            let w = softmax(&top.iter().map(|&e| row[e]).collect::<Vec<_>>());
            for (slot, &e) in top.iter().enumerate() {
                assigned[e].push(b * k + slot);
            }
            selected.extend(top);
            weights.extend(w);
        }
        let mut outputs = Matrix::zeros(batch * k, self.d_out());
        let mut expert_rows = Vec::with_capacity(self.num_experts());
        for (e, rows) in assigned.into_iter().enumerate() {
            if rows.is_empty() {
                expert_rows.push(None);
                continue;
            }
            let samples: Vec<usize> = rows.iter().map(|r| r / k).collect();
            let (out, cache) = self.experts[e].forward(&x.gather_rows(&samples))?;
            for (i, &r) in rows.iter().enumerate() {
                outputs.row_mut(r).copy_from_slice(out.row(i));
            }
            expert_rows.push(Some((rows, cache)));
        }
        let mut y = Matrix::zeros(batch, self.d_out());
        for b in 0..batch {
            for slot in 0..k {
                let r = b * k + slot;
                crate::numeric::axpy(weights[r], outputs.row(r), y.row_mut(b));
            }
        }
        Ok((
            y,
            MoECache {
                input: x.clone(),
                selected,
                weights,
                outputs,
                expert_rows,
            },
        ))
    }

    /// Expert selection is treated as constant; gradient reaches the router
    /// only through the softmax weights of the selected experts.
    pub fn backward(&self, cache: &MoECache, gy: &Matrix) -> Result<(MoE, Matrix)> {
        let (batch, k) = (cache.input.rows(), self.top_k);
        if gy.shape() != (batch, self.d_out()) || cache.selected.len() != batch * k {
            return Err(Error::StaleCache(format!(
                "MoE upstream {:?} does not match cache",
                gy.shape()
            )));
        }
        let e_count = self.num_experts();
        let mut grads = MoE::zeros(self.d_in(), self.d_expert(), self.d_out(), e_count, k)?;
        let mut g_x = Matrix::zeros(batch, self.d_in());

        for (e, entry) in cache.expert_rows.iter().enumerate() {
            let Some((rows, ecache)) = entry else { continue };
            let mut g_out = Matrix::zeros(rows.len(), self.d_out());
            for (i, &r) in rows.iter().enumerate() {
                let b = r / k;
                crate::numeric::axpy(cache.weights[r], gy.row(b), g_out.row_mut(i));
            }
            let (g_e, g_xe) = self.experts[e].backward(ecache, &g_out)?;
            grads.experts[e] = g_e;
            for (i, &r) in rows.iter().enumerate() {
                crate::numeric::axpy(1.0, g_xe.row(i), g_x.row_mut(r / k));
            }
        }

        let mut g_logits = Matrix::zeros(batch, e_count);
        for b in 0..batch {
            let range = b * k..(b + 1) * k;
            let g_w: Vec<f64> = range
                .clone()
                .map(|r| dot(gy.row(b), cache.outputs.row(r)))
                .collect();
            let w = &cache.weights[range.clone()];
            let mean: f64 = w.iter().zip(&g_w).map(|(a, g)| a * g).sum();
            for (slot, r) in range.enumerate() {
                g_logits[(b, cache.selected[r])] = w[slot] * (g_w[slot] - mean);
            }
        }
        grads.router = cache.input.matmul_tn(&g_logits)?;
        g_x.add_assign(&g_logits.matmul_nt(&self.router)?)?;
        Ok((grads, g_x))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MOE_MAGIC)?;
        for v in [
            self.d_in(),
            self.d_out(),
            self.num_experts(),
            self.top_k,
            self.d_expert(),
        ] {
            write_u32(&mut w, v as u32)?;
        }
        for t in self.tensors() {
            write_f64s(&mut w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        read_magic(&mut r, MOE_MAGIC)?;
        let d_in = read_u32(&mut r)? as usize;
        let d_out = read_u32(&mut r)? as usize;
        let experts = read_u32(&mut r)? as usize;
        let top_k = read_u32(&mut r)? as usize;
        let d_expert = read_u32(&mut r)? as usize;
        let mut m = Self::zeros(d_in, d_expert, d_out, experts, top_k)
            .map_err(|e| Error::Format(e.to_string()))?;
        for t in m.tensors_mut() {
            read_f64s(&mut r, t)?;
        }
        Ok(m)
    }
}

impl Params for MoE {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![self.router.data()];
        for e in &self.experts {
            v.extend(e.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.router.data_mut()];
        for e in self.experts.iter_mut() {
            v.extend(e.tensors_mut());
        }
        v
    }
}

/// Expert count whose active fraction `k/E` matches `1 - target_sparsity`.
pub fn match_sparsity(target_sparsity: f64, top_k: usize) -> Result<usize> {
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity must be in (0, 1), got {target_sparsity}"
        )));
    }
    Ok((top_k as f64 / (1.0 - target_sparsity)).round() as usize)
}

/// Inactive expert fraction `1 - k/E`.
pub fn moe_sparsity(experts: usize, top_k: usize) -> f64 {
    1.0 - top_k as f64 / experts as f64
}

pub fn dense_param_count(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
    d_in * d_hidden + d_hidden + d_hidden * d_out + d_out
}

pub fn moe_param_count(d_in: usize, d_expert: usize, d_out: usize, experts: usize) -> usize {
    d_in * experts + experts * dense_param_count(d_in, d_expert, d_out)
}

/// Expert hidden width whose total parameter count is closest to a dense
/// block of width `d_hidden`.
pub fn moe_expert_width(d_in: usize, d_hidden: usize, d_out: usize, experts: usize) -> usize {
    let target = dense_param_count(d_in, d_hidden, d_out) as f64;
    let per_unit = (experts * (d_in + 1 + d_out)) as f64;
    let fixed = (experts * (d_in + d_out)) as f64;
    let guess = ((target - fixed) / per_unit).max(1.0);
    let lo = guess.floor().max(1.0) as usize;
    [lo, lo + 1]
        .into_iter()
        .min_by_key(|&w| {
            (moe_param_count(d_in, w, d_out, experts) as i64 - target as i64).unsigned_abs()
        })
        .unwrap_or(1)
}
