use crate::block::{Block, BlockCache, BlockGrads, BlockSpec};
use crate::error::{shape_err, Error, Result};
use crate::numeric::{Matrix, Rng};
use crate::params::Params;

use super::lm::FfForward;

/// Parity pattern on `[0,1)²` with `grid` cells per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckerboardSpec {
    pub grid: usize,
}

impl Default for CheckerboardSpec {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl CheckerboardSpec {
    pub fn new(grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::InvalidArgument("checkerboard grid must be >= 1".into()));
        }
        Ok(Self { grid })
    }

    pub fn label(&self, x1: f64, x2: f64) -> usize {
        let g = self.grid as f64;
        let c1 = (x1 * g).floor() as i64;
        let c2 = (x2 * g).floor() as i64;
        (c1 + c2).rem_euclid(2) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x 2`
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn gen_checkerboard(rng: &mut Rng, n: usize, spec: CheckerboardSpec) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("checkerboard sample count must be >= 1".into()));
    }
    let mut x = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (rng.uniform(), rng.uniform());
        x[(i, 0)] = a;
        x[(i, 1)] = b;
        labels.push(spec.label(a, b));
    }
    Ok(Dataset { x, labels })
}

pub fn checkerboard_csv(data: &Dataset) -> String {
    let mut s = String::from("x1,x2,label\n");
    for i in 0..data.len() {
        s.push_str(&format!("{},{},{}\n", data.x[(i, 0)], data.x[(i, 1)], data.labels[i]));
    }
    s
}

/// Fraction of rows whose arg-max logit equals the label (ties to the lower class).
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &t)| {
            let row = logits.row(*r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best == t
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Affine map applied to raw board coordinates before the block.
pub const INPUT_SCALE: f64 = 8.0;
pub const INPUT_SHIFT: f64 = -4.0;

/// Two-class model: inputs are mapped from `[0,1)²` to `[-4,4)²`, passed
/// through one feed-forward block and read out as two logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub block: Block,
}

impl Classifier {
    /// First-layer biases are spread uniformly over `[-1, 1]` so that the
    /// initial lines cover the board instead of all meeting at its centre.
    pub fn init(rng: &mut Rng, spec: BlockSpec) -> Result<Self> {
        let mut block = Block::init(rng, spec, 2, 2)?;
        let biases: Vec<&mut Vec<f64>> = match &mut block {
            Block::Dense(d) => vec![&mut d.b1],
            Block::Forest(f) => vec![&mut f.b_in],
            Block::Moe(m) => m.experts.iter_mut().map(|e| &mut e.b1).collect(),
        };
        for b in biases {
            b.iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        }
        Ok(Self { block })
    }

    pub fn center(x: &Matrix) -> Result<Matrix> {
        if x.cols() != 2 {
            return shape_err(format!("classifier input has {} columns, expected 2", x.cols()));
        }
        Ok(x.map(|v| INPUT_SCALE * v + INPUT_SHIFT))
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, BlockCache)> {
        self.block.forward(&Self::center(x)?)
    }

    pub fn forward_with(&self, x: &Matrix, ff: &FfForward) -> Result<(Matrix, BlockCache)> {
        ff(0, &self.block, &Self::center(x)?)
    }

    pub fn backward(&self, cache: &BlockCache, g_logits: &Matrix) -> Result<BlockGrads> {
        Ok(self.block.backward(cache, g_logits)?.0)
    }
}

impl Params for Classifier {
    fn tensors(&self) -> Vec<&[f64]> {
        self.block.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.block.tensors_mut()
    }
}
