//! Uniform view over trainable tensors so optimizers and checks can walk any model.

pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Overwrite from a flat vector laid out as in [`Params::flatten`].
    fn load_flat(&mut self, flat: &[f64]) -> crate::Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return crate::error::shape_err(format!(
                "flat parameter vector has {} entries, expected {n}",
                flat.len()
            ));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }
}

/// Compare tensor layouts of two parameter sets.
pub fn same_layout(a: &dyn Params, b: &dyn Params) -> bool {
    let ta = a.tensors();
    let tb = b.tensors();
    ta.len() == tb.len() && ta.iter().zip(tb.iter()).all(|(x, y)| x.len() == y.len())
}
