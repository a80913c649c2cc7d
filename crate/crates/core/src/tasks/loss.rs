use crate::error::{shape_err, Error, Result};
use crate::numeric::Matrix;

/// Log-softmax of one row, shifted by the row max.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean negative log-likelihood of `targets` and its gradient
/// `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() {
        return shape_err(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        ));
    }
    if targets.is_empty() {
        return Err(Error::Empty("cross-entropy over zero samples".into()));
    }
    logits.check_finite("logits")?;
    let classes = logits.cols();
    let batch = targets.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::InvalidArgument(format!(
                "target {t} at row {r} outside {classes} classes"
            )));
        }
        let lp = log_softmax_row(logits.row(r));
        total -= lp[t];
        for (g, l) in grad.row_mut(r).iter_mut().zip(&lp) {
            *g = l.exp() / batch;
        }
        grad[(r, t)] -= 1.0 / batch;
    }
    Ok((total / batch, grad))
}

/// `exp(total_nll / token_count)`.
pub fn perplexity(total_nll: f64, token_count: usize) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::Empty("perplexity over zero tokens".into()));
    }
    Ok((total_nll / token_count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{sample_uniform, Rng};
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_log_v() {
        for v in [2usize, 17, 256] {
            let (l, _) = cross_entropy(&Matrix::zeros(3, v), &[0, 1, v - 1]).unwrap();
            assert!((l - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_logits_give_zero() {
        let mut m = Matrix::zeros(1, 5);
        m[(0, 2)] = 1e6;
        let (l, g) = cross_entropy(&m, &[2]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let logits = sample_uniform(&mut rng, 4, 6, -3.0, 3.0);
        let t = [0, 5, 2, 2];
        let (_, g) = cross_entropy(&logits, &t).unwrap();
        let h = 1e-6;
        for i in 0..logits.data().len() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (cross_entropy(&p, &t).unwrap().0 - cross_entropy(&m, &t).unwrap().0)
                / (2.0 * h);
            let a = g.data()[i];
            assert!((fd - a).abs() <= 1e-6 * a.abs().max(1e-3), "{i}: {fd} vs {a}");
        }
    }

    #[test]
    fn bad_targets() {
        assert!(cross_entropy(&Matrix::zeros(1, 3), &[3]).is_err());
        assert!(cross_entropy(&Matrix::zeros(2, 3), &[0]).is_err());
        let mut m = Matrix::zeros(1, 2);
        m[(0, 0)] = f64::NAN;
        assert!(cross_entropy(&m, &[0]).is_err());
    }

    #[test]
    fn perplexity_cases() {
        let v = 256usize;
        let n = 1000;
        let ppl = perplexity(n as f64 * (v as f64).ln(), n).unwrap();
        assert!((ppl - v as f64).abs() / v as f64 <= 1e-9);
        assert_eq!(perplexity(0.0, 10).unwrap(), 1.0);
        assert!(perplexity(1.0, 0).is_err());

        // Oracle: geometric mean of inverse probabilities, via a log-sum.
        let mut rng = Rng::new(9);
        let probs: Vec<f64> = (0..500).map(|_| rng.uniform_range(0.01, 1.0)).collect();
        let nll: f64 = probs.iter().map(|p| -p.ln()).sum();
        let log_geo = probs.iter().map(|p| p.recip().ln()).sum::<f64>() / probs.len() as f64;
        let ppl = perplexity(nll, probs.len()).unwrap();
        assert!((ppl - log_geo.exp()).abs() <= 1e-12 * log_geo.exp());
    }

    proptest! {
        #[test]
        fn shift_invariance(seed in any::<u64>(), c in -50.0f64..50.0) {
            let mut rng = Rng::new(seed);
            let logits = sample_uniform(&mut rng, 5, 7, -4.0, 4.0);
            let t = [0, 1, 6, 3, 3];
            let (a, ga) = cross_entropy(&logits, &t).unwrap();
            let (b, gb) = cross_entropy(&logits.map(|v| v + c), &t).unwrap();
            prop_assert!((a - b).abs() <= 1e-10);
            prop_assert!(ga.max_abs_diff(&gb) <= 1e-10);
        }
    }
}
