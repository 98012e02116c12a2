use crate::error::{Error, Result};

use super::Tensor2D;

/// Mean softmax cross-entropy over a batch of logits.
///
/// Returns the loss and its gradient wrt the logits, `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor2D, labels: &[usize]) -> Result<(f64, Tensor2D)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::EmptyInput("cross-entropy over an empty batch".into()));
    }
    let mut grad = Tensor2D::zeros(batch, classes);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp();
        }
        g[label] -= 1.0;
    }
    let inv = 1.0 / batch as f64;
    grad.as_mut_slice().iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Mean squared elementwise difference and its gradient wrt `a`.
pub fn mse(a: &Tensor2D, b: &Tensor2D) -> Result<(f64, Tensor2D)> {
    a.check_same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(Error::EmptyInput("mse of empty tensors".into()));
    }
    let n = a.len() as f64;
    let diff = a.sub(b)?;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor2D) -> Tensor2D {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// `mse(softmax(logits), target)` and its gradient wrt the logits.
pub fn softmax_mse(logits: &Tensor2D, target: &Tensor2D) -> Result<(f64, Tensor2D)> {
    let probs = softmax_rows(logits);
    let (loss, dp) = mse(&probs, target)?;
    let mut grad = Tensor2D::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let p = probs.row(r);
        let g = dp.row(r);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (out, (pj, gj)) in grad.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *out = pj * (gj - dot);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, Rng};

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor2D::from_rows(&[[0.3; 4]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_gives_near_zero_loss() {
        let logits = Tensor2D::from_rows(&[[800.0, 0.0, 0.0]]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.is_finite());
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor2D::zeros(1, 3);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let logits = rng.uniform_tensor(4, 5, -2.0, 2.0);
        let labels = [0, 4, 2, 2];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let err = finite_difference_check(
            |p| softmax_cross_entropy(p, &labels).unwrap().0,
            &logits,
            &grad,
            1e-5,
        );
        assert!(err < 1e-4, "relative error {err}");
        for r in grad.iter_rows() {
            assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn mse_cases() {
        let a = Tensor2D::row_vector(&[1.0, 2.0]);
        assert_eq!(mse(&a, &a).unwrap().0, 0.0);
        let b = Tensor2D::row_vector(&[1.0, 4.0]);
        assert_eq!(mse(&a, &b).unwrap().0, 2.0);
        assert!(mse(&a, &Tensor2D::zeros(2, 1)).is_err());

        let mut rng = Rng::new(4);
        let x = rng.uniform_tensor(3, 3, -1.0, 1.0);
        let y = rng.uniform_tensor(3, 3, -1.0, 1.0);
        let (_, g) = mse(&x, &y).unwrap();
        let err = finite_difference_check(|p| mse(p, &y).unwrap().0, &x, &g, 1e-5);
        assert!(err < 1e-4);
    }

    #[test]
    fn softmax_mse_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let logits = rng.uniform_tensor(3, 5, -3.0, 3.0);
        let target = softmax_rows(&rng.uniform_tensor(3, 5, -3.0, 3.0));
        let (_, grad) = softmax_mse(&logits, &target).unwrap();
        let err = finite_difference_check(|p| softmax_mse(p, &target).unwrap().0, &logits, &grad, 1e-5);
        assert!(err < 1e-6, "relative error {err}");
        let p = softmax_rows(&logits);
        assert_eq!(softmax_mse(&logits, &p).unwrap().0, 0.0);
        for r in p.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn ce_nonnegative_and_rows_sum_to_zero(seed in proptest::prelude::any::<u64>()) {
            let mut rng = Rng::new(seed);
            let logits = rng.uniform_tensor(3, 6, -20.0, 20.0);
            let labels: Vec<usize> = (0..3).map(|_| rng.index(6)).collect();
            let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
            proptest::prop_assert!(loss >= 0.0);
            for r in grad.iter_rows() {
                proptest::prop_assert!(r.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }
}
