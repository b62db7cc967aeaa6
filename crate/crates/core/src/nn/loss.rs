//! Softmax cross-entropy loss.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean cross-entropy over the batch with the gradient w.r.t. the logits:
/// `(softmax - onehot) / batch`. Numerically stabilized by max subtraction.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> (T, Tensor<T>) {
    assert_eq!(logits.rank(), 2, "logits must be [batch, classes]");
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(labels.len(), n, "label count mismatch");

    let inv_n = T::one() / T::of_usize(n);
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let label = label as usize;
        assert!(label < k, "label {label} out of range for {k} classes");
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        loss += denom.ln() - (row[label] - max);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    (loss * inv_n, Tensor::from_vec(logits.shape(), grad))
}

/// Row-wise argmax, used for accuracy accounting.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = Tensor::<f64>::zeros(&[4, 10]);
        let (loss, _) = softmax_xent(&logits, &[0, 3, 7, 9]);
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_loss_near_zero() {
        let mut logits = Tensor::<f64>::zeros(&[1, 10]);
        logits.data_mut()[4] = 50.0;
        let (loss, _) = softmax_xent(&logits, &[4]);
        assert!(loss < 1e-12);
    }

    #[test]
    fn matches_bruteforce_three_class() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.2f64, -1.1, 0.7, 2.0, 0.0, -0.5]);
        let labels = [2u8, 0];
        let (loss, grad) = softmax_xent(&logits, &labels);

        let mut want_loss = 0.0;
        let mut want_grad = vec![0.0; 6];
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * 3..(i + 1) * 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want_loss += -(row[label as usize].exp() / z).ln();
            for j in 0..3 {
                let p = row[j].exp() / z;
                want_grad[i * 3 + j] = (p - if j == label as usize { 1.0 } else { 0.0 }) / 2.0;
            }
        }
        want_loss /= 2.0;
        assert!((loss - want_loss).abs() < 1e-6);
        for (g, w) in grad.data().iter().zip(&want_grad) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_rows_sum_to_zero() {
        let logits = Tensor::from_vec(&[1, 4], vec![0.3f64, 1.0, -2.0, 0.1]);
        let (_, grad) = softmax_xent(&logits, &[1]);
        let s: f64 = grad.data().iter().sum();
        assert!(s.abs() < 1e-12);
    }
}
