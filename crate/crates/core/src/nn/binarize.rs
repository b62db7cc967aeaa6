//! Latent-weight binarization with per-output-channel scaling.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binarizes a weight tensor whose leading axis is the output channel.
///
/// Returns the sign pattern `B` (with `sign(0) := +1` so every element is
/// exactly +1 or -1) and the per-channel scale `alpha_c`, the mean absolute
/// latent weight of channel `c`. The effective weight used by forward passes
/// is `alpha_c * B_c`. During backward the gradient w.r.t. the effective
/// weight passes straight through to the latent weight unchanged; `alpha` is
/// treated as a constant.
pub fn binarize_weights<T: Scalar>(w: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let out_channels = w.shape()[0];
    let per = w.numel() / out_channels;
    let mut signs = Vec::with_capacity(w.numel());
    let mut alpha = Vec::with_capacity(out_channels);
    for row in w.data().chunks_exact(per) {
        let mut abs_sum = T::zero();
        for &v in row {
            abs_sum += v.abs();
            signs.push(if v < T::zero() { -T::one() } else { T::one() });
        }
        alpha.push(abs_sum / T::of_usize(per));
    }
    (Tensor::from_vec(w.shape(), signs), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_example() {
        let w = Tensor::<f32>::from_vec(&[1, 4], vec![0.5, -0.25, 0.25, -1.0]);
        let (b, alpha) = binarize_weights(&w);
        assert_eq!(b.data(), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(alpha, vec![0.5]);
    }

    #[test]
    fn constant_positive_row() {
        let w = Tensor::<f32>::full(&[2, 3], 0.7);
        let (b, alpha) = binarize_weights(&w);
        assert!(b.data().iter().all(|&v| v == 1.0));
        assert!(alpha.iter().all(|&a| (a - 0.7).abs() < 1e-7));
    }

    #[test]
    fn zero_maps_to_plus_one() {
        let w = Tensor::<f32>::from_vec(&[1, 3], vec![-0.5, 0.0, 0.5]);
        let (b, _) = binarize_weights(&w);
        assert_eq!(b.data(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn per_channel_alpha() {
        let w = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -3.0, 0.5, 0.5]);
        let (_, alpha) = binarize_weights(&w);
        assert_eq!(alpha, vec![2.0, 0.5]);
    }
}
