//! Fully-connected layer, real or binary weight mode. No bias term; a
//! batch-norm layer carries the affine part.

use super::binarize::binarize_weights;
use super::{Mode, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y = x * W^T`, weights stored `[out, in]` row-major.
///
/// In binary mode the latent weights are binarized on every forward pass
/// and the output is computed as the plain ±1 product scaled by the
/// per-output-channel `alpha` afterwards, so sums stay exactly integral
/// whenever the input is ±1-valued.
pub struct Linear<T: Scalar> {
    pub w: Param<T>,
    pub binary: bool,
    cache: Option<Cache<T>>,
}

struct Cache<T: Scalar> {
    x: Tensor<T>,
    bin: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(w: Tensor<T>, binary: bool) -> Self {
        assert_eq!(w.rank(), 2, "linear weights must be [out, in]");
        Linear {
            w: Param::new(w, true),
            binary,
            cache: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(x.rank(), 2, "linear input must be [batch, features]");
        let (n, k) = (x.shape()[0], x.shape()[1]);
        assert_eq!(k, self.in_features(), "linear input feature mismatch");
        let f = self.out_features();

        let bin = if self.binary {
            Some(binarize_weights(&self.w.value))
        } else {
            None
        };
        let weights = bin.as_ref().map(|(b, _)| b).unwrap_or(&self.w.value);

        let mut out = vec![T::zero(); n * f];
        matmul_nt(x.data(), weights.data(), n, k, f, &mut out);
        if let Some((_, alpha)) = &bin {
            for row in out.chunks_exact_mut(f) {
                for (o, &a) in row.iter_mut().zip(alpha) {
                    *o *= a;
                }
            }
        }

        if mode == Mode::Train {
            self.cache = Some(Cache { x: x.clone(), bin });
        }
        Tensor::from_vec(&[n, f], out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let Cache { x, bin } = self.cache.take().expect("linear backward without forward");
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let f = self.out_features();
        assert_eq!(grad_out.shape(), &[n, f]);

        let g = grad_out.data();
        let xd = x.data();

        // Latent-weight gradient: straight-through from the effective
        // weight, identical in real and binary mode.
        {
            let gw = self.w.grad.data_mut();
            for i in 0..n {
                let x_row = &xd[i * k..(i + 1) * k];
                for j in 0..f {
                    let coef = g[i * f + j];
                    if coef != T::zero() {
                        axpy(coef, x_row, &mut gw[j * k..(j + 1) * k]);
                    }
                }
            }
        }

        // Input gradient flows through the effective weights.
        let mut gx = vec![T::zero(); n * k];
        let (wd, alpha) = match &bin {
            Some((b, alpha)) => (b.data(), Some(alpha)),
            None => (self.w.value.data(), None),
        };
        for i in 0..n {
            let gx_row = &mut gx[i * k..(i + 1) * k];
            for j in 0..f {
                let mut coef = g[i * f + j];
                if let Some(alpha) = alpha {
                    coef *= alpha[j];
                }
                if coef != T::zero() {
                    axpy(coef, &wd[j * k..(j + 1) * k], gx_row);
                }
            }
        }
        Tensor::from_vec(&[n, k], gx)
    }
}

/// Dot product with eight fixed-order partial accumulators. The lane
/// split lets the compiler vectorize what would otherwise be a serial
/// float-add chain; the summation order is fixed (lanes then pairwise),
/// keeping runs bit-reproducible. Sums of ±1 products stay exactly
/// integral under any grouping, so the packed-kernel equivalence is
/// unaffected.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `out[i, j] = dot(a[i, :], b[j, :])` for `a: [n, k]`, `b: [f, k]`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, f: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), n * f);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * f..(i + 1) * f];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(coef: T, src: &[T], dst: &mut [T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += coef * s;
    }
}
