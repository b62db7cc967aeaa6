//! 2-D convolution via per-sample im2col lowering, real or binary weight
//! mode. No bias term; batch norm follows every convolution in the
//! supported architectures.

use super::binarize::binarize_weights;
use super::dense::{axpy, dot};
use super::{Mode, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output spatial dims for a convolution.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    assert!(stride >= 1);
    assert!(
        h + 2 * pad >= kh && w + 2 * pad >= kw,
        "kernel {kh}x{kw} larger than padded input {}x{}",
        h + 2 * pad,
        w + 2 * pad
    );
    (
        (h + 2 * pad - kh) / stride + 1,
        (w + 2 * pad - kw) / stride + 1,
    )
}

/// Lowers one `[C, H, W]` sample into a `[OH*OW, C*KH*KW]` patch matrix.
/// Out-of-bounds (zero-padding) positions are left as zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    let k = c * kh * kw;
    debug_assert_eq!(col.len(), oh * ow * k);
    col.fill(T::zero());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    // Contiguous kx span that lands inside the input row.
                    let x0 = ox * stride;
                    let kx_lo = pad.saturating_sub(x0);
                    let kx_hi = kw.min(w + pad - x0);
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let src0 = ci * h * w + iy * w + (x0 + kx_lo - pad);
                    let dst0 = ci * kh * kw + ky * kw + kx_lo;
                    let len = kx_hi - kx_lo;
                    row[dst0..dst0 + len].copy_from_slice(&x[src0..src0 + len]);
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    let k = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &col[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let x0 = ox * stride;
                    let kx_lo = pad.saturating_sub(x0);
                    let kx_hi = kw.min(w + pad - x0);
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let dst0 = ci * h * w + iy * w + (x0 + kx_lo - pad);
                    let src0 = ci * kh * kw + ky * kw + kx_lo;
                    for i in 0..kx_hi - kx_lo {
                        x[dst0 + i] += row[src0 + i];
                    }
                }
            }
        }
    }
}

/// Convolution with explicit weights and no caching — the shared
/// forward-only path reused by eval-mode inference and the packed runtime.
/// `weights` is `[F, C, KH, KW]`; `alpha`, when given, scales output
/// channel `f` after accumulation.
pub fn conv2d_plain<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    alpha: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    assert_eq!(x.rank(), 4, "conv input must be [N, C, H, W]");
    assert_eq!(weights.rank(), 4, "conv weights must be [F, C, KH, KW]");
    let (n, c, h, w) = dims4(x.shape());
    let (f, wc, kh, kw) = dims4(weights.shape());
    assert_eq!(c, wc, "conv input channel mismatch");
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    let k = c * kh * kw;
    let p = oh * ow;

    let mut out = vec![T::zero(); n * f * p];
    let mut col = vec![T::zero(); p * k];
    for s in 0..n {
        im2col(
            &x.data()[s * c * h * w..(s + 1) * c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut col,
        );
        let out_s = &mut out[s * f * p..(s + 1) * f * p];
        for fi in 0..f {
            let w_row = &weights.data()[fi * k..(fi + 1) * k];
            let o_row = &mut out_s[fi * p..(fi + 1) * p];
            for (pi, o) in o_row.iter_mut().enumerate() {
                *o = dot(w_row, &col[pi * k..(pi + 1) * k]);
            }
            if let Some(alpha) = alpha {
                let a = alpha[fi];
                for o in o_row.iter_mut() {
                    *o *= a;
                }
            }
        }
    }
    Tensor::from_vec(&[n, f, oh, ow], out)
}

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

pub struct Conv2d<T: Scalar> {
    pub w: Param<T>,
    pub stride: usize,
    pub pad: usize,
    pub binary: bool,
    cache: Option<Cache<T>>,
}

struct Cache<T: Scalar> {
    x: Tensor<T>,
    bin: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(w: Tensor<T>, stride: usize, pad: usize, binary: bool) -> Self {
        assert_eq!(w.rank(), 4, "conv weights must be [F, C, KH, KW]");
        Conv2d {
            w: Param::new(w, true),
            stride,
            pad,
            binary,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let bin = if self.binary {
            Some(binarize_weights(&self.w.value))
        } else {
            None
        };
        let out = match &bin {
            Some((b, alpha)) => conv2d_plain(x, b, Some(alpha), self.stride, self.pad),
            None => conv2d_plain(x, &self.w.value, None, self.stride, self.pad),
        };
        if mode == Mode::Train {
            self.cache = Some(Cache { x: x.clone(), bin });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let Cache { x, bin } = self.cache.take().expect("conv backward without forward");
        let (n, c, h, w) = dims4(x.shape());
        let (f, _, kh, kw) = dims4(self.w.value.shape());
        let (oh, ow) = conv_out_dims(h, w, kh, kw, self.stride, self.pad);
        assert_eq!(grad_out.shape(), &[n, f, oh, ow]);
        let k = c * kh * kw;
        let p = oh * ow;

        let (wd, alpha) = match &bin {
            Some((b, alpha)) => (b.data(), Some(alpha.as_slice())),
            None => (self.w.value.data(), None),
        };

        let mut gx = vec![T::zero(); x.numel()];
        let mut col = vec![T::zero(); p * k];
        let mut gcol = vec![T::zero(); p * k];
        for s in 0..n {
            let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
            im2col(xs, c, h, w, kh, kw, self.stride, self.pad, &mut col);
            let g = &grad_out.data()[s * f * p..(s + 1) * f * p];

            // Latent-weight gradient (straight-through past binarization).
            let gw = self.w.grad.data_mut();
            for fi in 0..f {
                let gw_row = &mut gw[fi * k..(fi + 1) * k];
                for pi in 0..p {
                    let coef = g[fi * p + pi];
                    if coef != T::zero() {
                        axpy(coef, &col[pi * k..(pi + 1) * k], gw_row);
                    }
                }
            }

            // Input gradient through the effective weights.
            gcol.fill(T::zero());
            for fi in 0..f {
                let w_row = &wd[fi * k..(fi + 1) * k];
                let a = alpha.map(|al| al[fi]);
                for pi in 0..p {
                    let mut coef = g[fi * p + pi];
                    if let Some(a) = a {
                        coef *= a;
                    }
                    if coef != T::zero() {
                        axpy(coef, w_row, &mut gcol[pi * k..(pi + 1) * k]);
                    }
                }
            }
            col2im_add(
                &gcol,
                c,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.pad,
                &mut gx[s * c * h * w..(s + 1) * c * h * w],
            );
        }
        Tensor::from_vec(x.shape(), gx)
    }
}
