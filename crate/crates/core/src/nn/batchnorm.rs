//! Batch normalization over the channel axis (axis 1).

use super::{channel_of, Mode, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Train mode normalizes with biased batch statistics (divide by N) and
/// updates running statistics as `r = (1 - momentum) * r + momentum * batch`.
/// The running variance stores the biased batch variance as well, so the
/// eval path and the training statistics agree by construction.
///
/// Eval mode applies the precomputed affine from [`BatchNorm::eval_affine`];
/// the packed inference runtime uses the same two per-channel arrays, which
/// keeps the two paths bit-identical.
pub struct BatchNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
    cache: Option<Cache<T>>,
}

struct Cache<T: Scalar> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    group: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], T::one()), true),
            beta: Param::new(Tensor::zeros(&[channels]), true),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: T::of_f64(BN_EPS),
            momentum: T::of_f64(BN_MOMENTUM),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// Per-channel `(scale, shift)` of the eval-mode affine
    /// `y = scale * x + shift` derived from the running statistics.
    pub fn eval_affine(&self) -> (Vec<T>, Vec<T>) {
        let c = self.channels();
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for i in 0..c {
            let s = self.gamma.value.data()[i] / (self.running_var.data()[i] + self.eps).sqrt();
            scale.push(s);
            shift.push(self.beta.value.data()[i] - self.running_mean.data()[i] * s);
        }
        (scale, shift)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let c = self.channels();
        assert!(x.rank() >= 2, "batchnorm input must have a channel axis");
        assert_eq!(x.shape()[1], c, "batchnorm channel mismatch");
        let n = x.numel();
        let group = n / c;
        let shape = x.shape().to_vec();

        match mode {
            Mode::Eval => {
                let (scale, shift) = self.eval_affine();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = channel_of(&shape, i);
                        scale[ch] * v + shift[ch]
                    })
                    .collect();
                Tensor::from_vec(&shape, data)
            }
            Mode::Train => {
                let gn = T::of_usize(group);
                let mut mean = vec![T::zero(); c];
                for (i, &v) in x.data().iter().enumerate() {
                    mean[channel_of(&shape, i)] += v;
                }
                for m in &mut mean {
                    *m /= gn;
                }
                let mut var = vec![T::zero(); c];
                for (i, &v) in x.data().iter().enumerate() {
                    let d = v - mean[channel_of(&shape, i)];
                    var[channel_of(&shape, i)] += d * d;
                }
                for v in &mut var {
                    *v /= gn;
                }

                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&v| T::one() / (v + self.eps).sqrt())
                    .collect();

                let mut xhat = Vec::with_capacity(n);
                let mut out = Vec::with_capacity(n);
                for (i, &v) in x.data().iter().enumerate() {
                    let ch = channel_of(&shape, i);
                    let h = (v - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    out.push(self.gamma.value.data()[ch] * h + self.beta.value.data()[ch]);
                }

                let one_minus = T::one() - self.momentum;
                for i in 0..c {
                    let rm = self.running_mean.data_mut();
                    rm[i] = one_minus * rm[i] + self.momentum * mean[i];
                    let rv = self.running_var.data_mut();
                    rv[i] = one_minus * rv[i] + self.momentum * var[i];
                }

                self.cache = Some(Cache {
                    xhat: Tensor::from_vec(&shape, xhat),
                    inv_std,
                    group,
                });
                Tensor::from_vec(&shape, out)
            }
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let Cache {
            xhat,
            inv_std,
            group,
        } = self
            .cache
            .take()
            .expect("batchnorm backward requires a train-mode forward");
        let c = self.channels();
        let shape = xhat.shape().to_vec();
        assert_eq!(grad_out.shape(), &shape[..]);

        // Per-channel gradient sums. Accumulated in flat order so the beta
        // gradient is the exact elementwise mirror of a downstream
        // threshold gradient computed over the same positions.
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (i, (&g, &h)) in grad_out.data().iter().zip(xhat.data()).enumerate() {
            let ch = channel_of(&shape, i);
            sum_g[ch] += g;
            sum_gx[ch] += g * h;
        }
        for i in 0..c {
            self.gamma.grad.data_mut()[i] += sum_gx[i];
            self.beta.grad.data_mut()[i] += sum_g[i];
        }

        let gn = T::of_usize(group);
        let data = grad_out
            .data()
            .iter()
            .zip(xhat.data())
            .enumerate()
            .map(|(i, (&g, &h))| {
                let ch = channel_of(&shape, i);
                self.gamma.value.data()[ch]
                    * inv_std[ch]
                    * (g - sum_g[ch] / gn - h * sum_gx[ch] / gn)
            })
            .collect();
        Tensor::from_vec(&shape, data)
    }
}
