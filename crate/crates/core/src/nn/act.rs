//! Activation layers: threshold-shifted sign, generalized hardtanh,
//! LeakyReLU and PReLU.

use super::{channel_of, Mode, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary activation: -1 where the input is at or below the threshold,
/// +1 above it. Backward uses the hardtanh straight-through estimator
/// centered at the threshold: the incoming gradient passes where
/// `|x - th| <= ste_clip` and is zero elsewhere.
///
/// The threshold is a single shared value (tensor of one element) or a
/// per-channel vector along axis 1. When trainable, the threshold gradient
/// is the negated per-channel sum of the pass-through input gradient — the
/// exact mirror of the gradient a batch-norm bias would receive from the
/// same path.
pub struct SignAct<T: Scalar> {
    pub th: Param<T>,
    pub ste_clip: T,
    cache_x: Option<Tensor<T>>,
}

impl<T: Scalar> SignAct<T> {
    /// Shared fixed threshold.
    pub fn fixed(shift: T, ste_clip: T) -> Self {
        assert!(ste_clip > T::zero(), "ste_clip must be > 0");
        SignAct {
            th: Param::new(Tensor::full(&[1], shift), false),
            ste_clip,
            cache_x: None,
        }
    }

    /// Per-channel thresholds, all initialized to `shift`.
    pub fn per_channel(channels: usize, shift: T, ste_clip: T, trainable: bool) -> Self {
        assert!(ste_clip > T::zero(), "ste_clip must be > 0");
        SignAct {
            th: Param::new(Tensor::full(&[channels], shift), trainable),
            ste_clip,
            cache_x: None,
        }
    }

    #[inline]
    fn th_at(&self, x_shape: &[usize], flat: usize) -> T {
        let th = self.th.value.data();
        if th.len() == 1 {
            th[0]
        } else {
            th[channel_of(x_shape, flat)]
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if self.th.value.numel() > 1 {
            assert_eq!(
                x.shape()[1],
                self.th.value.numel(),
                "per-channel threshold length does not match input channels"
            );
        }
        let shape = x.shape().to_vec();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v <= self.th_at(&shape, i) {
                    -T::one()
                } else {
                    T::one()
                }
            })
            .collect();
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        Tensor::from_vec(&shape, data)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self.cache_x.take().expect("sign backward without forward");
        assert_eq!(x.shape(), grad_out.shape());
        let shape = x.shape().to_vec();
        let trainable = self.th.trainable;
        let mut grad_x = Vec::with_capacity(x.numel());
        {
            let th_grad = self.th.grad.data_mut();
            for (i, (&g, &v)) in grad_out.data().iter().zip(x.data()).enumerate() {
                let th = if th_grad.len() == 1 {
                    self.th.value.data()[0]
                } else {
                    self.th.value.data()[channel_of(&shape, i)]
                };
                let gx = if (v - th).abs() <= self.ste_clip {
                    g
                } else {
                    T::zero()
                };
                grad_x.push(gx);
                if trainable {
                    let c = if th_grad.len() == 1 {
                        0
                    } else {
                        channel_of(&shape, i)
                    };
                    th_grad[c] += -gx;
                }
            }
        }
        Tensor::from_vec(&shape, grad_x)
    }
}

/// Hardtanh shifted along both axes with an adjustable range:
/// `y = clamp(x - x_offset, -range, +range) + y_offset`.
///
/// The base hardtanh is `(0, 0, 1)`; `(3, 3, 3)` equals `clamp(x, 0, 6)`.
/// Backward passes the gradient where `-range < x - x_offset < range`.
pub struct GenHardtanh<T: Scalar> {
    pub x_offset: T,
    pub y_offset: T,
    pub range: T,
    cache_x: Option<Tensor<T>>,
}

impl<T: Scalar> GenHardtanh<T> {
    pub fn new(x_offset: T, y_offset: T, range: T) -> Self {
        assert!(range > T::zero(), "range must be > 0");
        GenHardtanh {
            x_offset,
            y_offset,
            range,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let s = v - self.x_offset;
                let clamped = if s < -self.range {
                    -self.range
                } else if s > self.range {
                    self.range
                } else {
                    s
                };
                clamped + self.y_offset
            })
            .collect();
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        Tensor::from_vec(x.shape(), data)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self
            .cache_x
            .take()
            .expect("gen_hardtanh backward without forward");
        let data = grad_out
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| {
                let s = v - self.x_offset;
                if s > -self.range && s < self.range {
                    g
                } else {
                    T::zero()
                }
            })
            .collect();
        Tensor::from_vec(x.shape(), data)
    }
}

/// `y = x` for positive inputs, `slope * x` otherwise. Slope 1 is the
/// identity.
pub struct LeakyRelu<T: Scalar> {
    pub slope: T,
    cache_x: Option<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: T) -> Self {
        LeakyRelu {
            slope,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { self.slope * v })
            .collect();
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        Tensor::from_vec(x.shape(), data)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self
            .cache_x
            .take()
            .expect("leaky_relu backward without forward");
        let data = grad_out
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| if v > T::zero() { g } else { self.slope * g })
            .collect();
        Tensor::from_vec(x.shape(), data)
    }
}

/// LeakyReLU with a trainable per-channel negative slope. The slope
/// gradient accumulates `g * x` over the negative-side elements of each
/// channel.
pub struct PRelu<T: Scalar> {
    pub slope: Param<T>,
    cache_x: Option<Tensor<T>>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(channels: usize, init_slope: T) -> Self {
        PRelu {
            slope: Param::new(Tensor::full(&[channels], init_slope), true),
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(x.shape()[1], self.slope.value.numel());
        let shape = x.shape().to_vec();
        let slopes = self.slope.value.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v > T::zero() {
                    v
                } else {
                    slopes[channel_of(&shape, i)] * v
                }
            })
            .collect();
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        Tensor::from_vec(&shape, data)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self.cache_x.take().expect("prelu backward without forward");
        let shape = x.shape().to_vec();
        let slopes = self.slope.value.data().to_vec();
        let slope_grad = self.slope.grad.data_mut();
        let data = grad_out
            .data()
            .iter()
            .zip(x.data())
            .enumerate()
            .map(|(i, (&g, &v))| {
                if v > T::zero() {
                    g
                } else {
                    let c = channel_of(&shape, i);
                    slope_grad[c] += g * v;
                    slopes[c] * g
                }
            })
            .collect();
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f32>) -> Tensor<f32> {
        let n = v.len();
        Tensor::from_vec(&[1, n], v)
    }

    #[test]
    fn sign_forward_boundary_is_minus_one() {
        let mut s = SignAct::fixed(0.0f32, 1.0);
        let y = s.forward(&t(vec![0.3, 0.0, -0.5]), Mode::Eval);
        assert_eq!(y.data(), &[1.0, -1.0, -1.0]);

        let mut s = SignAct::fixed(1.2f32, 1.0);
        let y = s.forward(&t(vec![1.2, -0.5, 1.3]), Mode::Eval);
        assert_eq!(y.data(), &[-1.0, -1.0, 1.0]);
    }

    #[test]
    fn sign_output_is_strictly_binary() {
        let mut s = SignAct::fixed(0.25f32, 1.0);
        let xs: Vec<f32> = (0..64).map(|i| (i as f32 - 32.0) * 0.1).collect();
        let y = s.forward(&t(xs), Mode::Eval);
        assert!(y.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn sign_backward_window_and_threshold_grad() {
        let mut s = SignAct::per_channel(3, 0.0f32, 1.0, true);
        // x = [0.5, 2.5, 2.0] with th = [0, 0, 1.2]
        s.th.value.data_mut()[2] = 1.2;
        let x = t(vec![0.5, 2.5, 2.0]);
        s.forward(&x, Mode::Train);
        let gx = s.backward(&t(vec![1.0, 1.0, 1.0]));
        assert_eq!(gx.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(s.th.grad.data(), &[-1.0, 0.0, -1.0]);
    }

    #[test]
    fn gen_hardtanh_examples() {
        let mut g = GenHardtanh::new(0.0f32, 0.0, 1.0);
        assert_eq!(g.forward(&t(vec![0.0]), Mode::Eval).data(), &[0.0]);
        let mut g = GenHardtanh::new(3.0f32, 3.0, 3.0);
        assert_eq!(g.forward(&t(vec![7.0]), Mode::Eval).data(), &[6.0]);
        let mut g = GenHardtanh::new(0.0f32, 0.5, 1.0);
        assert_eq!(g.forward(&t(vec![-2.0]), Mode::Eval).data(), &[-0.5]);
    }

    #[test]
    fn gen_hardtanh_relu6_equivalence() {
        let mut g = GenHardtanh::new(3.0f32, 3.0, 3.0);
        let xs: Vec<f32> = (-100..100).map(|i| i as f32 * 0.1).collect();
        let y = g.forward(&t(xs.clone()), Mode::Eval);
        for (x, &v) in xs.iter().zip(y.data()) {
            // (x - 3) + 3 can differ from x by an ulp inside the pass band.
            assert!((v - x.clamp(0.0, 6.0)).abs() <= 1e-6, "{x}: {v}");
        }
    }

    #[test]
    fn leaky_relu_values_and_identity_slope() {
        let mut l = LeakyRelu::new(0.25f32);
        let y = l.forward(&t(vec![-2.0, 3.0]), Mode::Eval);
        assert_eq!(y.data(), &[-0.5, 3.0]);
        let mut ident = LeakyRelu::new(1.0f32);
        let y = ident.forward(&t(vec![-2.0, 3.0]), Mode::Eval);
        assert_eq!(y.data(), &[-2.0, 3.0]);
    }

    #[test]
    fn prelu_slope_gradient_from_negative_side() {
        let mut p = PRelu::new(2, 0.5f32);
        let x = Tensor::from_vec(&[1, 2], vec![-2.0, 3.0]);
        let y = p.forward(&x, Mode::Train);
        assert_eq!(y.data(), &[-1.0, 3.0]);
        let gx = p.backward(&Tensor::from_vec(&[1, 2], vec![1.0, 1.0]));
        assert_eq!(gx.data(), &[0.5, 1.0]);
        assert_eq!(p.slope.grad.data(), &[-2.0, 0.0]);
    }
}
