//! Optimizers and the learning-rate schedule.

use crate::nn::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// Bias-corrected Adam. State tensors are allocated lazily on the first
/// step to match the parameter list; gradients are zeroed after each
/// update. The update is odd in the gradients: negating every gradient at
/// every step negates the whole parameter trajectory exactly (for
/// parameters initialized to zero), because the first moment and the
/// update negate elementwise while the second moment is unchanged.
pub struct Adam<T: Scalar> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam {
            beta1: T::of_f64(0.9),
            beta2: T::of_f64(0.999),
            eps: T::of_f64(1e-8),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: T) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            self.v = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer/param list mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
    }
}

/// Heavy-ball SGD: `v = momentum * v + g`, `w -= lr * v`.
pub struct SgdMomentum<T: Scalar> {
    pub momentum: T,
    vel: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum: T::of_f64(momentum),
            vel: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: T) {
        if self.vel.is_empty() {
            self.vel = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
        }
        assert_eq!(
            self.vel.len(),
            params.len(),
            "optimizer/param list mismatch"
        );
        for (i, p) in params.iter_mut().enumerate() {
            let v = self.vel[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                v[j] = self.momentum * v[j] + g[j];
                w[j] -= lr * v[j];
            }
            p.zero_grad();
        }
    }
}

pub enum Optimizer<T: Scalar> {
    Adam(Adam<T>),
    Sgd(SgdMomentum<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new()),
            OptimizerKind::SgdMomentum => Optimizer::Sgd(SgdMomentum::new(momentum)),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: T) {
        match self {
            Optimizer::Adam(o) => o.step(params, lr),
            Optimizer::Sgd(o) => o.step(params, lr),
        }
    }
}

/// Learning rate for `epoch` (0-based): a linear per-epoch ramp
/// `base_lr * (epoch + 1) / warmup_epochs` over the warmup, then cosine
/// annealing `base_lr * 0.5 * (1 + cos(pi * progress))` where progress
/// spans the post-warmup epochs. With `warmup_epochs = 0` the schedule is
/// pure cosine from the first epoch. Continuous at the junction: the last
/// warmup epoch and the first cosine epoch both evaluate to `base_lr`.
pub fn lr_at(epoch: usize, total_epochs: usize, base_lr: f64, warmup_epochs: usize) -> f64 {
    assert!(
        epoch < total_epochs,
        "epoch {epoch} >= total {total_epochs}"
    );
    if epoch < warmup_epochs {
        return base_lr * (epoch + 1) as f64 / warmup_epochs as f64;
    }
    let post = total_epochs - warmup_epochs;
    if post <= 1 {
        return base_lr;
    }
    let progress = (epoch - warmup_epochs) as f64 / (post - 1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_param(n: usize, init: f32) -> Param<f32> {
        Param::new(Tensor::full(&[n], init), true)
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = make_param(4, 1.5);
        let mut opt = Adam::new();
        opt.step(&mut [&mut p], 0.01);
        assert!(p.value.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn adam_first_step_is_signlike() {
        // With bias correction, m_hat/sqrt(v_hat) == g/|g| on step one, so
        // the update is -lr * g / (|g| + tiny).
        let mut p = make_param(3, 0.0);
        p.grad.data_mut().copy_from_slice(&[3.0, -0.2, 0.0]);
        let mut opt = Adam::new();
        opt.step(&mut [&mut p], 0.01);
        let w = p.value.data();
        assert!((w[0] + 0.01).abs() < 1e-6, "{w:?}");
        assert!((w[1] - 0.01).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
        // grads zeroed after the step
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_odd_symmetry_exact() {
        let mut rng = crate::rng::Rng::new(17);
        let mut a = make_param(8, 0.0);
        let mut b = make_param(8, 0.0);
        let mut oa = Adam::new();
        let mut ob = Adam::new();
        for _ in 0..25 {
            let g: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
            a.grad.data_mut().copy_from_slice(&g);
            let neg: Vec<f32> = g.iter().map(|v| -v).collect();
            b.grad.data_mut().copy_from_slice(&neg);
            oa.step(&mut [&mut a], 0.003);
            ob.step(&mut [&mut b], 0.003);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), (-y).to_bits(), "trajectories must mirror");
            }
        }
    }

    #[test]
    fn sgd_zero_momentum_is_plain_descent() {
        let mut p = make_param(2, 1.0);
        p.grad.data_mut().copy_from_slice(&[0.5, -0.5]);
        let mut opt = SgdMomentum::new(0.0);
        opt.step(&mut [&mut p], 0.1);
        assert_eq!(p.value.data(), &[0.95, 1.05]);
    }

    #[test]
    fn sgd_velocity_approaches_geometric_limit() {
        let mut p = make_param(1, 0.0);
        let mut opt = SgdMomentum::new(0.9f64);
        let mut prev = 0.0f32;
        let mut vel_estimate = 0.0f32;
        for _ in 0..200 {
            p.grad.data_mut()[0] = 1.0;
            opt.step(&mut [&mut p], 1.0);
            vel_estimate = prev - p.value.data()[0];
            prev = p.value.data()[0];
        }
        // v -> g / (1 - momentum) = 10
        assert!((vel_estimate - 10.0).abs() < 0.05, "{vel_estimate}");
    }

    #[test]
    fn sgd_moves_on_zero_grad_with_velocity() {
        let mut p = make_param(1, 0.0);
        let mut opt = SgdMomentum::new(0.9f64);
        p.grad.data_mut()[0] = 1.0;
        opt.step(&mut [&mut p], 0.1);
        let after_first = p.value.data()[0];
        // zero gradient, but velocity carries the parameter further
        opt.step(&mut [&mut p], 0.1);
        assert!(p.value.data()[0] < after_first);
    }

    #[test]
    fn lr_schedule_shape() {
        // ramp: (epoch+1)/warmup of base
        assert!((lr_at(0, 100, 0.01, 5) - 0.002).abs() < 1e-12);
        assert!((lr_at(4, 100, 0.01, 5) - 0.01).abs() < 1e-12);
        // cosine start at base right after warmup
        assert!((lr_at(5, 100, 0.01, 5) - 0.01).abs() < 1e-12);
        // final epoch lands at the cosine tail
        assert!(lr_at(99, 100, 0.01, 5) < 1e-9);
        // no warmup
        assert!((lr_at(0, 30, 0.01, 0) - 0.01).abs() < 1e-12);
        assert!(lr_at(29, 30, 0.01, 0) < 1e-9);
    }

    #[test]
    fn lr_continuous_at_junction() {
        let base = 0.01;
        let before = lr_at(4, 50, base, 5);
        let at = lr_at(5, 50, base, 5);
        assert!((before - at).abs() <= base * 0.03, "{before} vs {at}");
    }
}
