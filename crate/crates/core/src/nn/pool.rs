//! Spatial pooling and shape plumbing layers.

use super::Mode;
use crate::nn::conv::dims4;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn assert_even_dims(h: usize, w: usize) {
    assert!(
        h.is_multiple_of(2) && w.is_multiple_of(2),
        "refusing 2x2 pooling on odd spatial dims {h}x{w}"
    );
}

/// 2x2/stride-2 max pooling over `[N, C, H, W]`; forward-only path shared
/// with the packed runtime. Ties go to the first element in window scan
/// order (top-left, top-right, bottom-left, bottom-right).
pub fn maxpool2_plain<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = dims4(x.shape());
    assert_even_dims(h, w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + (2 * oy) * w + 2 * ox;
                let idx = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::from_vec(&[n, c, oh, ow], out), argmax)
}

/// 2x2/stride-2 average pooling, forward-only path.
pub fn avgpool2_plain<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    assert_even_dims(h, w);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of_f64(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + (2 * oy) * w + 2 * ox;
                out.push((xd[i00] + xd[i00 + 1] + xd[i00 + w] + xd[i00 + w + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub struct MaxPool2<T: Scalar> {
    cache: Option<(Vec<usize>, Vec<usize>)>, // (argmax, input shape)
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for MaxPool2<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> MaxPool2<T> {
    pub fn new() -> Self {
        MaxPool2 {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (out, argmax) = maxpool2_plain(x);
        if mode == Mode::Train {
            self.cache = Some((argmax, x.shape().to_vec()));
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let (argmax, in_shape) = self.cache.take().expect("maxpool backward without forward");
        let mut gx = vec![T::zero(); in_shape.iter().product()];
        for (&g, &i) in grad_out.data().iter().zip(&argmax) {
            gx[i] += g;
        }
        Tensor::from_vec(&in_shape, gx)
    }
}

pub struct AvgPool2<T: Scalar> {
    in_shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for AvgPool2<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AvgPool2<T> {
    pub fn new() -> Self {
        AvgPool2 {
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.in_shape = Some(x.shape().to_vec());
        }
        avgpool2_plain(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let in_shape = self
            .in_shape
            .take()
            .expect("avgpool backward without forward");
        let (_, _, h, w) = dims4(&in_shape);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of_f64(0.25);
        let mut gx = vec![T::zero(); in_shape.iter().product()];
        let g = grad_out.data();
        let nc = in_shape[0] * in_shape[1];
        for j in 0..nc {
            let base = j * h * w;
            let gbase = j * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let share = g[gbase + oy * ow + ox] * quarter;
                    let i00 = base + (2 * oy) * w + 2 * ox;
                    gx[i00] += share;
                    gx[i00 + 1] += share;
                    gx[i00 + w] += share;
                    gx[i00 + w + 1] += share;
                }
            }
        }
        Tensor::from_vec(&in_shape, gx)
    }
}

/// Mean over all spatial positions: `[N, C, H, W] -> [N, C]`.
pub fn global_avgpool_plain<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let inv = T::one() / T::of_usize(h * w);
    let mut out = Vec::with_capacity(n * c);
    for chunk in x.data().chunks_exact(h * w) {
        let mut acc = T::zero();
        for &v in chunk {
            acc += v;
        }
        out.push(acc * inv);
    }
    Tensor::from_vec(&[n, c], out)
}

pub struct GlobalAvgPool<T: Scalar> {
    in_shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for GlobalAvgPool<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GlobalAvgPool<T> {
    pub fn new() -> Self {
        GlobalAvgPool {
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.in_shape = Some(x.shape().to_vec());
        }
        global_avgpool_plain(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let in_shape = self
            .in_shape
            .take()
            .expect("global avgpool backward without forward");
        let (_, _, h, w) = dims4(&in_shape);
        let inv = T::one() / T::of_usize(h * w);
        let mut gx = Vec::with_capacity(in_shape.iter().product());
        for &g in grad_out.data() {
            let share = g * inv;
            gx.extend(std::iter::repeat_n(share, h * w));
        }
        Tensor::from_vec(&in_shape, gx)
    }
}

/// Zero-pads the spatial border, e.g. 28x28 inputs up to 32x32.
pub fn zeropad2_plain<T: Scalar>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        for y in 0..h {
            let src = nc * h * w + y * w;
            let dst = nc * oh * ow + (y + pad) * ow + pad;
            out[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub struct ZeroPad2<T: Scalar> {
    pub pad: usize,
    in_shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> ZeroPad2<T> {
    pub fn new(pad: usize) -> Self {
        ZeroPad2 {
            pad,
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.in_shape = Some(x.shape().to_vec());
        }
        zeropad2_plain(x, self.pad)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let in_shape = self
            .in_shape
            .take()
            .expect("zeropad backward without forward");
        let (n, c, h, w) = dims4(&in_shape);
        let ow = w + 2 * self.pad;
        let oh = h + 2 * self.pad;
        let mut gx = Vec::with_capacity(n * c * h * w);
        for nc in 0..n * c {
            for y in 0..h {
                let src = nc * oh * ow + (y + self.pad) * ow + self.pad;
                gx.extend_from_slice(&grad_out.data()[src..src + w]);
            }
        }
        Tensor::from_vec(&in_shape, gx)
    }
}

/// `[N, ...] -> [N, prod(...)]`.
pub struct Flatten<T: Scalar> {
    in_shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for Flatten<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Flatten<T> {
    pub fn new() -> Self {
        Flatten {
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.in_shape = Some(x.shape().to_vec());
        }
        let n = x.shape()[0];
        x.reshape(&[n, x.numel() / n]).expect("flatten reshape")
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let in_shape = self
            .in_shape
            .take()
            .expect("flatten backward without forward");
        grad_out
            .reshape(&in_shape)
            .expect("flatten backward reshape")
    }
}
