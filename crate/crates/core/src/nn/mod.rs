//! Layers with hand-derived backward passes, composed into a [`Model`].
//!
//! There is no general autodiff: each layer caches what its backward pass
//! needs during a train-mode forward, and `Model::backward` walks the layer
//! list in reverse. A model instance is single-threaded during a training
//! step; distinct instances may train concurrently.

pub mod act;
pub mod batchnorm;
pub mod binarize;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;

use serde::{Deserialize, Serialize};

pub use act::{GenHardtanh, LeakyRelu, PRelu, SignAct};
pub use batchnorm::BatchNorm;
pub use binarize::binarize_weights;
pub use conv::Conv2d;
pub use dense::Linear;
pub use loss::{argmax_rows, softmax_xent};
pub use pool::{AvgPool2, Flatten, GlobalAvgPool, MaxPool2, ZeroPad2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor paired with its gradient accumulator. Gradients are
/// zeroed at the start of each optimizer step cycle (the optimizer zeroes
/// them after applying an update).
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_with(T::zero());
    }
}

/// Channel index (axis 1) of a flat element position.
#[inline]
pub(crate) fn channel_of(shape: &[usize], flat: usize) -> usize {
    let spatial: usize = shape[2..].iter().product();
    (flat / spatial) % shape[1]
}

/// Receives every binary activation during an observed forward pass.
pub trait SignObserver<T: Scalar> {
    fn observe(&mut self, layer: &str, input: &Tensor<T>, output: &Tensor<T>);
}

struct NoopObserver;
impl<T: Scalar> SignObserver<T> for NoopObserver {
    fn observe(&mut self, _: &str, _: &Tensor<T>, _: &Tensor<T>) {}
}

/// Fraction of +1 outputs per binary activation layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BalanceStat {
    pub layer: String,
    pub fraction_plus_one: f64,
}

/// Observer collecting the +1 fraction of every binary activation.
#[derive(Default)]
pub struct BalanceProbe {
    pub stats: Vec<BalanceStat>,
}

impl<T: Scalar> SignObserver<T> for BalanceProbe {
    fn observe(&mut self, layer: &str, _input: &Tensor<T>, output: &Tensor<T>) {
        let plus = output.data().iter().filter(|&&v| v > T::zero()).count();
        self.stats.push(BalanceStat {
            layer: layer.to_string(),
            fraction_plus_one: plus as f64 / output.numel() as f64,
        });
    }
}

/// Parameter-free shortcut for downsampling residual blocks: 2x2 average
/// pooling followed by zero-padding the channel axis up to `out_channels`.
pub struct AvgPoolChannelPad {
    pub out_channels: usize,
}

impl AvgPoolChannelPad {
    fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let pooled = pool::avgpool2_plain(x);
        let (n, c, h, w) = conv::dims4(pooled.shape());
        assert!(c <= self.out_channels);
        let mut out = vec![T::zero(); n * self.out_channels * h * w];
        for s in 0..n {
            let src = s * c * h * w;
            let dst = s * self.out_channels * h * w;
            out[dst..dst + c * h * w].copy_from_slice(&pooled.data()[src..src + c * h * w]);
        }
        Tensor::from_vec(&[n, self.out_channels, h, w], out)
    }

    fn backward<T: Scalar>(&self, grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
        let (n, c, h, w) = conv::dims4(in_shape);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of_f64(0.25);
        let g = grad_out.data();
        let mut gx = vec![T::zero(); n * c * h * w];
        for s in 0..n {
            for ci in 0..c {
                let gbase = (s * self.out_channels + ci) * oh * ow;
                let base = (s * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let share = g[gbase + oy * ow + ox] * quarter;
                        let i00 = base + 2 * oy * w + 2 * ox;
                        gx[i00] += share;
                        gx[i00 + 1] += share;
                        gx[i00 + w] += share;
                        gx[i00 + w + 1] += share;
                    }
                }
            }
        }
        Tensor::from_vec(in_shape, gx)
    }
}

/// Residual block: the body output is added to a shortcut of the block
/// input (identity, or avg-pool + channel pad when downsampling), followed
/// by an optional post-sum activation.
pub struct ResidualBlock<T: Scalar> {
    pub body: Vec<Layer<T>>,
    pub downsample: Option<AvgPoolChannelPad>,
    pub post: Option<Box<Layer<T>>>,
    cache_in_shape: Option<Vec<usize>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(
        body: Vec<Layer<T>>,
        downsample: Option<AvgPoolChannelPad>,
        post: Option<Layer<T>>,
    ) -> Self {
        ResidualBlock {
            body,
            downsample,
            post: post.map(Box::new),
            cache_in_shape: None,
        }
    }

    fn forward(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        path: &str,
        obs: &mut dyn SignObserver<T>,
    ) -> Tensor<T> {
        if mode == Mode::Train {
            self.cache_in_shape = Some(x.shape().to_vec());
        }
        let mut h = x.clone();
        for (i, layer) in self.body.iter_mut().enumerate() {
            let name = format!("{path}.b{i:02}");
            h = layer.forward(&h, mode, &name, obs);
        }
        let shortcut = match &self.downsample {
            Some(ds) => ds.forward(x),
            None => x.clone(),
        };
        assert_eq!(
            h.shape(),
            shortcut.shape(),
            "residual body and shortcut shapes diverge"
        );
        h.add_assign(&shortcut);
        if let Some(post) = &mut self.post {
            let name = format!("{path}.post");
            h = post.forward(&h, mode, &name, obs);
        }
        h
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let in_shape = self
            .cache_in_shape
            .take()
            .expect("residual backward without forward");
        let g_sum = match &mut self.post {
            Some(post) => post.backward(grad_out),
            None => grad_out.clone(),
        };
        let mut g = g_sum.clone();
        for layer in self.body.iter_mut().rev() {
            g = layer.backward(&g);
        }
        let g_short = match &self.downsample {
            Some(ds) => ds.backward(&g_sum, &in_shape),
            None => g_sum,
        };
        g.add_assign(&g_short);
        g
    }
}

pub enum Layer<T: Scalar> {
    Linear(Linear<T>),
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Sign(SignAct<T>),
    GenHardtanh(GenHardtanh<T>),
    LeakyRelu(LeakyRelu<T>),
    PRelu(PRelu<T>),
    MaxPool2(MaxPool2<T>),
    AvgPool2(AvgPool2<T>),
    GlobalAvgPool(GlobalAvgPool<T>),
    ZeroPad2(ZeroPad2<T>),
    Flatten(Flatten<T>),
    Residual(ResidualBlock<T>),
}

impl<T: Scalar> Layer<T> {
    fn forward(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        path: &str,
        obs: &mut dyn SignObserver<T>,
    ) -> Tensor<T> {
        match self {
            Layer::Linear(l) => l.forward(x, mode),
            Layer::Conv2d(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Sign(l) => {
                let y = l.forward(x, mode);
                obs.observe(path, x, &y);
                y
            }
            Layer::GenHardtanh(l) => l.forward(x, mode),
            Layer::LeakyRelu(l) => l.forward(x, mode),
            Layer::PRelu(l) => l.forward(x, mode),
            Layer::MaxPool2(l) => l.forward(x, mode),
            Layer::AvgPool2(l) => l.forward(x, mode),
            Layer::GlobalAvgPool(l) => l.forward(x, mode),
            Layer::ZeroPad2(l) => l.forward(x, mode),
            Layer::Flatten(l) => l.forward(x, mode),
            Layer::Residual(l) => l.forward(x, mode, path, obs),
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Linear(l) => l.backward(g),
            Layer::Conv2d(l) => l.backward(g),
            Layer::BatchNorm(l) => l.backward(g),
            Layer::Sign(l) => l.backward(g),
            Layer::GenHardtanh(l) => l.backward(g),
            Layer::LeakyRelu(l) => l.backward(g),
            Layer::PRelu(l) => l.backward(g),
            Layer::MaxPool2(l) => l.backward(g),
            Layer::AvgPool2(l) => l.backward(g),
            Layer::GlobalAvgPool(l) => l.backward(g),
            Layer::ZeroPad2(l) => l.backward(g),
            Layer::Flatten(l) => l.backward(g),
            Layer::Residual(l) => l.backward(g),
        }
    }
}

/// An ordered stack of layers.
pub struct Model<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Model { layers }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        self.forward_observed(x, mode, &mut NoopObserver)
    }

    pub fn forward_observed(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        obs: &mut dyn SignObserver<T>,
    ) -> Tensor<T> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = format!("l{i:02}");
            h = layer.forward(&h, mode, &name, obs);
        }
        h
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    /// Trainable parameters in a stable traversal order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        collect_params(&mut self.layers, &mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Total trainable parameter elements.
    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.numel()).sum()
    }

    /// Every persistent tensor (weights, batch-norm affine and running
    /// statistics, activation thresholds, PReLU slopes) with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        visit_named(&self.layers, "", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        visit_named_mut(&mut self.layers, "", &mut out);
        out
    }

    /// Folds every binary-activation threshold into the bias of the
    /// immediately preceding batch-norm layer (`beta' = beta - th`,
    /// `th' = 0`), which leaves all binary activations bitwise unchanged.
    /// Returns the number of folded activations; refuses when a sign layer
    /// is not directly preceded by a batch-norm layer.
    pub fn fold_thresholds(&mut self) -> Result<usize> {
        fold_seq(&mut self.layers, "")
    }

    /// Adjacent (batch-norm, sign) pairs; used to report per-channel
    /// `(beta, th)` values and effective thresholds `th - beta`.
    pub fn bn_sign_pairs(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        visit_pairs(&self.layers, "", &mut out);
        out
    }

    /// Panics unless, for every adjacent (batch-norm, trainable sign) pair,
    /// the accumulated threshold gradient is the exact bitwise negation of
    /// the bias gradient. Called by the training loop in debug builds.
    pub fn assert_threshold_bias_mirror(&self) {
        assert_mirror_seq(&self.layers);
    }
}

fn assert_mirror_seq<T: Scalar>(layers: &[Layer<T>]) {
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Sign(sign) if sign.th.trainable && i > 0 => {
                if let Layer::BatchNorm(bn) = &layers[i - 1] {
                    for (&gt, &gb) in sign.th.grad.data().iter().zip(bn.beta.grad.data()) {
                        assert!(
                            gt == -gb,
                            "threshold/bias gradient mirror violated: {gt} vs {gb}"
                        );
                    }
                }
            }
            Layer::Residual(r) => assert_mirror_seq(&r.body),
            _ => {}
        }
    }
}

fn collect_params<'a, T: Scalar>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut Param<T>>) {
    for layer in layers {
        match layer {
            Layer::Linear(l) => out.push(&mut l.w),
            Layer::Conv2d(l) => out.push(&mut l.w),
            Layer::BatchNorm(l) => {
                out.push(&mut l.gamma);
                out.push(&mut l.beta);
            }
            Layer::Sign(l) => {
                if l.th.trainable {
                    out.push(&mut l.th);
                }
            }
            Layer::PRelu(l) => out.push(&mut l.slope),
            Layer::Residual(r) => {
                collect_params(&mut r.body, out);
                if let Some(post) = &mut r.post {
                    collect_params(std::slice::from_mut(post.as_mut()), out);
                }
            }
            _ => {}
        }
    }
}

fn visit_named<'a, T: Scalar>(
    layers: &'a [Layer<T>],
    prefix: &str,
    out: &mut Vec<(String, &'a Tensor<T>)>,
) {
    for (i, layer) in layers.iter().enumerate() {
        let base = format!("{prefix}l{i:02}");
        match layer {
            Layer::Linear(l) => out.push((format!("{base}.fc.w"), &l.w.value)),
            Layer::Conv2d(l) => out.push((format!("{base}.conv.w"), &l.w.value)),
            Layer::BatchNorm(l) => {
                out.push((format!("{base}.bn.gamma"), &l.gamma.value));
                out.push((format!("{base}.bn.beta"), &l.beta.value));
                out.push((format!("{base}.bn.running_mean"), &l.running_mean));
                out.push((format!("{base}.bn.running_var"), &l.running_var));
            }
            Layer::Sign(l) => out.push((format!("{base}.sign.th"), &l.th.value)),
            Layer::PRelu(l) => out.push((format!("{base}.prelu.slope"), &l.slope.value)),
            Layer::Residual(r) => {
                visit_named(&r.body, &format!("{base}.b."), out);
                if let Some(post) = &r.post {
                    visit_named(
                        std::slice::from_ref(post.as_ref()),
                        &format!("{base}.post."),
                        out,
                    );
                }
            }
            _ => {}
        }
    }
}

fn visit_named_mut<'a, T: Scalar>(
    layers: &'a mut [Layer<T>],
    prefix: &str,
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
) {
    for (i, layer) in layers.iter_mut().enumerate() {
        let base = format!("{prefix}l{i:02}");
        match layer {
            Layer::Linear(l) => out.push((format!("{base}.fc.w"), &mut l.w.value)),
            Layer::Conv2d(l) => out.push((format!("{base}.conv.w"), &mut l.w.value)),
            Layer::BatchNorm(l) => {
                out.push((format!("{base}.bn.gamma"), &mut l.gamma.value));
                out.push((format!("{base}.bn.beta"), &mut l.beta.value));
                out.push((format!("{base}.bn.running_mean"), &mut l.running_mean));
                out.push((format!("{base}.bn.running_var"), &mut l.running_var));
            }
            Layer::Sign(l) => out.push((format!("{base}.sign.th"), &mut l.th.value)),
            Layer::PRelu(l) => out.push((format!("{base}.prelu.slope"), &mut l.slope.value)),
            Layer::Residual(r) => {
                visit_named_mut(&mut r.body, &format!("{base}.b."), out);
                if let Some(post) = &mut r.post {
                    visit_named_mut(
                        std::slice::from_mut(post.as_mut()),
                        &format!("{base}.post."),
                        out,
                    );
                }
            }
            _ => {}
        }
    }
}

fn fold_seq<T: Scalar>(layers: &mut [Layer<T>], prefix: &str) -> Result<usize> {
    let mut count = 0;
    for i in 0..layers.len() {
        let name = format!("{prefix}l{i:02}");
        match &layers[i] {
            Layer::Sign(_) => {
                if i == 0 || !matches!(layers[i - 1], Layer::BatchNorm(_)) {
                    return Err(Error::Export(format!(
                        "binary activation {name}.sign is not directly preceded by a batch-norm layer"
                    )));
                }
                let (head, tail) = layers.split_at_mut(i);
                let (Layer::BatchNorm(bn), Layer::Sign(sign)) = (&mut head[i - 1], &mut tail[0])
                else {
                    unreachable!()
                };
                let th = sign.th.value.data().to_vec();
                let beta = bn.beta.value.data_mut();
                if th.len() == 1 {
                    for b in beta.iter_mut() {
                        *b -= th[0];
                    }
                } else {
                    assert_eq!(
                        th.len(),
                        beta.len(),
                        "{name}: threshold/bias channel mismatch"
                    );
                    for (b, t) in beta.iter_mut().zip(&th) {
                        *b -= *t;
                    }
                }
                sign.th.value.fill_with(T::zero());
                count += 1;
            }
            Layer::Residual(_) => {
                let Layer::Residual(r) = &mut layers[i] else {
                    unreachable!()
                };
                count += fold_seq(&mut r.body, &format!("{name}.b."))?;
                if let Some(post) = &mut r.post {
                    count += fold_seq(
                        std::slice::from_mut(post.as_mut()),
                        &format!("{name}.post."),
                    )?;
                }
            }
            _ => {}
        }
    }
    Ok(count)
}

fn visit_pairs<T: Scalar>(
    layers: &[Layer<T>],
    prefix: &str,
    out: &mut Vec<(String, Vec<f64>, Vec<f64>)>,
) {
    for (i, layer) in layers.iter().enumerate() {
        let name = format!("{prefix}l{i:02}");
        match layer {
            Layer::Sign(sign) if i > 0 => {
                if let Layer::BatchNorm(bn) = &layers[i - 1] {
                    let beta: Vec<f64> = bn.beta.value.data().iter().map(|v| v.as_f64()).collect();
                    let th_raw = sign.th.value.data();
                    let th: Vec<f64> = if th_raw.len() == 1 {
                        vec![th_raw[0].as_f64(); beta.len()]
                    } else {
                        th_raw.iter().map(|v| v.as_f64()).collect()
                    };
                    out.push((name, beta, th));
                }
            }
            Layer::Residual(r) => {
                visit_pairs(&r.body, &format!("{name}.b."), out);
            }
            _ => {}
        }
    }
}
