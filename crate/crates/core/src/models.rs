//! Architecture builders with configurable precision, activation, pooling
//! and binarization settings.

use crate::error::{Error, Result};
use crate::nn::{
    AvgPool2, AvgPoolChannelPad, BatchNorm, Conv2d, Flatten, GenHardtanh, GlobalAvgPool, Layer,
    LeakyRelu, Linear, MaxPool2, Model, PRelu, ResidualBlock, SignAct, ZeroPad2,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp2,
    Lenet5,
    VggSmall,
    Resnet20ds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Real weights and real activations.
    Fp,
    /// Binary weights, real-valued activation function.
    BinaryWeight,
    /// Binary weights and binary (sign) activations.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignActConfig {
    /// Fixed threshold, and the initialization point when trainable.
    pub threshold_shift: f64,
    pub trainable: bool,
    pub per_channel: bool,
    /// Half-width of the straight-through pass band.
    pub ste_clip: f64,
}

impl Default for SignActConfig {
    fn default() -> Self {
        SignActConfig {
            threshold_shift: 0.0,
            trainable: false,
            per_channel: false,
            ste_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenHardtanhConfig {
    pub x_offset: f64,
    pub y_offset: f64,
    pub range: f64,
}

impl Default for GenHardtanhConfig {
    fn default() -> Self {
        GenHardtanhConfig {
            x_offset: 0.0,
            y_offset: 0.0,
            range: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sign(SignActConfig),
    GenHardtanh(GenHardtanhConfig),
    Relu6,
}

impl Activation {
    /// The x-axis shift of whichever activation is configured; sweeps vary
    /// this one knob for both binary and real models.
    pub fn with_shift(self, shift: f64) -> Activation {
        match self {
            Activation::Sign(mut c) => {
                c.threshold_shift = shift;
                Activation::Sign(c)
            }
            Activation::GenHardtanh(mut c) => {
                c.x_offset = shift;
                Activation::GenHardtanh(c)
            }
            Activation::Relu6 => Activation::Relu6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtraAct {
    None,
    PRelu { init_slope: f64 },
    Leaky { slope: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub precision: Precision,
    pub activation: Activation,
    pub pooling: Pooling,
    pub extra_act: ExtraAct,
    pub binarize_first_last: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extra_act != ExtraAct::None && self.arch != Arch::Resnet20ds {
            return Err(Error::Config(
                "extra_act is only valid for the resnet20ds architecture".into(),
            ));
        }
        match self.activation {
            Activation::Sign(c) => {
                if c.ste_clip <= 0.0 {
                    return Err(Error::Config("ste_clip must be > 0".into()));
                }
                if c.trainable && !c.per_channel {
                    return Err(Error::Config(
                        "trainable thresholds require per_channel thresholds".into(),
                    ));
                }
            }
            Activation::GenHardtanh(c) => {
                if c.range <= 0.0 {
                    return Err(Error::Config("gen_hardtanh range must be > 0".into()));
                }
                if self.precision == Precision::Binary {
                    return Err(Error::Config(
                        "binary precision requires the sign activation".into(),
                    ));
                }
            }
            Activation::Relu6 => {
                if self.precision == Precision::Binary {
                    return Err(Error::Config(
                        "binary precision requires the sign activation".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Tracks weight-layer ordinals so the first and last stay real-valued
/// unless binarization of both is requested.
struct BuildCtx {
    rng: Rng,
    weight_idx: usize,
    weight_total: usize,
    weights_binary: bool,
    binarize_first_last: bool,
}

impl BuildCtx {
    fn next_binary(&mut self) -> bool {
        let i = self.weight_idx;
        self.weight_idx += 1;
        if !self.weights_binary {
            return false;
        }
        if self.binarize_first_last {
            return true;
        }
        i != 0 && i != self.weight_total - 1
    }
}

fn xavier<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::xavier_from(shape, rng).expect("weight shape")
}

fn conv<T: Scalar>(
    ctx: &mut BuildCtx,
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Layer<T> {
    let binary = ctx.next_binary();
    Layer::Conv2d(Conv2d::new(
        xavier(&[out_c, in_c, k, k], &mut ctx.rng),
        stride,
        pad,
        binary,
    ))
}

fn fc<T: Scalar>(ctx: &mut BuildCtx, out_f: usize, in_f: usize) -> Layer<T> {
    let binary = ctx.next_binary();
    Layer::Linear(Linear::new(xavier(&[out_f, in_f], &mut ctx.rng), binary))
}

fn act_layer<T: Scalar>(activation: &Activation, channels: usize) -> Layer<T> {
    match activation {
        Activation::Sign(c) => {
            let shift = T::of_f64(c.threshold_shift);
            let clip = T::of_f64(c.ste_clip);
            if c.per_channel {
                Layer::Sign(SignAct::per_channel(channels, shift, clip, c.trainable))
            } else {
                Layer::Sign(SignAct::fixed(shift, clip))
            }
        }
        Activation::GenHardtanh(c) => Layer::GenHardtanh(GenHardtanh::new(
            T::of_f64(c.x_offset),
            T::of_f64(c.y_offset),
            T::of_f64(c.range),
        )),
        Activation::Relu6 => Layer::GenHardtanh(GenHardtanh::new(
            T::of_f64(3.0),
            T::of_f64(3.0),
            T::of_f64(3.0),
        )),
    }
}

fn pool_layer<T: Scalar>(pooling: Pooling) -> Layer<T> {
    match pooling {
        Pooling::Max => Layer::MaxPool2(MaxPool2::new()),
        Pooling::Avg => Layer::AvgPool2(AvgPool2::new()),
    }
}

/// Builds a model for `spec`, deterministically in `seed`.
pub fn build<T: Scalar>(
    spec: &ModelSpec,
    input: InputDims,
    classes: usize,
    seed: u64,
) -> Result<Model<T>> {
    spec.validate()?;
    let weight_total = match spec.arch {
        Arch::Mlp2 => 2,
        Arch::Lenet5 => 5,
        Arch::VggSmall => 7,
        Arch::Resnet20ds => 20,
    };
    let mut ctx = BuildCtx {
        rng: Rng::new(seed),
        weight_idx: 0,
        weight_total,
        weights_binary: spec.precision != Precision::Fp,
        binarize_first_last: spec.binarize_first_last,
    };
    let act = &spec.activation;

    let layers: Vec<Layer<T>> = match spec.arch {
        Arch::Mlp2 => {
            let in_f = input.c * input.h * input.w;
            vec![
                Layer::Flatten(Flatten::new()),
                fc(&mut ctx, 512, in_f),
                Layer::BatchNorm(BatchNorm::new(512)),
                act_layer(act, 512),
                fc(&mut ctx, classes, 512),
                Layer::BatchNorm(BatchNorm::new(classes)),
            ]
        }
        Arch::Lenet5 => {
            // Classic topology: conv 6@5x5, pool, conv 16@5x5, pool,
            // FC 120, FC 84, FC classes; batch norm before every activation.
            let mut h = input.h - 4; // 5x5 valid conv
            let mut w = input.w - 4;
            let mut layers = vec![
                conv(&mut ctx, 6, input.c, 5, 1, 0),
                pool_layer(spec.pooling),
                Layer::BatchNorm(BatchNorm::new(6)),
                act_layer(act, 6),
            ];
            h /= 2;
            w /= 2;
            layers.push(conv(&mut ctx, 16, 6, 5, 1, 0));
            h -= 4;
            w -= 4;
            layers.push(pool_layer(spec.pooling));
            h /= 2;
            w /= 2;
            layers.extend([
                Layer::BatchNorm(BatchNorm::new(16)),
                act_layer(act, 16),
                Layer::Flatten(Flatten::new()),
                fc(&mut ctx, 120, 16 * h * w),
                Layer::BatchNorm(BatchNorm::new(120)),
                act_layer(act, 120),
                fc(&mut ctx, 84, 120),
                Layer::BatchNorm(BatchNorm::new(84)),
                act_layer(act, 84),
                fc(&mut ctx, classes, 84),
            ]);
            layers
        }
        Arch::VggSmall => {
            // Four 3x3 convolutions (64, 64, 128, 128), pooling after each
            // of the latter three, batch norm before every activation, then
            // FC 512, FC 512, FC classes. 28x28 inputs are zero-padded to
            // 32x32 so the three 2x2 poolings stay even.
            let mut layers = Vec::new();
            let (mut h, mut w) = (input.h, input.w);
            if (h, w) == (28, 28) {
                layers.push(Layer::ZeroPad2(ZeroPad2::new(2)));
                h = 32;
                w = 32;
            }
            if h % 8 != 0 || w % 8 != 0 {
                return Err(Error::Config(format!(
                    "vggsmall needs spatial dims divisible by 8, got {h}x{w}"
                )));
            }
            layers.push(conv(&mut ctx, 64, input.c, 3, 1, 1));
            layers.push(Layer::BatchNorm(BatchNorm::new(64)));
            layers.push(act_layer(act, 64));
            for (out_c, in_c) in [(64, 64), (128, 64), (128, 128)] {
                layers.push(conv(&mut ctx, out_c, in_c, 3, 1, 1));
                layers.push(pool_layer(spec.pooling));
                h /= 2;
                w /= 2;
                layers.push(Layer::BatchNorm(BatchNorm::new(out_c)));
                layers.push(act_layer(act, out_c));
            }
            layers.push(Layer::Flatten(Flatten::new()));
            layers.push(fc(&mut ctx, 512, 128 * h * w));
            layers.push(Layer::BatchNorm(BatchNorm::new(512)));
            layers.push(act_layer(act, 512));
            layers.push(fc(&mut ctx, 512, 512));
            layers.push(Layer::BatchNorm(BatchNorm::new(512)));
            layers.push(act_layer(act, 512));
            layers.push(fc(&mut ctx, classes, 512));
            layers
        }
        Arch::Resnet20ds => {
            // First conv, then 18 residual units each wrapping a single
            // (binary) convolution in its own shortcut, then the classifier.
            // Three stages of 6 units at 16/32/64 channels; the first unit
            // of stages two and three downsamples with stride 2 and a
            // parameter-free avg-pool + channel-pad shortcut.
            let mut layers = vec![
                conv(&mut ctx, 16, input.c, 3, 1, 1),
                Layer::BatchNorm(BatchNorm::new(16)),
            ];
            let mut in_c = 16;
            for stage in 0..3 {
                let out_c = 16 << stage;
                for unit in 0..6 {
                    let stride = if stage > 0 && unit == 0 { 2 } else { 1 };
                    let body = vec![
                        act_layer(act, in_c),
                        conv(&mut ctx, out_c, in_c, 3, stride, 1),
                        Layer::BatchNorm(BatchNorm::new(out_c)),
                    ];
                    let downsample = (stride == 2 || out_c != in_c).then_some(AvgPoolChannelPad {
                        out_channels: out_c,
                    });
                    let post = match spec.extra_act {
                        ExtraAct::None => None,
                        ExtraAct::PRelu { init_slope } => {
                            Some(Layer::PRelu(PRelu::new(out_c, T::of_f64(init_slope))))
                        }
                        ExtraAct::Leaky { slope } => {
                            Some(Layer::LeakyRelu(LeakyRelu::new(T::of_f64(slope))))
                        }
                    };
                    layers.push(Layer::Residual(ResidualBlock::new(body, downsample, post)));
                    in_c = out_c;
                }
            }
            layers.push(Layer::GlobalAvgPool(GlobalAvgPool::new()));
            layers.push(fc(&mut ctx, classes, in_c));
            layers
        }
    };
    debug_assert_eq!(ctx.weight_idx, weight_total, "weight layer miscount");
    Ok(Model::new(layers))
}

/// Summary of a pretrained-initialization copy.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainInit {
    pub tensors_copied: usize,
    /// The activation x-offset the source model was trained with; recorded
    /// alongside the run so the (source shift, target shift) pair is
    /// re-runnable. The target model keeps its own threshold setting.
    pub fp_shift: f64,
}

/// Copies weights and batch-norm state from a source checkpoint into
/// `model`, leaving the model's own activation thresholds untouched.
/// Every non-threshold tensor of the model must be present in the source
/// with a matching shape.
pub fn init_from_pretrained<T: Scalar>(
    model: &mut Model<T>,
    source: &[(String, Tensor<f32>)],
    fp_shift: f64,
) -> Result<PretrainInit> {
    let mut copied = 0;
    for (name, dst) in model.named_tensors_mut() {
        if name.ends_with(".sign.th") {
            continue;
        }
        let src = source
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
        if src.1.shape() != dst.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name}: source shape {:?} vs model shape {:?}",
                src.1.shape(),
                dst.shape()
            )));
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(src.1.data()) {
            *d = T::of_f64(s as f64);
        }
        copied += 1;
    }
    Ok(PretrainInit {
        tensors_copied: copied,
        fp_shift,
    })
}

pub fn input_dims_for(dataset_c: usize, dataset_h: usize, dataset_w: usize) -> InputDims {
    InputDims {
        c: dataset_c,
        h: dataset_h,
        w: dataset_w,
    }
}
