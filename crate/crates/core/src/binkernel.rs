//! Bit-packed ±1 storage and XNOR-popcount inference kernels.
//!
//! A ±1 dot product over packed words is `2 * popcount(XNOR(a, b)) - n`,
//! computed branch-free with the tail mask applied to the last word only.
//! Zero-padded convolution borders are handled with a per-position validity
//! mask: padding contributes zero to the float path, so the packed path
//! counts matches over valid positions only and uses their count as `n`.
//!
//! The packed runtime mirrors the reference eval path operation for
//! operation (same convolution lowering, same batch-norm affine arrays,
//! same comparison direction at the sign boundary), so binary activations
//! are bit-identical between the two, not merely close.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::InputDims;
use crate::nn::conv::{conv2d_plain, conv_out_dims};
use crate::nn::dense::matmul_nt;
use crate::nn::pool::{avgpool2_plain, maxpool2_plain, zeropad2_plain};
use crate::nn::{binarize_weights, GenHardtanh, Layer, Mode, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const WORD_BITS: usize = 64;

/// Bit-packed ±1 tensor: bit 1 is +1, bit 0 is -1. The trailing axis is the
/// row; each row is padded to a word boundary and all padding bits are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty(), "empty shape");
        let cols = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let wpr = cols.div_ceil(WORD_BITS);
        BitTensor {
            shape: shape.to_vec(),
            words_per_row: wpr,
            words: vec![0; rows * wpr],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn row_words_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(c < self.cols());
        (self.words[r * self.words_per_row + c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        debug_assert!(c < self.cols());
        let w = &mut self.words[r * self.words_per_row + c / WORD_BITS];
        let bit = 1u64 << (c % WORD_BITS);
        if v {
            *w |= bit;
        } else {
            *w &= !bit;
        }
    }

    /// Mask of in-row bits for the last word of a row.
    #[inline]
    fn tail_mask(&self) -> u64 {
        tail_mask(self.cols())
    }

    /// Checks the padding-bit invariant; run by the packed forward pass in
    /// debug builds.
    pub fn validate(&self) -> Result<()> {
        let tail = self.tail_mask();
        for r in 0..self.rows() {
            let row = self.row_words(r);
            if let Some(last) = row.last() {
                if *last & !tail != 0 {
                    return Err(Error::Config(format!(
                        "corrupted padding bits in packed row {r}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn tail_mask(cols: usize) -> u64 {
    let rem = cols % WORD_BITS;
    if rem == 0 {
        u64::MAX
    } else {
        (1u64 << rem) - 1
    }
}

/// Packs a ±1 tensor; any other value is an error.
pub fn pack<T: Scalar>(t: &Tensor<T>) -> Result<BitTensor> {
    let mut bt = BitTensor::zeros(t.shape());
    let cols = bt.cols();
    for (i, &v) in t.data().iter().enumerate() {
        if v == T::one() {
            let (r, c) = (i / cols, i % cols);
            bt.words[r * bt.words_per_row + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
        } else if v != -T::one() {
            return Err(Error::NotBinary {
                value: v.as_f64(),
                index: i,
            });
        }
    }
    Ok(bt)
}

/// Expands back to a ±1 tensor.
pub fn unpack<T: Scalar>(bt: &BitTensor) -> Tensor<T> {
    let cols = bt.cols();
    let mut data = Vec::with_capacity(bt.rows() * cols);
    for r in 0..bt.rows() {
        for c in 0..cols {
            data.push(if bt.get(r, c) { T::one() } else { -T::one() });
        }
    }
    Tensor::from_vec(&bt.shape, data)
}

/// ±1 dot product of two packed rows of logical length `n`:
/// `2 * popcount(NOT(a XOR b) AND mask(n)) - n`.
pub fn xnor_popcount_dot(a: &BitTensor, row_a: usize, b: &BitTensor, row_b: usize) -> Result<i64> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "xnor dot length mismatch: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(dot_words(a.row_words(row_a), b.row_words(row_b), a.cols()))
}

#[inline]
pub(crate) fn dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    let tail = tail_mask(n);
    let last = a.len() - 1;
    let mut pop = 0u32;
    for i in 0..last {
        pop += (!(a[i] ^ b[i])).count_ones();
    }
    pop += (!(a[last] ^ b[last]) & tail).count_ones();
    2 * pop as i64 - n as i64
}

/// Masked variant for rows with invalid (zero-contribution) positions:
/// matches are counted only where `valid` has a bit set and the logical
/// length is the number of valid positions.
#[inline]
fn dot_words_masked(a: &[u64], b: &[u64], valid: &[u64], n_valid: usize) -> i64 {
    let mut pop = 0u32;
    for i in 0..a.len() {
        pop += (!(a[i] ^ b[i]) & valid[i]).count_ones();
    }
    2 * pop as i64 - n_valid as i64
}

/// Weights of one packed compute layer.
#[derive(Debug)]
pub enum PackedWeights<T: Scalar> {
    Real(Tensor<T>),
    Binary { bits: BitTensor, alpha: Vec<T> },
}

#[derive(Debug)]
pub enum PackedOp<T: Scalar> {
    Conv {
        weights: PackedWeights<T>,
        in_dims: (usize, usize, usize),
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    },
    Linear {
        weights: PackedWeights<T>,
    },
    /// Folded batch-norm eval affine `y = scale[c] * x + shift[c]`.
    Affine {
        scale: Vec<T>,
        shift: Vec<T>,
    },
    MaxPool2,
    AvgPool2,
    ZeroPad2 {
        pad: usize,
    },
    Flatten,
    /// Sign at threshold zero; produces packed bits.
    Binarize,
    GenHardtanh {
        x_offset: T,
        y_offset: T,
        range: T,
    },
}

/// Inference-only model with bit-packed binary-binary layers. Immutable
/// after export; safe to share across threads.
#[derive(Debug)]
pub struct PackedModel<T: Scalar> {
    pub input: InputDims,
    pub ops: Vec<PackedOp<T>>,
}

enum Val<T: Scalar> {
    Real(Tensor<T>),
    /// Packed activations: rows are samples, plus the per-sample feature
    /// shape (`[C, H, W]` or `[F]`).
    Bits {
        bt: BitTensor,
        feat: Vec<usize>,
    },
}

impl<T: Scalar> Val<T> {
    fn to_real(&self) -> Tensor<T> {
        match self {
            Val::Real(t) => t.clone(),
            Val::Bits { bt, feat } => {
                let n = bt.rows();
                let mut shape = vec![n];
                shape.extend_from_slice(feat);
                unpack::<T>(bt).reshape(&shape).expect("bits shape")
            }
        }
    }
}

impl<T: Scalar> PackedModel<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_traced(x, &mut |_| {})
    }

    /// Forward pass invoking `on_bits` with the packed activations after
    /// every binarization, for layerwise equivalence checks.
    pub fn forward_traced(&self, x: &Tensor<T>, on_bits: &mut dyn FnMut(&BitTensor)) -> Tensor<T> {
        let mut val = Val::Real(x.clone());
        for op in &self.ops {
            val = self.apply(op, val, on_bits);
        }
        val.to_real()
    }

    pub fn predict(&self, x: &Tensor<T>) -> Vec<usize> {
        crate::nn::argmax_rows(&self.forward(x))
    }

    // The binarize predicate is written as the negation of the sign
    // layer's `x <= th` so the two paths agree on every input, NaN
    // included.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn apply(&self, op: &PackedOp<T>, val: Val<T>, on_bits: &mut dyn FnMut(&BitTensor)) -> Val<T> {
        match op {
            PackedOp::Conv {
                weights,
                in_dims,
                kernel,
                stride,
                pad,
            } => match (weights, &val) {
                (PackedWeights::Binary { bits, alpha }, Val::Bits { bt, feat }) => {
                    assert_eq!(feat.len(), 3, "packed conv expects [C, H, W] input bits");
                    Val::Real(packed_conv2d(
                        bt, *in_dims, bits, alpha, kernel.0, kernel.1, *stride, *pad,
                    ))
                }
                (PackedWeights::Binary { bits, alpha }, _) => {
                    // Binary weights over real inputs run the float path
                    // with the same sum-then-scale ordering as training.
                    let f = bits.rows();
                    let w = unpack::<T>(bits)
                        .reshape(&[f, in_dims.0, kernel.0, kernel.1])
                        .expect("weight bits shape");
                    Val::Real(conv2d_plain(&val.to_real(), &w, Some(alpha), *stride, *pad))
                }
                (PackedWeights::Real(w), _) => {
                    Val::Real(conv2d_plain(&val.to_real(), w, None, *stride, *pad))
                }
            },
            PackedOp::Linear { weights } => match (weights, &val) {
                (PackedWeights::Binary { bits, alpha }, Val::Bits { bt, .. }) => {
                    let n = bt.rows();
                    let f = bits.rows();
                    let mut out = Vec::with_capacity(n * f);
                    for s in 0..n {
                        let x_row = bt.row_words(s);
                        for (o, &a) in alpha.iter().enumerate().take(f) {
                            let d = dot_words(x_row, bits.row_words(o), bt.cols());
                            out.push(a * T::of_f64(d as f64));
                        }
                    }
                    Val::Real(Tensor::from_vec(&[n, f], out))
                }
                (PackedWeights::Binary { bits, alpha }, Val::Real(x)) => {
                    let (n, k) = (x.shape()[0], x.shape()[1]);
                    let f = bits.rows();
                    let w = unpack::<T>(bits);
                    let mut out = vec![T::zero(); n * f];
                    matmul_nt(x.data(), w.data(), n, k, f, &mut out);
                    for row in out.chunks_exact_mut(f) {
                        for (o, &a) in row.iter_mut().zip(alpha) {
                            *o *= a;
                        }
                    }
                    Val::Real(Tensor::from_vec(&[n, f], out))
                }
                (PackedWeights::Real(w), _) => {
                    let x = val.to_real();
                    let (n, k) = (x.shape()[0], x.shape()[1]);
                    let f = w.shape()[0];
                    let mut out = vec![T::zero(); n * f];
                    matmul_nt(x.data(), w.data(), n, k, f, &mut out);
                    Val::Real(Tensor::from_vec(&[n, f], out))
                }
            },
            PackedOp::Affine { scale, shift } => {
                let x = val.to_real();
                let shape = x.shape().to_vec();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let c = crate::nn::channel_of(&shape, i);
                        scale[c] * v + shift[c]
                    })
                    .collect();
                Val::Real(Tensor::from_vec(&shape, data))
            }
            PackedOp::MaxPool2 => Val::Real(maxpool2_plain(&val.to_real()).0),
            PackedOp::AvgPool2 => Val::Real(avgpool2_plain(&val.to_real())),
            PackedOp::ZeroPad2 { pad } => Val::Real(zeropad2_plain(&val.to_real(), *pad)),
            PackedOp::Flatten => match val {
                Val::Bits { bt, feat } => Val::Bits {
                    bt,
                    feat: vec![feat.iter().product()],
                },
                Val::Real(t) => {
                    let n = t.shape()[0];
                    Val::Real(t.reshape(&[n, t.numel() / n]).expect("flatten"))
                }
            },
            PackedOp::Binarize => {
                let x = val.to_real();
                let n = x.shape()[0];
                let feat: Vec<usize> = x.shape()[1..].to_vec();
                let cols: usize = feat.iter().product();
                let mut bt = BitTensor::zeros(&[n, cols]);
                for (i, &v) in x.data().iter().enumerate() {
                    // Same predicate as the sign layer: x <= 0 maps to -1.
                    if !(v <= T::zero()) {
                        bt.set(i / cols, i % cols, true);
                    }
                }
                if cfg!(debug_assertions) {
                    bt.validate().expect("packed padding invariant");
                }
                on_bits(&bt);
                Val::Bits { bt, feat }
            }
            PackedOp::GenHardtanh {
                x_offset,
                y_offset,
                range,
            } => {
                let mut layer = GenHardtanh::new(*x_offset, *y_offset, *range);
                Val::Real(layer.forward(&val.to_real(), Mode::Eval))
            }
        }
    }
}

/// Integer-path binary convolution: packed im2col rows gathered per output
/// position, with a geometry validity mask shared across samples.
#[allow(clippy::too_many_arguments)]
fn packed_conv2d<T: Scalar>(
    x: &BitTensor,
    (c, h, w): (usize, usize, usize),
    wbits: &BitTensor,
    alpha: &[T],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    assert_eq!(x.cols(), c * h * w, "packed conv input feature mismatch");
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    let k = c * kh * kw;
    assert_eq!(wbits.cols(), k, "packed conv weight length mismatch");
    let f = wbits.rows();
    let n = x.rows();
    let wpr = k.div_ceil(WORD_BITS);

    // Per-position gather plan: which row bit comes from which input bit,
    // and which row bits are valid (inside the unpadded input).
    struct Gather {
        valid: Vec<u64>,
        n_valid: usize,
        src: Vec<(u32, u32)>, // (row bit, input bit)
    }
    let mut plan = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut valid = vec![0u64; wpr];
            let mut src = Vec::new();
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let j = ci * kh * kw + ky * kw + kx;
                        valid[j / WORD_BITS] |= 1u64 << (j % WORD_BITS);
                        src.push((
                            j as u32,
                            (ci * h * w + iy as usize * w + ix as usize) as u32,
                        ));
                    }
                }
            }
            let n_valid = src.len();
            plan.push(Gather {
                valid,
                n_valid,
                src,
            });
        }
    }

    if cfg!(debug_assertions) {
        x.validate().expect("packed padding invariant");
        wbits.validate().expect("packed padding invariant");
    }

    let p = oh * ow;
    let mut out = vec![T::zero(); n * f * p];
    let mut row = vec![0u64; wpr];
    for s in 0..n {
        let x_row = x.row_words(s);
        for (pi, g) in plan.iter().enumerate() {
            row.fill(0);
            for &(j, src_bit) in &g.src {
                if (x_row[src_bit as usize / WORD_BITS] >> (src_bit as usize % WORD_BITS)) & 1 == 1
                {
                    row[j as usize / WORD_BITS] |= 1u64 << (j as usize % WORD_BITS);
                }
            }
            let out_s = &mut out[s * f * p..(s + 1) * f * p];
            for fi in 0..f {
                let d = dot_words_masked(&row, wbits.row_words(fi), &g.valid, g.n_valid);
                out_s[fi * p + pi] = alpha[fi] * T::of_f64(d as f64);
            }
        }
    }
    Tensor::from_vec(&[n, f, oh, ow], out)
}

/// Exports an eval-ready model (thresholds already folded to zero) into the
/// packed representation. Refuses models with nothing binary in them and
/// residual topologies.
pub fn export_packed<T: Scalar>(model: &Model<T>, input: InputDims) -> Result<PackedModel<T>> {
    let mut any_binary = false;
    for layer in &model.layers {
        match layer {
            Layer::Sign(_) => any_binary = true,
            Layer::Conv2d(c) if c.binary => any_binary = true,
            Layer::Linear(l) if l.binary => any_binary = true,
            _ => {}
        }
    }
    if !any_binary {
        return Err(Error::Export(
            "model has no binary activations or binary weights; nothing to pack".into(),
        ));
    }

    let mut ops = Vec::new();
    let (mut c, mut h, mut w) = (input.c, input.h, input.w);
    for (i, layer) in model.layers.iter().enumerate() {
        let name = format!("l{i:02}");
        match layer {
            Layer::Conv2d(conv) => {
                let (f, _, kh, kw) = crate::nn::conv::dims4(conv.w.value.shape());
                let weights = if conv.binary {
                    let (b, alpha) = binarize_weights(&conv.w.value);
                    let bits = pack(&b.reshape(&[f, c * kh * kw]).expect("weight reshape"))?;
                    PackedWeights::Binary { bits, alpha }
                } else {
                    PackedWeights::Real(conv.w.value.clone())
                };
                ops.push(PackedOp::Conv {
                    weights,
                    in_dims: (c, h, w),
                    kernel: (kh, kw),
                    stride: conv.stride,
                    pad: conv.pad,
                });
                let (oh, ow) = conv_out_dims(h, w, kh, kw, conv.stride, conv.pad);
                c = f;
                h = oh;
                w = ow;
            }
            Layer::Linear(lin) => {
                let weights = if lin.binary {
                    let (b, alpha) = binarize_weights(&lin.w.value);
                    PackedWeights::Binary {
                        bits: pack(&b)?,
                        alpha,
                    }
                } else {
                    PackedWeights::Real(lin.w.value.clone())
                };
                ops.push(PackedOp::Linear { weights });
                c = lin.out_features();
                h = 1;
                w = 1;
            }
            Layer::BatchNorm(bn) => {
                let (scale, shift) = bn.eval_affine();
                ops.push(PackedOp::Affine { scale, shift });
            }
            Layer::Sign(sign) => {
                if sign.th.value.data().iter().any(|&t| t != T::zero()) {
                    return Err(Error::Export(format!(
                        "unfolded threshold in {name}.sign: fold thresholds before export"
                    )));
                }
                ops.push(PackedOp::Binarize);
            }
            Layer::GenHardtanh(g) => ops.push(PackedOp::GenHardtanh {
                x_offset: g.x_offset,
                y_offset: g.y_offset,
                range: g.range,
            }),
            Layer::MaxPool2(_) => {
                ops.push(PackedOp::MaxPool2);
                h /= 2;
                w /= 2;
            }
            Layer::AvgPool2(_) => {
                ops.push(PackedOp::AvgPool2);
                h /= 2;
                w /= 2;
            }
            Layer::ZeroPad2(z) => {
                ops.push(PackedOp::ZeroPad2 { pad: z.pad });
                h += 2 * z.pad;
                w += 2 * z.pad;
            }
            Layer::Flatten(_) => {
                ops.push(PackedOp::Flatten);
                c *= h * w;
                h = 1;
                w = 1;
            }
            other => {
                let kind = match other {
                    Layer::Residual(_) => "residual block",
                    Layer::LeakyRelu(_) => "leaky relu",
                    Layer::PRelu(_) => "prelu",
                    Layer::GlobalAvgPool(_) => "global avg pool",
                    _ => "layer",
                };
                return Err(Error::Export(format!(
                    "{name}: {kind} is not supported by the packed exporter"
                )));
            }
        }
    }
    Ok(PackedModel { input, ops })
}

// ---------------------------------------------------------------------------
// Packed model file format (all little-endian):
//   magic "BNNPACK\0", u32 version, u32 input c/h/w, u32 op count, then ops
//   tagged by one byte. Tensors serialize as rank + dims + f32 data; packed
//   bits as rank + dims + raw u64 words.
// ---------------------------------------------------------------------------

pub const MAGIC: &[u8; 8] = b"BNNPACK\0";
pub const VERSION: u32 = 1;

const TAG_CONV_REAL: u8 = 0;
const TAG_CONV_BIN: u8 = 1;
const TAG_LINEAR_REAL: u8 = 2;
const TAG_LINEAR_BIN: u8 = 3;
const TAG_AFFINE: u8 = 4;
const TAG_MAXPOOL: u8 = 5;
const TAG_AVGPOOL: u8 = 6;
const TAG_ZEROPAD: u8 = 7;
const TAG_FLATTEN: u8 = 8;
const TAG_BINARIZE: u8 = 9;
const TAG_GEN_HARDTANH: u8 = 10;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32_vec<T: Scalar>(buf: &mut Vec<u8>, v: &[T]) {
    put_u32(buf, v.len() as u32);
    for &x in v {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for &x in t.data() {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
}

fn put_bits(buf: &mut Vec<u8>, b: &BitTensor) {
    put_u32(buf, b.shape().len() as u32);
    for &d in b.shape() {
        put_u32(buf, d as u32);
    }
    for &w in &b.words {
        buf.extend_from_slice(&w.to_le_bytes());
    }
}

impl<T: Scalar> PackedModel<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, self.input.c as u32);
        put_u32(&mut buf, self.input.h as u32);
        put_u32(&mut buf, self.input.w as u32);
        put_u32(&mut buf, self.ops.len() as u32);
        for op in &self.ops {
            match op {
                PackedOp::Conv {
                    weights,
                    in_dims,
                    kernel,
                    stride,
                    pad,
                } => {
                    buf.push(match weights {
                        PackedWeights::Real(_) => TAG_CONV_REAL,
                        PackedWeights::Binary { .. } => TAG_CONV_BIN,
                    });
                    put_u32(&mut buf, in_dims.0 as u32);
                    put_u32(&mut buf, in_dims.1 as u32);
                    put_u32(&mut buf, in_dims.2 as u32);
                    put_u32(&mut buf, kernel.0 as u32);
                    put_u32(&mut buf, kernel.1 as u32);
                    put_u32(&mut buf, *stride as u32);
                    put_u32(&mut buf, *pad as u32);
                    match weights {
                        PackedWeights::Real(wt) => put_tensor(&mut buf, wt),
                        PackedWeights::Binary { bits, alpha } => {
                            put_bits(&mut buf, bits);
                            put_f32_vec(&mut buf, alpha);
                        }
                    }
                }
                PackedOp::Linear { weights } => match weights {
                    PackedWeights::Real(wt) => {
                        buf.push(TAG_LINEAR_REAL);
                        put_tensor(&mut buf, wt);
                    }
                    PackedWeights::Binary { bits, alpha } => {
                        buf.push(TAG_LINEAR_BIN);
                        put_bits(&mut buf, bits);
                        put_f32_vec(&mut buf, alpha);
                    }
                },
                PackedOp::Affine { scale, shift } => {
                    buf.push(TAG_AFFINE);
                    put_f32_vec(&mut buf, scale);
                    put_f32_vec(&mut buf, shift);
                }
                PackedOp::MaxPool2 => buf.push(TAG_MAXPOOL),
                PackedOp::AvgPool2 => buf.push(TAG_AVGPOOL),
                PackedOp::ZeroPad2 { pad } => {
                    buf.push(TAG_ZEROPAD);
                    put_u32(&mut buf, *pad as u32);
                }
                PackedOp::Flatten => buf.push(TAG_FLATTEN),
                PackedOp::Binarize => buf.push(TAG_BINARIZE),
                PackedOp::GenHardtanh {
                    x_offset,
                    y_offset,
                    range,
                } => {
                    buf.push(TAG_GEN_HARDTANH);
                    put_f32_vec(&mut buf, &[*x_offset, *y_offset, *range]);
                }
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, 0, "bad magic: not a packed model file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                8,
                format!("unsupported packed format version {version} (expected {VERSION})"),
            ));
        }
        let input = InputDims {
            c: r.u32()? as usize,
            h: r.u32()? as usize,
            w: r.u32()? as usize,
        };
        let count = r.u32()? as usize;
        let mut ops = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = r.u8()?;
            let op = match tag {
                TAG_CONV_REAL | TAG_CONV_BIN => {
                    let in_dims = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
                    let kernel = (r.u32()? as usize, r.u32()? as usize);
                    let stride = r.u32()? as usize;
                    let pad = r.u32()? as usize;
                    let weights = if tag == TAG_CONV_REAL {
                        PackedWeights::Real(r.tensor()?)
                    } else {
                        PackedWeights::Binary {
                            bits: r.bits()?,
                            alpha: r.f32_vec()?,
                        }
                    };
                    PackedOp::Conv {
                        weights,
                        in_dims,
                        kernel,
                        stride,
                        pad,
                    }
                }
                TAG_LINEAR_REAL => PackedOp::Linear {
                    weights: PackedWeights::Real(r.tensor()?),
                },
                TAG_LINEAR_BIN => PackedOp::Linear {
                    weights: PackedWeights::Binary {
                        bits: r.bits()?,
                        alpha: r.f32_vec()?,
                    },
                },
                TAG_AFFINE => PackedOp::Affine {
                    scale: r.f32_vec()?,
                    shift: r.f32_vec()?,
                },
                TAG_MAXPOOL => PackedOp::MaxPool2,
                TAG_AVGPOOL => PackedOp::AvgPool2,
                TAG_ZEROPAD => PackedOp::ZeroPad2 {
                    pad: r.u32()? as usize,
                },
                TAG_FLATTEN => PackedOp::Flatten,
                TAG_BINARIZE => PackedOp::Binarize,
                TAG_GEN_HARDTANH => {
                    let v = r.f32_vec()?;
                    if v.len() != 3 {
                        return Err(Error::format(path, r.pos as u64, "bad hardtanh params"));
                    }
                    PackedOp::GenHardtanh {
                        x_offset: v[0],
                        y_offset: v[1],
                        range: v[2],
                    }
                }
                other => {
                    return Err(Error::format(
                        path,
                        (r.pos - 1) as u64,
                        format!("unknown packed op tag {other}"),
                    ))
                }
            };
            ops.push(op);
        }
        Ok(PackedModel { input, ops })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated: needed {n} bytes"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.u32()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| T::of_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect())
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        Ok(Tensor::from_vec(&shape, data))
    }

    fn bits(&mut self) -> Result<BitTensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let mut bt = BitTensor::zeros(&shape);
        let n_words = bt.words.len();
        let raw = self.take(n_words * 8)?;
        for (w, chunk) in bt.words.iter_mut().zip(raw.chunks_exact(8)) {
            *w = u64::from_le_bytes(chunk.try_into().unwrap());
        }
        bt.validate()
            .map_err(|_| Error::format(self.path, self.pos as u64, "corrupted padding bits"))?;
        Ok(bt)
    }
}
