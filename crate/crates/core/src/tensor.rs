//! Dense real-valued N-dimensional arrays, row-major, NCHW for images.
//!
//! This is the value type of the training path. Shapes are validated at
//! construction; the data length always equals the product of the dimension
//! sizes and every dimension is at least 1.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Fill rule for [`Tensor::create`].
#[derive(Debug, Clone, Copy)]
pub enum Fill<T> {
    Zeros,
    Constant(T),
    /// Normal draws with variance 2 / (fan_in + fan_out), deterministic in
    /// the seed. For rank >= 2 the leading axis is fan-out and the second
    /// axis is fan-in, both scaled by the trailing receptive-field size; for
    /// rank 1 both fans equal the length.
    XavierNormal {
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    /// Biased estimator (divide by N), matching batch-norm training statistics.
    Var,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Map2Op {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Validating constructor used by the public creation API.
    pub fn create(shape: &[usize], fill: Fill<T>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = match fill {
            Fill::Zeros => vec![T::zero(); n],
            Fill::Constant(c) => vec![c; n],
            Fill::XavierNormal { seed } => {
                let std = xavier_std(shape);
                let mut rng = Rng::new(seed);
                (0..n).map(|_| T::of_f64(rng.normal() * std)).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Xavier fill drawing from a caller-owned RNG stream (model builders
    /// thread one RNG through all layers).
    pub fn xavier_from(shape: &[usize], rng: &mut Rng) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        let std = xavier_std(shape);
        let data = (0..n).map(|_| T::of_f64(rng.normal() * std)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Infallible zeros constructor; panics on an invalid shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::create(shape, Fill::Zeros).expect("invalid shape")
    }

    pub fn full(shape: &[usize], c: T) -> Self {
        Self::create(shape, Fill::Constant(c)).expect("invalid shape")
    }

    /// Takes ownership of `data`; panics if the length does not match.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        validate_shape(shape).expect("invalid shape");
        let n: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            n,
            "data length {} != shape product {n}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape; the element count must be unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({n} elements)",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn fill_with(&mut self, c: T) {
        self.data.fill(c);
    }

    pub fn scale_in_place(&mut self, c: T) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Reduction over an axis set; reduced axes are removed from the shape
    /// (a full reduction yields shape `[1]`).
    pub fn reduce(&self, axes: &[usize], kind: ReduceKind) -> Result<Self> {
        for (i, &a) in axes.iter().enumerate() {
            if a >= self.rank() {
                return Err(Error::Config(format!(
                    "reduce axis {a} out of range for rank {}",
                    self.rank()
                )));
            }
            if axes[..i].contains(&a) {
                return Err(Error::Config(format!("duplicate reduce axis {a}")));
            }
        }
        let keep: Vec<usize> = (0..self.rank()).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&a| self.shape[a]).collect()
        };

        let in_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        let out_n: usize = out_shape.iter().product();
        let group = self.numel() / out_n;

        // Map each input element to its output cell.
        let out_index = |flat: usize| -> usize {
            if keep.is_empty() {
                return 0;
            }
            let mut idx = 0;
            for (k, &a) in keep.iter().enumerate() {
                let coord = (flat / in_strides[a]) % self.shape[a];
                idx += coord * out_strides[k];
            }
            idx
        };

        let data = match kind {
            ReduceKind::Mean | ReduceKind::Var => {
                let mut sums = vec![T::zero(); out_n];
                for (flat, &v) in self.data.iter().enumerate() {
                    sums[out_index(flat)] += v;
                }
                let n = T::of_usize(group);
                for s in &mut sums {
                    *s /= n;
                }
                if kind == ReduceKind::Mean {
                    sums
                } else {
                    let mut sq = vec![T::zero(); out_n];
                    for (flat, &v) in self.data.iter().enumerate() {
                        let o = out_index(flat);
                        let d = v - sums[o];
                        sq[o] += d * d;
                    }
                    for s in &mut sq {
                        *s /= n;
                    }
                    sq
                }
            }
            ReduceKind::Max | ReduceKind::Min => {
                let init = if kind == ReduceKind::Max {
                    T::neg_infinity()
                } else {
                    T::infinity()
                };
                let mut acc = vec![init; out_n];
                for (flat, &v) in self.data.iter().enumerate() {
                    let o = out_index(flat);
                    acc[o] = if kind == ReduceKind::Max {
                        acc[o].max(v)
                    } else {
                        acc[o].min(v)
                    };
                }
                acc
            }
        };
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Elementwise binary op over equal shapes.
    pub fn map2(a: &Tensor<T>, b: &Tensor<T>, op: Map2Op) -> Result<Self> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch(format!(
                "map2 {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| apply(op, x, y))
            .collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    }

    /// Binary op broadcasting a rank-1 `b` along `channel_axis` of `a`:
    /// one scalar per channel applied across all other axes.
    pub fn map2_channel(
        a: &Tensor<T>,
        b: &Tensor<T>,
        channel_axis: usize,
        op: Map2Op,
    ) -> Result<Self> {
        if channel_axis >= a.rank() {
            return Err(Error::Config(format!(
                "channel axis {channel_axis} out of range for rank {}",
                a.rank()
            )));
        }
        if b.rank() != 1 || b.shape[0] != a.shape[channel_axis] {
            return Err(Error::ShapeMismatch(format!(
                "channel vector {:?} does not match axis {channel_axis} of {:?}",
                b.shape, a.shape
            )));
        }
        let st = strides(&a.shape);
        let dim = a.shape[channel_axis];
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(flat, &x)| {
                let c = (flat / st[channel_axis]) % dim;
                apply(op, x, b.data[c])
            })
            .collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    }
}

#[inline]
fn apply<T: Scalar>(op: Map2Op, x: T, y: T) -> T {
    match op {
        Map2Op::Add => x + y,
        Map2Op::Sub => x - y,
        Map2Op::Mul => x * y,
        Map2Op::Div => x / y,
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "empty shape".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero-sized dimension".into(),
        });
    }
    Ok(())
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

fn xavier_std(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = if shape.len() >= 2 {
        let receptive: usize = shape[2..].iter().product();
        (shape[1] * receptive, shape[0] * receptive)
    } else {
        (shape[0], shape[0])
    };
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    type T32 = Tensor<f32>;

    #[test]
    fn create_zeros_and_constant() {
        let z = T32::create(&[2, 2], Fill::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = T32::create(&[3], Fill::Constant(1.5)).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn create_empty_shape_is_error() {
        assert!(matches!(
            T32::create(&[], Fill::Zeros),
            Err(Error::InvalidShape { .. })
        ));
        assert!(matches!(
            T32::create(&[2, 0], Fill::Zeros),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn xavier_sample_variance_near_closed_form() {
        // 64x64: fan_in + fan_out = 128, target variance 2/128.
        let t = T32::create(&[64, 64], Fill::XavierNormal { seed: 1 }).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let target = 2.0 / 128.0;
        assert!(
            (var - target).abs() < 0.2 * target,
            "sample var {var} vs target {target}"
        );
    }

    #[test]
    fn xavier_same_seed_bit_identical() {
        let a = T32::create(&[16, 8], Fill::XavierNormal { seed: 42 }).unwrap();
        let b = T32::create(&[16, 8], Fill::XavierNormal { seed: 42 }).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = T32::create(&[16, 8], Fill::XavierNormal { seed: 43 }).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn reduce_mean_var_max() {
        let t = T32::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        let m = t.reduce(&[0], ReduceKind::Mean).unwrap();
        assert_eq!(m.data(), &[2.0]);
        let v = t.reduce(&[0], ReduceKind::Var).unwrap();
        assert!((v.data()[0] - 2.0 / 3.0).abs() < 1e-6, "biased variance");

        let t = T32::from_vec(&[2, 2], vec![1.0, 4.0, 3.0, 2.0]);
        let mx = t.reduce(&[0], ReduceKind::Max).unwrap();
        assert_eq!(mx.data(), &[3.0, 4.0]);
        assert_eq!(mx.shape(), &[2]);
    }

    #[test]
    fn reduce_duplicate_axis_is_error() {
        let t = T32::zeros(&[2, 3]);
        assert!(t.reduce(&[0, 0], ReduceKind::Mean).is_err());
        assert!(t.reduce(&[2], ReduceKind::Mean).is_err());
    }

    #[test]
    fn map2_add_and_channel_mul() {
        let a = T32::from_vec(&[2], vec![1.0, 2.0]);
        let b = T32::from_vec(&[2], vec![3.0, 4.0]);
        assert_eq!(T32::map2(&a, &b, Map2Op::Add).unwrap().data(), &[4.0, 6.0]);

        let a = T32::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let ch = T32::from_vec(&[2], vec![10.0, 100.0]);
        let y = T32::map2_channel(&a, &ch, 0, Map2Op::Mul).unwrap();
        assert_eq!(y.data(), &[10.0, 20.0, 300.0, 400.0]);
    }

    #[test]
    fn map2_div_self_is_ones() {
        let a = T32::from_vec(&[4], vec![0.5, -2.0, 3.0, 7.5]);
        let y = T32::map2(&a, &a, Map2Op::Div).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn map2_incompatible_shapes_error() {
        let a = T32::zeros(&[2, 2]);
        let b = T32::zeros(&[3]);
        assert!(T32::map2(&a, &b, Map2Op::Add).is_err());
        assert!(T32::map2_channel(&a, &b, 0, Map2Op::Add).is_err());
    }

    #[test]
    fn reshape_roundtrip_preserves_data() {
        let t = T32::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let flat = t.reshape(&[6]).unwrap();
        let back = flat.reshape(&[2, 3]).unwrap();
        assert_eq!(back.data(), t.data());
        assert!(t.reshape(&[4]).is_err());
    }

    #[test]
    fn mean_subtract_centers() {
        let t = T32::create(&[8, 5], Fill::XavierNormal { seed: 3 }).unwrap();
        let mean = t.reduce(&[0], ReduceKind::Mean).unwrap();
        let centered = T32::map2_channel(&t, &mean, 1, Map2Op::Sub).unwrap();
        let m = centered.reduce(&[0, 1], ReduceKind::Mean).unwrap();
        assert!(m.data()[0].abs() < 1e-6);
    }
}
