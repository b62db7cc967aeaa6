//! Training and inference toolkit for binary neural networks whose
//! activation thresholds can be shifted away from zero, producing an
//! unbalanced +1/-1 activation distribution.
//!
//! The crate covers the full loop at desk scale: dense tensors and
//! hand-derived layer gradients, straight-through estimation for the sign
//! activation, latent-weight binarization with per-channel scaling, MNIST
//! and CIFAR-10 ingestion, Adam/SGD with cosine annealing, experiment
//! sweeps over threshold shifts, threshold-to-batch-norm-bias folding, and
//! bit-packed XNOR-popcount inference kernels that match the float path
//! exactly.
//!
//! Core math is generic over the [`scalar::Scalar`] element type; `f32` is
//! the training default (checkpoints store raw `f32`), `f64` exists for
//! numerical cross-checks. The crate root exports concrete aliases for the
//! common instantiations.
//!
//! # Quick start
//!
//! ```
//! use bnnkit::models::{self, Activation, Arch, ExtraAct, InputDims, ModelSpec,
//!                      Pooling, Precision, SignActConfig};
//! use bnnkit::nn::{argmax_rows, softmax_xent, Mode};
//! use bnnkit::tensor::{Fill, Tensor};
//!
//! // A binary two-layer MLP with its sign threshold shifted to 0.5.
//! let spec = ModelSpec {
//!     arch: Arch::Mlp2,
//!     precision: Precision::Binary,
//!     activation: Activation::Sign(SignActConfig {
//!         threshold_shift: 0.5,
//!         ..Default::default()
//!     }),
//!     pooling: Pooling::Max,
//!     extra_act: ExtraAct::None,
//!     binarize_first_last: false,
//! };
//! let dims = InputDims { c: 1, h: 28, w: 28 };
//! let mut model = models::build::<f32>(&spec, dims, 10, 42)?;
//!
//! // One training step.
//! let x = Tensor::create(&[8, 1, 28, 28], Fill::XavierNormal { seed: 1 })?;
//! let labels = [0u8, 1, 2, 3, 4, 5, 6, 7];
//! let logits = model.forward(&x, Mode::Train);
//! let (_loss, grad) = softmax_xent(&logits, &labels);
//! model.backward(&grad);
//! let mut opt = bnnkit::optim::Adam::new();
//! opt.step(&mut model.params_mut(), 0.01);
//!
//! // Fold the threshold into the batch-norm bias and pack for inference;
//! // packed predictions match the eval-mode float path exactly.
//! model.fold_thresholds()?;
//! let packed = bnnkit::binkernel::export_packed(&model, dims)?;
//! let eval_logits = model.forward(&x, Mode::Eval);
//! assert_eq!(packed.predict(&x), argmax_rows(&eval_logits));
//! # Ok::<(), bnnkit::Error>(())
//! ```

pub mod binkernel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exper;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

/// `f32` tensor, the training default.
pub type Tensor32 = tensor::Tensor<f32>;
/// `f64` tensor, for high-precision cross-checks.
pub type Tensor64 = tensor::Tensor<f64>;
/// `f32` model, the training default.
pub type Model32 = nn::Model<f32>;
/// `f64` model, for high-precision cross-checks.
pub type Model64 = nn::Model<f64>;
/// `f32` packed inference model, matching the on-disk format.
pub type PackedModel32 = binkernel::PackedModel<f32>;
