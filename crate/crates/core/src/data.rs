//! Dataset ingestion, normalization, augmentation and deterministic
//! batching for MNIST (IDX files) and CIFAR-10 (binary batch files).
//!
//! Normalization constants are computed from the raw training split (per
//! channel for CIFAR-10) and applied to both splits. Batch order is a
//! seeded shuffle, so an epoch is fully reproducible from `(seed, epoch)`.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetId {
    Mnist,
    Cifar10,
}

impl DatasetId {
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            DatasetId::Mnist => (1, 28, 28),
            DatasetId::Cifar10 => (3, 32, 32),
        }
    }

    pub fn classes(self) -> usize {
        10
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetId::Mnist => write!(f, "mnist"),
            DatasetId::Cifar10 => write!(f, "cifar10"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    /// `[N, C, H, W]`, normalized.
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }
}

fn read_file(path: &Path, expected: &[PathBuf]) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!(
                "dataset file {} not found; expected files: {}",
                path.display(),
                expected
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        } else {
            Error::io(path, e)
        }
    })
}

fn be_u32(buf: &[u8], pos: usize, path: &Path) -> Result<u32> {
    buf.get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, pos as u64, "truncated header"))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_idx_images(path: &Path, expected: &[PathBuf]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let buf = read_file(path, expected)?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&buf, 4, path)? as usize;
    let rows = be_u32(&buf, 8, path)? as usize;
    let cols = be_u32(&buf, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if buf.len() < need {
        return Err(Error::format(
            path,
            buf.len() as u64,
            format!(
                "truncated image data: have {} bytes, need {need}",
                buf.len()
            ),
        ));
    }
    Ok((buf[16..need].to_vec(), n, rows, cols))
}

fn parse_idx_labels(path: &Path, expected: &[PathBuf]) -> Result<Vec<u8>> {
    let buf = read_file(path, expected)?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&buf, 4, path)? as usize;
    if buf.len() < 8 + n {
        return Err(Error::format(
            path,
            buf.len() as u64,
            format!(
                "truncated label data: have {} bytes, need {}",
                buf.len(),
                8 + n
            ),
        ));
    }
    Ok(buf[8..8 + n].to_vec())
}

pub fn mnist_files(dir: &Path) -> Vec<PathBuf> {
    [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect()
}

/// Loads the MNIST IDX files from `dir`, scaling pixels to [0, 1] and then
/// normalizing with the training split's mean and standard deviation.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let files = mnist_files(dir);
    let (train_px, n_train, rows, cols) = parse_idx_images(&files[0], &files)?;
    let train_labels = parse_idx_labels(&files[1], &files)?;
    let (test_px, n_test, trows, tcols) = parse_idx_images(&files[2], &files)?;
    let test_labels = parse_idx_labels(&files[3], &files)?;
    if train_labels.len() != n_train || test_labels.len() != n_test {
        return Err(Error::Config(format!(
            "label/image count mismatch: {} labels vs {n_train} train images, {} vs {n_test} test",
            train_labels.len(),
            test_labels.len()
        )));
    }
    if (trows, tcols) != (rows, cols) {
        return Err(Error::Config("train/test image dims differ".into()));
    }
    validate_labels(&train_labels)?;
    validate_labels(&test_labels)?;

    // Single-channel normalization constants from the training split.
    let n_px = train_px.len() as f64;
    let mean = train_px.iter().map(|&b| b as f64 / 255.0).sum::<f64>() / n_px;
    let var = train_px
        .iter()
        .map(|&b| (b as f64 / 255.0 - mean).powi(2))
        .sum::<f64>()
        / n_px;
    let std = var.sqrt();

    let norm = |px: &[u8], n: usize, split| Dataset {
        images: Tensor::from_vec(
            &[n, 1, rows, cols],
            px.iter()
                .map(|&b| T::of_f64((b as f64 / 255.0 - mean) / std))
                .collect(),
        ),
        labels: Vec::new(),
        split,
    };
    let mut train = norm(&train_px, n_train, Split::Train);
    train.labels = train_labels;
    let mut test = norm(&test_px, n_test, Split::Test);
    test.labels = test_labels;
    Ok((train, test))
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixel bytes
const CIFAR_PIXELS: usize = 3072;

pub fn cifar10_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    v.push(dir.join("test_batch.bin"));
    v
}

fn parse_cifar_file(path: &Path, expected: &[PathBuf]) -> Result<(Vec<u8>, Vec<u8>)> {
    let buf = read_file(path, expected)?;
    if buf.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            buf.len() as u64,
            format!(
                "file length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                buf.len()
            ),
        ));
    }
    let n = buf.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in buf.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(
                path,
                (i * CIFAR_RECORD) as u64,
                format!("label byte {} out of range 0..=9", rec[0]),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Loads the five CIFAR-10 training batch files plus the test batch,
/// normalizing per channel with training-split statistics.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let files = cifar10_files(dir);
    let mut train_labels = Vec::new();
    let mut train_px = Vec::new();
    for f in &files[..5] {
        let (l, p) = parse_cifar_file(f, &files)?;
        train_labels.extend(l);
        train_px.extend(p);
    }
    let (test_labels, test_px) = parse_cifar_file(&files[5], &files)?;

    // Per-channel mean/std over the training split (channel planes are
    // contiguous per record: R, G, B).
    let n_train = train_labels.len();
    let mut mean = [0.0f64; 3];
    let mut var = [0.0f64; 3];
    let plane = 1024;
    for rec in train_px.chunks_exact(CIFAR_PIXELS) {
        for c in 0..3 {
            for &b in &rec[c * plane..(c + 1) * plane] {
                mean[c] += b as f64 / 255.0;
            }
        }
    }
    let per_channel = (n_train * plane) as f64;
    for m in &mut mean {
        *m /= per_channel;
    }
    for rec in train_px.chunks_exact(CIFAR_PIXELS) {
        for c in 0..3 {
            for &b in &rec[c * plane..(c + 1) * plane] {
                var[c] += (b as f64 / 255.0 - mean[c]).powi(2);
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / per_channel).sqrt()).collect();

    let norm = |px: &[u8], labels: Vec<u8>, split| {
        let n = labels.len();
        let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
        for rec in px.chunks_exact(CIFAR_PIXELS) {
            for c in 0..3 {
                for &b in &rec[c * plane..(c + 1) * plane] {
                    data.push(T::of_f64((b as f64 / 255.0 - mean[c]) / std[c]));
                }
            }
        }
        Dataset {
            images: Tensor::from_vec(&[n, 3, 32, 32], data),
            labels,
            split,
        }
    };
    Ok((
        norm(&train_px, train_labels, Split::Train),
        norm(&test_px, test_labels, Split::Test),
    ))
}

pub fn load<T: Scalar>(id: DatasetId, dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    match id {
        DatasetId::Mnist => load_mnist(dir),
        DatasetId::Cifar10 => load_cifar10(dir),
    }
}

fn validate_labels(labels: &[u8]) -> Result<()> {
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(Error::Config(format!(
            "label {l} at index {i} out of range 0..=9"
        )));
    }
    Ok(())
}

/// Shuffled batch index plan for one epoch: every index appears exactly
/// once; the last batch keeps the remainder rather than dropping it.
pub fn plan_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<u32>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut idx: Vec<u32> = (0..n as u32).collect();
    Rng::new(seed).shuffle(&mut idx);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Deterministic batch iterator. With `augment` on (CIFAR training), each
/// image gets a pad-4 random crop and a coin-flip horizontal mirror, drawn
/// from the epoch RNG in batch order.
pub struct Batches<'a, T: Scalar> {
    ds: &'a Dataset<T>,
    plan: std::vec::IntoIter<Vec<u32>>,
    rng: Rng,
    augment: bool,
}

pub fn batches<T: Scalar>(
    ds: &Dataset<T>,
    batch_size: usize,
    seed: u64,
    augment: bool,
) -> Batches<'_, T> {
    Batches {
        ds,
        plan: plan_batches(ds.len(), batch_size, seed).into_iter(),
        rng: Rng::new(crate::rng::mix_seed(seed, 0x61_75_67)),
        augment,
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = (Tensor<T>, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        let idxs = self.plan.next()?;
        let (c, h, w) = self.ds.dims();
        let img_len = c * h * w;
        let mut data = Vec::with_capacity(idxs.len() * img_len);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let src = &self.ds.images.data()[i as usize * img_len..(i as usize + 1) * img_len];
            if self.augment {
                let dy = self.rng.below(9) as isize - 4;
                let dx = self.rng.below(9) as isize - 4;
                let flip = self.rng.chance(0.5);
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let sx = if flip { w - 1 - x } else { x };
                            let sy = y as isize + dy;
                            let sx = sx as isize + dx;
                            let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                T::zero()
                            } else {
                                src[ci * h * w + sy as usize * w + sx as usize]
                            };
                            data.push(v);
                        }
                    }
                }
            } else {
                data.extend_from_slice(src);
            }
            labels.push(self.ds.labels[i as usize]);
        }
        Some((Tensor::from_vec(&[idxs.len(), c, h, w], data), labels))
    }
}

pub mod synth {
    //! Deterministic synthetic datasets written in the real on-disk
    //! formats, for smoke tests and pipeline verification without the
    //! original archives. Each class paints a bright block at a
    //! class-specific position over noise, so small models can actually
    //! fit the data.

    use std::path::Path;

    use super::{CIFAR_PIXELS, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
    use crate::error::{Error, Result};
    use crate::rng::Rng;

    fn block_pixel(label: u8, x: usize, y: usize, h: usize, w: usize) -> bool {
        let bw = w / 7;
        let bx = 1 + (label as usize % 5) * (w - bw - 2) / 4;
        let by = 1 + (label as usize / 5) * (h / 2);
        x >= bx && x < bx + bw && y >= by && y < by + h / 3
    }

    fn write(path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Writes `train-images-idx3-ubyte` etc. under `dir`.
    pub fn write_mnist(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rng = Rng::new(seed);
        for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
            let mut images = Vec::with_capacity(16 + n * 784);
            images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            images.extend_from_slice(&(n as u32).to_be_bytes());
            images.extend_from_slice(&28u32.to_be_bytes());
            images.extend_from_slice(&28u32.to_be_bytes());
            let mut labels = Vec::with_capacity(8 + n);
            labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
            labels.extend_from_slice(&(n as u32).to_be_bytes());
            for i in 0..n {
                let label = (i % 10) as u8;
                labels.push(label);
                for y in 0..28 {
                    for x in 0..28 {
                        let noise = rng.below(40) as u8;
                        let v = if block_pixel(label, x, y, 28, 28) {
                            200u8.saturating_add(noise)
                        } else {
                            noise
                        };
                        images.push(v);
                    }
                }
            }
            write(&dir.join(format!("{prefix}-images-idx3-ubyte")), &images)?;
            write(&dir.join(format!("{prefix}-labels-idx1-ubyte")), &labels)?;
        }
        Ok(())
    }

    /// Writes the five training batch files plus `test_batch.bin` under
    /// `dir`, `n_per_batch` records each (test batch gets `n_test`).
    pub fn write_cifar10(dir: &Path, n_per_batch: usize, n_test: usize, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rng = Rng::new(seed);
        let mut serial = 0usize;
        let mut make = |n: usize, rng: &mut Rng| {
            let mut buf = Vec::with_capacity(n * (1 + CIFAR_PIXELS));
            for _ in 0..n {
                let label = (serial % 10) as u8;
                serial += 1;
                buf.push(label);
                for c in 0..3 {
                    for y in 0..32 {
                        for x in 0..32 {
                            let noise = rng.below(40) as u8;
                            let v = if block_pixel(label, x, y, 32, 32) && c == (label % 3) as usize
                            {
                                180u8.saturating_add(noise)
                            } else {
                                40 + noise
                            };
                            buf.push(v);
                        }
                    }
                }
            }
            buf
        };
        for i in 1..=5 {
            let buf = make(n_per_batch, &mut rng);
            write(&dir.join(format!("data_batch_{i}.bin")), &buf)?;
        }
        let buf = make(n_test, &mut rng);
        write(&dir.join("test_batch.bin"), &buf)?;
        Ok(())
    }
}
