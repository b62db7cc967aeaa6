//! Experiment procedures: full training runs, threshold-shift sweeps,
//! first-epoch shift search, activation-balance statistics, trainable
//! threshold studies and the LeakyReLU slope grid.
//!
//! Runs inside a sweep are independent and execute in parallel; results are
//! aggregated in (shift, seed) order so every artifact is deterministic.
//! All run math is `f32`, matching the checkpoint format.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{batches, Dataset, DatasetId};
use crate::error::{Error, Result};
use crate::models::{self, Activation, Arch, ExtraAct, InputDims, ModelSpec, Precision};
use crate::nn::{argmax_rows, softmax_xent, BalanceProbe, BalanceStat, Mode, Model, SignObserver};
use crate::optim::{lr_at, Optimizer, OptimizerKind};
use crate::rng::mix_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RECORD_VERSION: u32 = 1;

/// Full description of one experiment (one model family, one dataset, a
/// shift grid and a seed list).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dataset: DatasetId,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub augment: bool,
    pub shift_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub record_distributions: bool,
    /// Optional checkpoint of a pretrained model used as the
    /// initialization point, plus the activation shift it was trained with.
    pub init_from: Option<PathBuf>,
    pub init_fp_shift: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.shift_grid.is_empty() {
            return Err(Error::Config("shift grid must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> InputDims {
        let (c, h, w) = self.dataset.dims();
        InputDims { c, h, w }
    }

    /// Canonical key = value form with all defaults applied. The config
    /// parser accepts exactly this document, so any run is re-runnable
    /// from the copy echoed into its record.
    pub fn resolved_text(&self) -> String {
        let m = &self.model;
        let arch = match m.arch {
            Arch::Mlp2 => "mlp2",
            Arch::Lenet5 => "lenet5",
            Arch::VggSmall => "vggsmall",
            Arch::Resnet20ds => "resnet20ds",
        };
        let precision = match m.precision {
            Precision::Fp => "fp",
            Precision::BinaryWeight => "binary_weight",
            Precision::Binary => "binary",
        };
        let (activation, ste_clip, trainable, per_channel, y_off, range) = match m.activation {
            Activation::Sign(c) => ("sign", c.ste_clip, c.trainable, c.per_channel, 0.0, 1.0),
            Activation::GenHardtanh(c) => ("gen_hardtanh", 1.0, false, false, c.y_offset, c.range),
            Activation::Relu6 => ("relu6", 1.0, false, false, 0.0, 1.0),
        };
        let pooling = match m.pooling {
            models::Pooling::Max => "max",
            models::Pooling::Avg => "avg",
        };
        let (extra_act, extra_slope) = match m.extra_act {
            ExtraAct::None => ("none", 0.25),
            ExtraAct::PRelu { init_slope } => ("prelu", init_slope),
            ExtraAct::Leaky { slope } => ("leaky", slope),
        };
        let optimizer = match self.optimizer {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd",
        };
        let join = |xs: &[f64]| {
            xs.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let seeds = self
            .seeds
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        for (k, v) in [
            ("arch", arch.to_string()),
            ("precision", precision.to_string()),
            ("activation", activation.to_string()),
            ("shifts", join(&self.shift_grid)),
            ("ste_clip", ste_clip.to_string()),
            ("trainable_threshold", trainable.to_string()),
            ("per_channel_threshold", per_channel.to_string()),
            ("act_y_offset", y_off.to_string()),
            ("act_range", range.to_string()),
            ("pooling", pooling.to_string()),
            ("extra_act", extra_act.to_string()),
            ("extra_act_slope", extra_slope.to_string()),
            ("binarize_first_last", m.binarize_first_last.to_string()),
            ("dataset", self.dataset.to_string()),
            ("augment", self.augment.to_string()),
            ("optimizer", optimizer.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("seeds", seeds),
            (
                "record_distributions",
                self.record_distributions.to_string(),
            ),
            (
                "init_from",
                self.init_from
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("init_fp_shift", self.init_fp_shift.to_string()),
        ] {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", fnv1a64(self.resolved_text().as_bytes()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The loss went non-finite; the run is recorded as failed, never
    /// retried or silently dropped.
    Diverged {
        epoch: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

/// Per-channel values of one adjacent (batch-norm, sign) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub layer: String,
    pub beta: Vec<f64>,
    pub th: Vec<f64>,
    /// Effective threshold `th - beta` per channel.
    pub effective: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub config_hash: String,
    pub resolved_config: String,
    pub shift: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
    pub epochs: Vec<EpochMetrics>,
    pub first_epoch_train_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub balance: Vec<BalanceStat>,
    pub pairs: Vec<PairRecord>,
    pub pretrain_fp_shift: Option<f64>,
    /// Wall-clock seconds; the only field excluded from the determinism
    /// guarantee.
    pub wall_time_s: f64,
}

/// Top-1 accuracy and mean cross-entropy in eval mode over sequential
/// batches.
pub fn evaluate(model: &mut Model<f32>, ds: &Dataset<f32>, batch_size: usize) -> (f64, f64) {
    let (c, h, w) = ds.dims();
    let img_len = c * h * w;
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut i = 0usize;
    while i < ds.len() {
        let n = batch_size.min(ds.len() - i);
        let x = Tensor::from_vec(
            &[n, c, h, w],
            ds.images.data()[i * img_len..(i + n) * img_len].to_vec(),
        );
        let logits = model.forward(&x, Mode::Eval);
        let (loss, _) = softmax_xent(&logits, &ds.labels[i..i + n]);
        loss_sum += loss as f64 * n as f64;
        for (p, &label) in argmax_rows(&logits).iter().zip(&ds.labels[i..i + n]) {
            if *p == label as usize {
                correct += 1;
            }
        }
        i += n;
    }
    (correct as f64 / ds.len() as f64, loss_sum / ds.len() as f64)
}

/// Fraction of +1 per binary activation layer over one batch.
pub fn balance_stats(model: &mut Model<f32>, x: &Tensor<f32>) -> Vec<BalanceStat> {
    let mut probe = BalanceProbe::default();
    model.forward_observed(x, Mode::Eval, &mut probe);
    probe.stats
}

fn pair_records(model: &Model<f32>) -> Vec<PairRecord> {
    model
        .bn_sign_pairs()
        .into_iter()
        .map(|(layer, beta, th)| {
            let effective = th.iter().zip(&beta).map(|(t, b)| t - b).collect();
            PairRecord {
                layer,
                beta,
                th,
                effective,
            }
        })
        .collect()
}

/// Trains one (shift, seed) run to completion and returns its record plus
/// the trained model.
pub fn train_one(
    cfg: &ExperimentConfig,
    train: &Dataset<f32>,
    test: &Dataset<f32>,
    shift: f64,
    seed: u64,
    pretrained: Option<&[(String, Tensor<f32>)]>,
) -> Result<(RunRecord, Model<f32>)> {
    train_one_observed(cfg, train, test, shift, seed, pretrained, &mut |_| {})
}

/// [`train_one`] with a per-epoch callback (the CLI prints live metrics).
#[allow(clippy::too_many_arguments)]
pub fn train_one_observed(
    cfg: &ExperimentConfig,
    train: &Dataset<f32>,
    test: &Dataset<f32>,
    shift: f64,
    seed: u64,
    pretrained: Option<&[(String, Tensor<f32>)]>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<(RunRecord, Model<f32>)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut spec = cfg.model;
    spec.activation = spec.activation.with_shift(shift);
    let mut model: Model<f32> =
        models::build(&spec, cfg.input_dims(), cfg.dataset.classes(), seed)?;
    let mut pretrain_fp_shift = None;
    if let Some(src) = pretrained {
        let init = models::init_from_pretrained(&mut model, src, cfg.init_fp_shift)?;
        pretrain_fp_shift = Some(init.fp_shift);
    }

    let mut opt: Optimizer<f32> = Optimizer::new(cfg.optimizer, cfg.momentum);
    let trainable_th = matches!(spec.activation, Activation::Sign(c) if c.trainable);

    let mut record = RunRecord {
        version: RECORD_VERSION,
        config_hash: cfg.hash_hex(),
        resolved_config: cfg.resolved_text(),
        shift,
        seed,
        status: RunStatus::Completed,
        epochs: Vec::with_capacity(cfg.epochs),
        first_epoch_train_acc: None,
        final_test_acc: None,
        balance: Vec::new(),
        pairs: Vec::new(),
        pretrain_fp_shift,
        wall_time_s: 0.0,
    };

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.epochs, cfg.lr, cfg.warmup_epochs);
        let batch_seed = mix_seed(seed, epoch as u64 + 1);
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut loss_sum = 0.0f64;
        for (x, y) in batches(train, cfg.batch_size, batch_seed, cfg.augment) {
            let logits = model.forward(&x, Mode::Train);
            let (loss, grad) = softmax_xent(&logits, &y);
            if !loss.is_finite() {
                record.status = RunStatus::Diverged { epoch };
                break 'epochs;
            }
            for (p, &label) in argmax_rows(&logits).iter().zip(&y) {
                if *p == label as usize {
                    correct += 1;
                }
            }
            seen += y.len();
            loss_sum += loss as f64 * y.len() as f64;
            model.backward(&grad);
            if cfg!(debug_assertions) && trainable_th {
                model.assert_threshold_bias_mirror();
            }
            opt.step(&mut model.params_mut(), lr as f32);
        }
        let train_acc = correct as f64 / seen as f64;
        let (test_acc, test_loss) = evaluate(&mut model, test, cfg.batch_size);
        if epoch == 0 {
            record.first_epoch_train_acc = Some(train_acc);
        }
        record.epochs.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc,
            test_loss,
            test_acc,
        });
        on_epoch(record.epochs.last().unwrap());
    }

    if record.status == RunStatus::Completed {
        record.final_test_acc = record.epochs.last().map(|e| e.test_acc);
        record.pairs = pair_records(&model);
        if cfg.record_distributions {
            let (x, _) = batches(test, cfg.batch_size, 0, false)
                .next()
                .expect("non-empty test split");
            record.balance = balance_stats(&mut model, &x);
        }
    }
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok((record, model))
}

/// Runs every (shift, seed) pair in parallel, aggregating in grid order.
fn run_pairs(
    cfg: &ExperimentConfig,
    train: &Dataset<f32>,
    test: &Dataset<f32>,
    keep_model: impl Fn(f64, u64) -> bool + Sync,
) -> Result<Vec<(RunRecord, Option<Model<f32>>)>> {
    cfg.validate()?;
    let pretrained = match &cfg.init_from {
        Some(path) => Some(checkpoint::load(path)?),
        None => None,
    };
    let pairs: Vec<(f64, u64)> = cfg
        .shift_grid
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    pairs
        .par_iter()
        .map(|&(shift, seed)| {
            let (rec, model) = train_one(cfg, train, test, shift, seed, pretrained.as_deref())?;
            let keep = keep_model(shift, seed);
            Ok((rec, keep.then_some(model)))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftSummary {
    pub shift: f64,
    /// Mean final test accuracy over completed runs.
    pub mean_acc: f64,
    /// Population standard deviation over completed runs (0 for one run).
    pub std_acc: f64,
    pub mean_first_epoch_train_acc: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub summary: Vec<ShiftSummary>,
}

/// Per-shift aggregation of run records (completed runs only feed the
/// mean/std; failed runs are counted).
pub fn summarize_shifts(shift_grid: &[f64], records: &[RunRecord]) -> Vec<ShiftSummary> {
    shift_grid
        .iter()
        .map(|&shift| {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.shift == shift).collect();
            let done: Vec<&&RunRecord> = runs
                .iter()
                .filter(|r| r.status == RunStatus::Completed)
                .collect();
            let accs: Vec<f64> = done.iter().filter_map(|r| r.final_test_acc).collect();
            let firsts: Vec<f64> = done
                .iter()
                .filter_map(|r| r.first_epoch_train_acc)
                .collect();
            let mean = |xs: &[f64]| {
                if xs.is_empty() {
                    f64::NAN
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };
            let mean_acc = mean(&accs);
            let std_acc = if accs.len() <= 1 {
                0.0
            } else {
                (accs.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / accs.len() as f64)
                    .sqrt()
            };
            ShiftSummary {
                shift,
                mean_acc,
                std_acc,
                mean_first_epoch_train_acc: mean(&firsts),
                completed: done.len(),
                failed: runs.len() - done.len(),
            }
        })
        .collect()
}

/// Trains one model per (shift, seed) and reports the mean and standard
/// deviation of final test accuracy per shift.
pub fn shift_sweep(
    cfg: &ExperimentConfig,
    train: &Dataset<f32>,
    test: &Dataset<f32>,
) -> Result<SweepResult> {
    let records: Vec<RunRecord> = run_pairs(cfg, train, test, |_, _| false)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let summary = summarize_shifts(&cfg.shift_grid, &records);
    Ok(SweepResult { records, summary })
}

/// Argmax of first-epoch train accuracy with ties broken toward the
/// smaller absolute shift (then the smaller shift).
pub fn pick_best_shift(per_shift: &[(f64, f64)]) -> f64 {
    assert!(!per_shift.is_empty());
    let mut best = per_shift[0];
    for &(shift, acc) in &per_shift[1..] {
        let better = acc > best.1
            || (acc == best.1
                && (shift.abs() < best.0.abs() || (shift.abs() == best.0.abs() && shift < best.0)));
        if better {
            best = (shift, acc);
        }
    }
    best.0
}

#[derive(Debug)]
pub struct SearchResult {
    pub best_shift: f64,
    /// (shift, mean first-epoch train accuracy) per grid point.
    pub per_shift: Vec<(f64, f64)>,
    pub records: Vec<RunRecord>,
}

/// Trains each grid shift for exactly one epoch and picks the shift with
/// the best first-epoch train accuracy.
pub fn first_epoch_search(
    cfg: &ExperimentConfig,
    train: &Dataset<f32>,
    test: &Dataset<f32>,
) -> Result<SearchResult> {
    let mut one = cfg.clone();
    one.epochs = 1;
    let records: Vec<RunRecord> = run_pairs(&one, train, test, |_, _| false)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let summary = summarize_shifts(&one.shift_grid, &records);
    let per_shift: Vec<(f64, f64)> = summary
        .iter()
        .map(|s| (s.shift, s.mean_first_epoch_train_acc))
        .collect();
    Ok(SearchResult {
        best_shift: pick_best_shift(&per_shift),
        per_shift,
        records,
    })
}

/// Fixed-bin histogram that clamps out-of-range values into the edge bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(hi > lo && bins > 0);
        Histogram {
            lo,
            bin_width: (hi - lo) / bins as f64,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let raw = ((v - self.lo) / self.bin_width).floor();
        let idx = (raw.max(0.0) as usize).min(self.counts.len() - 1);
        self.counts[idx] += 1;
    }

    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut h = Self::new(lo, hi, bins);
        for &v in values {
            h.add(v);
        }
        h
    }

    /// (bin_left, count) rows.
    pub fn rows(&self) -> Vec<(f64, u64)> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (self.lo + i as f64 * self.bin_width, c))
            .collect()
    }
}

#[derive(Debug)]
pub struct InitSummary {
    pub init: f64,
    /// Mean effective threshold (th - beta) over all pair channels and seeds.
    pub mean_effective: f64,
    pub histogram: Histogram,
}

#[derive(Debug)]
pub struct StudyResult {
    pub records: Vec<RunRecord>,
    pub by_init: Vec<InitSummary>,
}

/// Trains with trainable per-channel thresholds for every init value in the
/// shift grid and reports final per-channel (beta, th) pairs plus the
/// distribution of effective thresholds per init.
pub fn threshold_bias_study(
    cfg: &ExperimentConfig,
    train: &Dataset<f32>,
    test: &Dataset<f32>,
) -> Result<StudyResult> {
    match cfg.model.activation {
        Activation::Sign(c) if c.trainable && c.per_channel => {}
        _ => {
            return Err(Error::Config(
                "threshold_bias_study requires trainable per-channel thresholds".into(),
            ))
        }
    }
    let records: Vec<RunRecord> = run_pairs(cfg, train, test, |_, _| false)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let by_init = cfg
        .shift_grid
        .iter()
        .map(|&init| {
            let effective: Vec<f64> = records
                .iter()
                .filter(|r| r.shift == init && r.status == RunStatus::Completed)
                .flat_map(|r| r.pairs.iter().flat_map(|p| p.effective.iter().copied()))
                .collect();
            let mean_effective = if effective.is_empty() {
                f64::NAN
            } else {
                effective.iter().sum::<f64>() / effective.len() as f64
            };
            InitSummary {
                init,
                mean_effective,
                histogram: Histogram::build(&effective, -4.0, 4.0, 160),
            }
        })
        .collect();
    Ok(StudyResult { records, by_init })
}

/// Observer building per-layer histograms of the values entering each
/// binary activation.
pub struct PreactProbe {
    pub hists: Vec<(String, Histogram)>,
    lo: f64,
    hi: f64,
    bins: usize,
}

impl PreactProbe {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        PreactProbe {
            hists: Vec::new(),
            lo,
            hi,
            bins,
        }
    }
}

impl<T: Scalar> SignObserver<T> for PreactProbe {
    fn observe(&mut self, layer: &str, input: &Tensor<T>, _output: &Tensor<T>) {
        let mut h = Histogram::new(self.lo, self.hi, self.bins);
        for &v in input.data() {
            h.add(v.as_f64());
        }
        self.hists.push((layer.to_string(), h));
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeCell {
    pub slope: f64,
    pub shift: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Debug)]
pub struct SlopeGridResult {
    pub cells: Vec<SlopeCell>,
    pub records: Vec<RunRecord>,
    /// Per slope: pre-activation histograms of the shift-0 model (first
    /// seed), captured on one test batch after training.
    pub preact: Vec<(f64, Vec<(String, Histogram)>)>,
}

/// For each negative-range slope, runs a shift sweep with a LeakyReLU
/// layer at the end of every residual block.
pub fn slope_grid(
    cfg: &ExperimentConfig,
    slopes: &[f64],
    train: &Dataset<f32>,
    test: &Dataset<f32>,
) -> Result<SlopeGridResult> {
    if cfg.model.arch != Arch::Resnet20ds {
        return Err(Error::Config(
            "slope_grid requires the resnet20ds architecture".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut all_records = Vec::new();
    let mut preact = Vec::new();
    let first_seed = cfg.seeds[0];
    for &slope in slopes {
        let mut sub = cfg.clone();
        sub.model.extra_act = ExtraAct::Leaky { slope };
        let results = run_pairs(&sub, train, test, |shift, seed| {
            shift == 0.0 && seed == first_seed
        })?;
        let mut snapshot_model = None;
        let mut records = Vec::with_capacity(results.len());
        for (rec, model) in results {
            if let Some(m) = model {
                snapshot_model = Some(m);
            }
            records.push(rec);
        }
        for s in summarize_shifts(&sub.shift_grid, &records) {
            cells.push(SlopeCell {
                slope,
                shift: s.shift,
                mean_acc: s.mean_acc,
                std_acc: s.std_acc,
            });
        }
        if let Some(mut model) = snapshot_model {
            let (x, _) = batches(test, cfg.batch_size, 0, false)
                .next()
                .expect("non-empty test split");
            let mut probe = PreactProbe::new(-8.0, 8.0, 160);
            model.forward_observed(&x, Mode::Eval, &mut probe);
            preact.push((slope, probe.hists));
        }
        all_records.extend(records);
    }
    Ok(SlopeGridResult {
        cells,
        records: all_records,
        preact,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

// ---------------------------------------------------------------------------
// Artifacts. Every file starts with a format-version line; CSV versions are
// `#`-prefixed comments so the files stay directly loadable by plotting
// tools.
// ---------------------------------------------------------------------------

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Appends one JSON line per record; each line carries its own `version`.
pub fn append_jsonl(path: &Path, records: &[RunRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("record serialization: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_sweep_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# bnnkit sweep-csv v1").map_err(|e| Error::io(path, e))?;
    writeln!(f, "shift,seed,final_test_acc,first_epoch_train_acc,status")
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let status = match r.status {
            RunStatus::Completed => "completed".to_string(),
            RunStatus::Diverged { epoch } => format!("diverged@{epoch}"),
        };
        writeln!(
            f,
            "{},{},{},{},{}",
            r.shift,
            r.seed,
            r.final_test_acc.map(|v| v.to_string()).unwrap_or_default(),
            r.first_epoch_train_acc
                .map(|v| v.to_string())
                .unwrap_or_default(),
            status
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_summary_csv(path: &Path, summary: &[ShiftSummary]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# bnnkit sweep-summary-csv v1").map_err(|e| Error::io(path, e))?;
    writeln!(
        f,
        "shift,mean_acc,std_acc,mean_first_epoch_train_acc,completed,failed"
    )
    .map_err(|e| Error::io(path, e))?;
    for s in summary {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            s.shift, s.mean_acc, s.std_acc, s.mean_first_epoch_train_acc, s.completed, s.failed
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_balance_csv(path: &Path, stats: &[BalanceStat]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# bnnkit balance-csv v1").map_err(|e| Error::io(path, e))?;
    writeln!(f, "layer,fraction_plus_one").map_err(|e| Error::io(path, e))?;
    for s in stats {
        writeln!(f, "{},{}", s.layer, s.fraction_plus_one).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# bnnkit histogram-csv v1").map_err(|e| Error::io(path, e))?;
    writeln!(f, "bin_left,count").map_err(|e| Error::io(path, e))?;
    for (left, count) in hist.rows() {
        writeln!(f, "{left},{count}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_slope_grid_csv(path: &Path, cells: &[SlopeCell]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# bnnkit slope-grid-csv v1").map_err(|e| Error::io(path, e))?;
    writeln!(f, "slope,shift,mean_acc,std_acc").map_err(|e| Error::io(path, e))?;
    for c in cells {
        writeln!(f, "{},{},{},{}", c.slope, c.shift, c.mean_acc, c.std_acc)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Pooling, SignActConfig};

    fn tiny_dataset(n: usize, seed: u64) -> Dataset<f32> {
        // Class-separable blobs on a 1x8x8 grid.
        let mut rng = crate::rng::Rng::new(seed);
        let mut data = Vec::with_capacity(n * 64);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 4) as u8;
            labels.push(label);
            for p in 0..64 {
                let (y, x) = (p / 8, p % 8);
                let on = match label {
                    0 => y < 4 && x < 4,
                    1 => y < 4 && x >= 4,
                    2 => y >= 4 && x < 4,
                    _ => y >= 4 && x >= 4,
                };
                let base = if on { 1.0 } else { -0.5 };
                data.push(base + rng.normal() as f32 * 0.3);
            }
        }
        Dataset {
            images: Tensor::from_vec(&[n, 1, 8, 8], data),
            labels,
            split: crate::data::Split::Train,
        }
    }

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSpec {
                arch: Arch::Mlp2,
                precision: Precision::Binary,
                activation: Activation::Sign(SignActConfig::default()),
                pooling: Pooling::Max,
                extra_act: ExtraAct::None,
                binarize_first_last: false,
            },
            dataset: DatasetId::Mnist, // dims overridden by the datasets below
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            momentum: 0.9,
            epochs: 2,
            batch_size: 16,
            warmup_epochs: 0,
            augment: false,
            shift_grid: vec![0.0],
            seeds: vec![7],
            record_distributions: true,
            init_from: None,
            init_fp_shift: 0.0,
        }
    }

    // train_one derives input dims from cfg.dataset; for the in-memory
    // 8x8 fixture we train a model built by hand instead. Easier: wrap the
    // fixture into MNIST-shaped tensors.
    fn mnist_shaped(n: usize, seed: u64) -> Dataset<f32> {
        let small = tiny_dataset(n, seed);
        let mut data = vec![0.0f32; n * 28 * 28];
        for s in 0..n {
            for y in 0..8 {
                for x in 0..8 {
                    data[s * 784 + (y + 10) * 28 + (x + 10)] =
                        small.images.data()[s * 64 + y * 8 + x];
                }
            }
        }
        Dataset {
            images: Tensor::from_vec(&[n, 1, 28, 28], data),
            labels: small.labels,
            split: small.split,
        }
    }

    #[test]
    fn determinism_same_config_same_metrics() {
        let train = mnist_shaped(64, 1);
        let test = mnist_shaped(32, 2);
        let cfg = tiny_cfg();
        let (a, _) = train_one(&cfg, &train, &test, 0.5, 7, None).unwrap();
        let (b, _) = train_one(&cfg, &train, &test, 0.5, 7, None).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.final_test_acc, b.final_test_acc);
        assert_eq!(a.balance, b.balance);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.config_hash, b.config_hash);
    }

    #[test]
    fn record_shape_matches_config() {
        let train = mnist_shaped(48, 3);
        let test = mnist_shaped(16, 4);
        let cfg = tiny_cfg();
        let (r, _) = train_one(&cfg, &train, &test, 0.0, 1, None).unwrap();
        assert_eq!(r.status, RunStatus::Completed);
        assert_eq!(r.epochs.len(), cfg.epochs);
        assert!(r.final_test_acc.is_some());
        assert_eq!(r.version, RECORD_VERSION);
        assert!(!r.balance.is_empty());
        assert!(r
            .balance
            .iter()
            .all(|b| (0.0..=1.0).contains(&b.fraction_plus_one)));
        assert_eq!(r.pairs.len(), 1, "mlp2 has one bn+sign pair");
    }

    #[test]
    fn diverged_run_is_recorded_not_dropped() {
        let train = mnist_shaped(48, 3);
        let test = mnist_shaped(16, 4);
        // Batch norm keeps binary nets finite under any moderate blowup, so
        // push the weights past f32 range to force inf/NaN statistics.
        let mut cfg = tiny_cfg();
        cfg.lr = 1e38;
        cfg.epochs = 3;
        let (r, _) = train_one(&cfg, &train, &test, 0.0, 1, None).unwrap();
        assert!(
            matches!(r.status, RunStatus::Diverged { .. }),
            "{:?}",
            r.status
        );
        assert!(r.final_test_acc.is_none());
    }

    #[test]
    fn sweep_identical_seeds_identical_accuracies() {
        let train = mnist_shaped(48, 5);
        let test = mnist_shaped(16, 6);
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        cfg.seeds = vec![3, 3];
        let sweep = shift_sweep(&cfg, &train, &test).unwrap();
        assert_eq!(sweep.records.len(), 2);
        assert_eq!(
            sweep.records[0].final_test_acc,
            sweep.records[1].final_test_acc
        );
        assert_eq!(sweep.summary[0].std_acc, 0.0);

        cfg.seeds = vec![3];
        let single = shift_sweep(&cfg, &train, &test).unwrap();
        assert_eq!(single.summary[0].std_acc, 0.0, "one seed, zero std");
    }

    #[test]
    fn adam_mirror_makes_threshold_equal_negated_bias() {
        let train = mnist_shaped(64, 9);
        let test = mnist_shaped(16, 10);
        let mut cfg = tiny_cfg();
        cfg.model.activation = Activation::Sign(SignActConfig {
            threshold_shift: 0.0,
            trainable: true,
            per_channel: true,
            ste_clip: 1.0,
        });
        cfg.epochs = 3;
        let (r, _) = train_one(&cfg, &train, &test, 0.0, 11, None).unwrap();
        let pair = &r.pairs[0];
        for (t, b) in pair.th.iter().zip(&pair.beta) {
            assert_eq!(*t, -*b, "th must equal -beta exactly under Adam");
        }
    }

    #[test]
    fn pick_best_shift_argmax_and_ties() {
        assert_eq!(pick_best_shift(&[(0.0, 0.5)]), 0.0);
        assert_eq!(
            pick_best_shift(&[(0.0, 0.50), (1.0, 0.55), (2.0, 0.53)]),
            1.0
        );
        // tie toward smaller |shift|
        assert_eq!(pick_best_shift(&[(-1.0, 0.5), (0.5, 0.5), (2.0, 0.4)]), 0.5);
        // exact +/- tie toward the smaller (negative) shift
        assert_eq!(pick_best_shift(&[(-1.0, 0.5), (1.0, 0.5)]), -1.0);
    }

    #[test]
    fn search_returns_grid_means() {
        let train = mnist_shaped(48, 12);
        let test = mnist_shaped(16, 13);
        let mut cfg = tiny_cfg();
        cfg.shift_grid = vec![0.0, 0.5];
        let res = first_epoch_search(&cfg, &train, &test).unwrap();
        assert_eq!(res.per_shift.len(), 2);
        assert!(cfg.shift_grid.contains(&res.best_shift));
        // one-epoch runs regardless of cfg.epochs
        assert!(res.records.iter().all(|r| r.epochs.len() == 1));
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // monotone but nonlinear is still rank-perfect
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_bins_and_rows() {
        let h = Histogram::build(&[-10.0, 0.05, 0.15, 9.0], 0.0, 1.0, 10);
        assert_eq!(h.counts[0], 2); // -10 clamped into the first bin
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[9], 1); // 9 clamped into the last bin
        let rows = h.rows();
        assert_eq!(rows.len(), 10);
        assert!((rows[1].0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn resolved_text_is_stable_and_hashable() {
        let cfg = tiny_cfg();
        let t1 = cfg.resolved_text();
        let t2 = cfg.resolved_text();
        assert_eq!(t1, t2);
        assert_eq!(cfg.hash_hex().len(), 16);
        let mut other = cfg.clone();
        other.lr = 0.02;
        assert_ne!(cfg.hash_hex(), other.hash_hex());
    }

    #[test]
    fn artifact_files_have_version_headers() {
        let dir = tempfile::tempdir().unwrap();
        let train = mnist_shaped(32, 1);
        let test = mnist_shaped(16, 2);
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let sweep = shift_sweep(&cfg, &train, &test).unwrap();

        let csv = dir.path().join("sweep.csv");
        write_sweep_csv(&csv, &sweep.records).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("# bnnkit sweep-csv v1\n"), "{text}");
        assert_eq!(text.lines().count(), 2 + sweep.records.len());

        let jsonl = dir.path().join("runs.jsonl");
        append_jsonl(&jsonl, &sweep.records).unwrap();
        let line = std::fs::read_to_string(&jsonl).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["status"], "completed");

        let hist = Histogram::build(&[0.1, 0.2], 0.0, 1.0, 4);
        let hp = dir.path().join("h.csv");
        write_histogram_csv(&hp, &hist).unwrap();
        assert!(std::fs::read_to_string(&hp)
            .unwrap()
            .starts_with("# bnnkit histogram-csv v1\nbin_left,count\n"));
    }
}
