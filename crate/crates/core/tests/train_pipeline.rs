//! End-to-end training smoke tests on in-memory separable data.

mod common;

use bnnkit::data::Split;
use bnnkit::exper::{train_one, ExperimentConfig, RunStatus};
use bnnkit::models::{
    Activation, Arch, ExtraAct, GenHardtanhConfig, ModelSpec, Pooling, Precision, SignActConfig,
};
use bnnkit::optim::OptimizerKind;

use common::blob_dataset;

fn base_cfg(arch: Arch, precision: Precision) -> ExperimentConfig {
    let activation = match precision {
        Precision::Fp => Activation::GenHardtanh(GenHardtanhConfig::default()),
        _ => Activation::Sign(SignActConfig::default()),
    };
    ExperimentConfig {
        model: ModelSpec {
            arch,
            precision,
            activation,
            pooling: Pooling::Max,
            extra_act: ExtraAct::None,
            binarize_first_last: false,
        },
        dataset: bnnkit::data::DatasetId::Mnist,
        optimizer: OptimizerKind::Adam,
        lr: 0.01,
        momentum: 0.9,
        epochs: 3,
        batch_size: 32,
        warmup_epochs: 0,
        augment: false,
        shift_grid: vec![0.0],
        seeds: vec![1],
        record_distributions: false,
        init_from: None,
        init_fp_shift: 0.0,
    }
}

#[test]
fn binary_mlp2_learns_separable_blobs() {
    let train = blob_dataset(300, 11, Split::Train);
    let test = blob_dataset(100, 12, Split::Test);
    let cfg = base_cfg(Arch::Mlp2, Precision::Binary);
    let (r, _) = train_one(&cfg, &train, &test, 0.0, 1, None).unwrap();
    assert_eq!(r.status, RunStatus::Completed);
    let acc = r.final_test_acc.unwrap();
    assert!(acc > 0.6, "binary mlp2 should fit blobs, got {acc}");
}

#[test]
fn binary_lenet5_trains_and_improves_over_chance() {
    let train = blob_dataset(200, 13, Split::Train);
    let test = blob_dataset(80, 14, Split::Test);
    let mut cfg = base_cfg(Arch::Lenet5, Precision::Binary);
    cfg.epochs = 3;
    let (r, _) = train_one(&cfg, &train, &test, 0.0, 2, None).unwrap();
    assert_eq!(r.status, RunStatus::Completed);
    assert!(r.final_test_acc.unwrap() > 0.2, "{:?}", r.final_test_acc);
}

#[test]
fn vggsmall_runs_on_mnist_geometry_via_zero_pad() {
    // 28x28 inputs are padded to 32x32 inside the model so all three
    // poolings stay even.
    let train = blob_dataset(16, 15, Split::Train);
    let test = blob_dataset(8, 16, Split::Test);
    let mut cfg = base_cfg(Arch::VggSmall, Precision::Binary);
    cfg.epochs = 1;
    cfg.batch_size = 8;
    let (r, _) = train_one(&cfg, &train, &test, 0.5, 3, None).unwrap();
    assert_eq!(r.status, RunStatus::Completed);
    assert_eq!(r.epochs.len(), 1);
}

#[test]
fn pretrained_init_starts_above_scratch() {
    let train = blob_dataset(300, 21, Split::Train);
    let test = blob_dataset(100, 22, Split::Test);

    // Pretrain a full-precision model with a shifted hardtanh activation.
    let mut fp_cfg = base_cfg(Arch::Mlp2, Precision::Fp);
    fp_cfg.epochs = 4;
    let (fp_record, fp_model) = train_one(&fp_cfg, &train, &test, 1.0, 5, None).unwrap();
    assert_eq!(fp_record.status, RunStatus::Completed);
    let source: Vec<(String, bnnkit::tensor::Tensor<f32>)> = fp_model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();

    let mut bin_cfg = base_cfg(Arch::Mlp2, Precision::Binary);
    bin_cfg.epochs = 1;
    bin_cfg.init_fp_shift = 1.0;
    let (scratch, _) = train_one(&bin_cfg, &train, &test, 0.6, 5, None).unwrap();
    let (warm, _) = train_one(&bin_cfg, &train, &test, 0.6, 5, Some(&source)).unwrap();
    assert_eq!(warm.pretrain_fp_shift, Some(1.0));
    assert!(
        warm.first_epoch_train_acc.unwrap() > scratch.first_epoch_train_acc.unwrap(),
        "warm {:?} vs scratch {:?}",
        warm.first_epoch_train_acc,
        scratch.first_epoch_train_acc
    );
}

#[test]
fn resnet20ds_trains_one_epoch_on_cifar_geometry() {
    let mut rng = bnnkit::rng::Rng::new(9);
    let n = 16;
    let images = bnnkit::tensor::Tensor::from_vec(
        &[n, 3, 32, 32],
        (0..n * 3 * 32 * 32).map(|_| rng.normal() as f32).collect(),
    );
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let ds = bnnkit::data::Dataset {
        images,
        labels,
        split: Split::Train,
    };
    let mut cfg = base_cfg(Arch::Resnet20ds, Precision::Binary);
    cfg.dataset = bnnkit::data::DatasetId::Cifar10;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.model.extra_act = ExtraAct::PRelu { init_slope: 0.25 };
    let (r, _) = train_one(&cfg, &ds, &ds, 0.0, 4, None).unwrap();
    assert_eq!(r.status, RunStatus::Completed);
}

#[test]
fn threshold_study_reports_per_init_distributions() {
    let train = blob_dataset(128, 41, Split::Train);
    let test = blob_dataset(48, 42, Split::Test);
    let mut cfg = base_cfg(Arch::Mlp2, Precision::Binary);
    cfg.model.activation = Activation::Sign(SignActConfig {
        threshold_shift: 0.0,
        trainable: true,
        per_channel: true,
        ste_clip: 1.0,
    });
    cfg.epochs = 1;
    cfg.shift_grid = vec![-1.0, 1.0];
    let study = bnnkit::exper::threshold_bias_study(&cfg, &train, &test).unwrap();
    assert_eq!(study.by_init.len(), 2);
    assert_eq!(study.records.len(), 2);
    // After one epoch the effective thresholds stay near their inits.
    let lo = &study.by_init[0];
    let hi = &study.by_init[1];
    assert!(lo.mean_effective < hi.mean_effective);
    assert!(
        (lo.mean_effective - -1.0).abs() < 0.5,
        "{}",
        lo.mean_effective
    );
    assert!(
        (hi.mean_effective - 1.0).abs() < 0.5,
        "{}",
        hi.mean_effective
    );
    assert!(lo.histogram.counts.iter().sum::<u64>() > 0);

    // Requires trainable thresholds.
    let plain = base_cfg(Arch::Mlp2, Precision::Binary);
    assert!(bnnkit::exper::threshold_bias_study(&plain, &train, &test).is_err());
}

#[test]
fn slope_grid_sweeps_and_snapshots_preactivations() {
    let mut rng = bnnkit::rng::Rng::new(19);
    let n = 12;
    let images = bnnkit::tensor::Tensor::from_vec(
        &[n, 3, 32, 32],
        (0..n * 3 * 32 * 32).map(|_| rng.normal() as f32).collect(),
    );
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let ds = bnnkit::data::Dataset {
        images,
        labels,
        split: Split::Train,
    };
    let mut cfg = base_cfg(Arch::Resnet20ds, Precision::Binary);
    cfg.dataset = bnnkit::data::DatasetId::Cifar10;
    cfg.epochs = 1;
    cfg.batch_size = 12;
    let grid = bnnkit::exper::slope_grid(&cfg, &[0.5], &ds, &ds).unwrap();
    assert_eq!(grid.cells.len(), 1);
    assert_eq!(grid.cells[0].slope, 0.5);
    let (slope, hists) = &grid.preact[0];
    assert_eq!(*slope, 0.5);
    assert_eq!(hists.len(), 18, "one pre-activation histogram per block");

    // Wrong architecture refused.
    let bad = base_cfg(Arch::Mlp2, Precision::Binary);
    assert!(bnnkit::exper::slope_grid(&bad, &[0.5], &ds, &ds).is_err());
}

#[test]
fn sgd_path_trains() {
    let train = blob_dataset(200, 31, Split::Train);
    let test = blob_dataset(64, 32, Split::Test);
    let mut cfg = base_cfg(Arch::Mlp2, Precision::Binary);
    cfg.optimizer = OptimizerKind::SgdMomentum;
    cfg.lr = 0.1;
    let (r, _) = train_one(&cfg, &train, &test, 0.0, 8, None).unwrap();
    assert_eq!(r.status, RunStatus::Completed);
    assert!(r.final_test_acc.unwrap() > 0.3, "{:?}", r.final_test_acc);
}
