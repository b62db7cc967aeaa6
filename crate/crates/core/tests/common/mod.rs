//! Shared helpers for integration tests: finite-difference gradient
//! verification and in-memory synthetic datasets.
#![allow(dead_code)] // each test binary uses a subset
#![allow(clippy::needless_range_loop)]

use bnnkit::data::{Dataset, Split};
use bnnkit::nn::{softmax_xent, Mode, Model};
use bnnkit::rng::Rng;
use bnnkit::tensor::Tensor;

/// Central finite differences against the analytic backward pass, in f64.
///
/// Parameters whose +/-h evaluations straddle a non-smooth point (clamp
/// edge, pooling argmax switch, negative-slope kink) are detected by
/// comparing the two one-sided differences and skipped; everything else
/// must match within `rel_tol`.
pub struct FdReport {
    pub checked: usize,
    pub skipped_straddling: usize,
    pub max_rel_err: f64,
}

pub fn finite_diff_check(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    labels: &[u8],
    rel_tol: f64,
) -> FdReport {
    let h = 1e-5;

    let stats_snapshot: Vec<(String, Tensor<f64>)> = model
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| n.contains(".bn.running_"))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let restore_stats = |model: &mut Model<f64>| {
        for (name, dst) in model.named_tensors_mut() {
            if let Some((_, src)) = stats_snapshot.iter().find(|(n, _)| *n == name) {
                dst.data_mut().copy_from_slice(src.data());
            }
        }
    };

    let loss_of = |model: &mut Model<f64>| -> f64 {
        let logits = model.forward(x, Mode::Train);
        let (loss, _) = softmax_xent(&logits, labels);
        restore_stats(model);
        loss
    };

    // Analytic gradients.
    model.zero_grads();
    let logits = model.forward(x, Mode::Train);
    let (_, grad) = softmax_xent(&logits, labels);
    model.backward(&grad);
    restore_stats(model);
    let analytic: Vec<Vec<f64>> = model
        .params_mut()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();

    let l0 = loss_of(model);

    let mut checked = 0;
    let mut skipped = 0;
    let mut max_rel: f64 = 0.0;
    let n_params = analytic.len();
    for pi in 0..n_params {
        let n = analytic[pi].len();
        for i in 0..n {
            let orig = {
                let mut params = model.params_mut();
                let v = params[pi].value.data()[i];
                params[pi].value.data_mut()[i] = v + h;
                v
            };
            let l_plus = loss_of(model);
            model.params_mut()[pi].value.data_mut()[i] = orig - h;
            let l_minus = loss_of(model);
            model.params_mut()[pi].value.data_mut()[i] = orig;

            let g_plus = (l_plus - l0) / h;
            let g_minus = (l0 - l_minus) / h;
            if (g_plus - g_minus).abs() > 1e-4 * g_plus.abs().max(g_minus.abs()).max(1.0) {
                skipped += 1;
                continue;
            }
            let fd = (l_plus - l_minus) / (2.0 * h);
            let a = analytic[pi][i];
            let denom = a.abs().max(fd.abs());
            let rel = if denom < 1e-9 {
                0.0
            } else {
                (a - fd).abs() / denom
            };
            max_rel = max_rel.max(rel);
            assert!(
                rel <= rel_tol,
                "param {pi} element {i}: analytic {a} vs fd {fd} (rel {rel:.2e})"
            );
            checked += 1;
        }
    }
    FdReport {
        checked,
        skipped_straddling: skipped,
        max_rel_err: max_rel,
    }
}

/// Class-separable random images in MNIST geometry, built in memory.
pub fn blob_dataset(n: usize, seed: u64, split: Split) -> Dataset<f32> {
    let mut rng = Rng::new(seed);
    let mut data = vec![0.0f32; n * 784];
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let label = (s % 10) as u8;
        labels.push(label);
        let bx = 2 + (label as usize % 5) * 4;
        let by = 3 + (label as usize / 5) * 12;
        for y in 0..28 {
            for x in 0..28 {
                let on = x >= bx && x < bx + 5 && y >= by && y < by + 8;
                let base = if on { 1.2 } else { -0.4 };
                data[s * 784 + y * 28 + x] = base + rng.normal() as f32 * 0.25;
            }
        }
    }
    Dataset {
        images: Tensor::from_vec(&[n, 1, 28, 28], data),
        labels,
        split,
    }
}

pub fn random_pm1(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n)
        .map(|_| if rng.chance(0.5) { 1.0 } else { -1.0 })
        .collect()
}
