//! `bnnkit` command line: train / sweep / search / analyze / export / infer.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bnnkit::binkernel::{export_packed, PackedModel};
use bnnkit::checkpoint;
use bnnkit::config::{parse_f64_list, parse_u64_list, ParsedConfig};
use bnnkit::data::{self, Dataset};
use bnnkit::exper::{
    self, append_jsonl, balance_stats, first_epoch_search, shift_sweep, slope_grid,
    threshold_bias_study, write_balance_csv, write_histogram_csv, write_slope_grid_csv,
    write_summary_csv, write_sweep_csv, EpochMetrics, ExperimentConfig, Histogram, RunRecord,
};
use bnnkit::models::{self, Activation};
use bnnkit::nn::{Mode, Model};
use bnnkit::tensor::Tensor;

const DATA_DIR_ENV: &str = "BNNKIT_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "bnnkit",
    version,
    about = "Binary neural network training, threshold-shift experiments and packed inference"
)]
struct Cli {
    /// Worker threads for sweeps (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's shift grid, e.g. "-1,0,1".
    #[arg(long, allow_hyphen_values = true)]
    shifts: Option<String>,
    /// Override the config's seed list, e.g. "1,2,3".
    #[arg(long)]
    seeds: Option<String>,
    /// Dataset directory (also via BNNKIT_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for records, CSVs and checkpoints.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run (first shift of the grid, first seed) and write a
    /// checkpoint plus a JSON-lines run record.
    Train(RunArgs),
    /// Train every (shift, seed) pair and write sweep CSVs. With
    /// trainable thresholds this is the threshold-vs-bias study and also
    /// writes effective-threshold histograms; with --slopes (resnet20ds)
    /// it runs the LeakyReLU slope grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// LeakyReLU negative-range slopes, e.g. "0,0.25,0.5,1".
        #[arg(long, allow_hyphen_values = true)]
        slopes: Option<String>,
    },
    /// One-epoch training per shift; picks the best shift by first-epoch
    /// train accuracy.
    Search(RunArgs),
    /// Balance ratios and effective thresholds of a trained checkpoint on
    /// one test batch.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fold activation thresholds into batch-norm biases, binarize and
    /// bit-pack weights, and write a packed model file.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output packed model path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run packed inference over a dataset split and report top-1
    /// accuracy.
    Infer {
        /// Packed model file written by `export`.
        #[arg(long)]
        packed: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Dataset split: "test" or "train".
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Also run the reference eval-mode model from --checkpoint and
        /// assert prediction-exact equality.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .ok();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(
    path: &Path,
    shifts: &Option<String>,
    seeds: &Option<String>,
) -> Result<ParsedConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut parsed =
        bnnkit::config::parse(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(s) = shifts {
        parsed.exp.shift_grid = parse_f64_list(s, 0, "--shifts")?;
    }
    if let Some(s) = seeds {
        parsed.exp.seeds = parse_u64_list(s, 0, "--seeds")?;
    }
    parsed.exp.validate()?;
    Ok(parsed)
}

fn resolve_data_dir(flag: Option<PathBuf>, cfg: &ParsedConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.data_dir.clone())
}

fn load_datasets(cfg: &ExperimentConfig, dir: &Path) -> Result<(Dataset<f32>, Dataset<f32>)> {
    data::load::<f32>(cfg.dataset, dir)
        .with_context(|| format!("loading {} from {}", cfg.dataset, dir.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn print_summary(summary: &[exper::ShiftSummary]) {
    println!("shift    mean_acc   std_acc    first_epoch  runs(done/failed)");
    for s in summary {
        println!(
            "{:<8} {:<10.4} {:<10.4} {:<12.4} {}/{}",
            s.shift, s.mean_acc, s.std_acc, s.mean_first_epoch_train_acc, s.completed, s.failed
        );
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(args) => {
            let parsed = load_config(&args.config, &args.shifts, &args.seeds)?;
            let data_dir = resolve_data_dir(args.data_dir, &parsed);
            let out_dir = args.out_dir.unwrap_or_else(|| parsed.out_dir.clone());
            let cfg = &parsed.exp;
            let (train, test) = load_datasets(cfg, &data_dir)?;
            let shift = cfg.shift_grid[0];
            let seed = cfg.seeds[0];
            println!(
                "training {} on {} (shift {shift}, seed {seed}, {} epochs)",
                stem(&args.config),
                cfg.dataset,
                cfg.epochs
            );
            let pretrained = match &cfg.init_from {
                Some(p) => Some(checkpoint::load(p)?),
                None => None,
            };
            let (record, model) = exper::train_one_observed(
                cfg,
                &train,
                &test,
                shift,
                seed,
                pretrained.as_deref(),
                &mut |m: &EpochMetrics| {
                    println!(
                        "epoch {:>3}  lr {:.5}  train_loss {:.4}  train_acc {:.4}  test_acc {:.4}",
                        m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc
                    );
                },
            )?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let name = format!("{}_shift{}_seed{}", stem(&args.config), shift, seed);
            let ckpt = out_dir.join(format!("{name}.ckpt"));
            checkpoint::save_model(&ckpt, &model)?;
            append_jsonl(&out_dir.join("runs.jsonl"), std::slice::from_ref(&record))?;
            match record.status {
                exper::RunStatus::Completed => {
                    println!(
                        "done: final test accuracy {:.4}; checkpoint {}",
                        record.final_test_acc.unwrap_or(f64::NAN),
                        ckpt.display()
                    );
                    Ok(())
                }
                exper::RunStatus::Diverged { epoch } => {
                    bail!("run diverged at epoch {epoch} (recorded in runs.jsonl)")
                }
            }
        }
        Cmd::Sweep { run: args, slopes } => {
            let parsed = load_config(&args.config, &args.shifts, &args.seeds)?;
            let data_dir = resolve_data_dir(args.data_dir, &parsed);
            let out_dir = args.out_dir.unwrap_or_else(|| parsed.out_dir.clone());
            let cfg = &parsed.exp;
            let (train, test) = load_datasets(cfg, &data_dir)?;
            let base = stem(&args.config);

            if let Some(slopes) = slopes {
                let slopes = parse_f64_list(&slopes, 0, "--slopes")?;
                let grid = slope_grid(cfg, &slopes, &train, &test)?;
                write_slope_grid_csv(&out_dir.join(format!("{base}_slope_grid.csv")), &grid.cells)?;
                append_jsonl(&out_dir.join("runs.jsonl"), &grid.records)?;
                for (slope, hists) in &grid.preact {
                    for (layer, hist) in hists {
                        let file = format!("{base}_preact_slope{slope}_{layer}.csv");
                        write_histogram_csv(&out_dir.join(file), hist)?;
                    }
                }
                println!("slope  shift    mean_acc   std_acc");
                for c in &grid.cells {
                    println!(
                        "{:<6} {:<8} {:<10.4} {:<10.4}",
                        c.slope, c.shift, c.mean_acc, c.std_acc
                    );
                }
                return Ok(());
            }

            let trainable = matches!(cfg.model.activation, Activation::Sign(c) if c.trainable);
            if trainable {
                let study = threshold_bias_study(cfg, &train, &test)?;
                write_sweep_csv(&out_dir.join(format!("{base}_sweep.csv")), &study.records)?;
                write_summary_csv(
                    &out_dir.join(format!("{base}_summary.csv")),
                    &exper_summary(cfg, &study.records),
                )?;
                append_jsonl(&out_dir.join("runs.jsonl"), &study.records)?;
                for init in &study.by_init {
                    write_histogram_csv(
                        &out_dir.join(format!("{base}_effective_th_init{}.csv", init.init)),
                        &init.histogram,
                    )?;
                    println!(
                        "init {:>6}: mean effective threshold {:.4}",
                        init.init, init.mean_effective
                    );
                }
                return Ok(());
            }

            let sweep = shift_sweep(cfg, &train, &test)?;
            write_sweep_csv(&out_dir.join(format!("{base}_sweep.csv")), &sweep.records)?;
            write_summary_csv(&out_dir.join(format!("{base}_summary.csv")), &sweep.summary)?;
            append_jsonl(&out_dir.join("runs.jsonl"), &sweep.records)?;
            print_summary(&sweep.summary);
            Ok(())
        }
        Cmd::Search(args) => {
            let parsed = load_config(&args.config, &args.shifts, &args.seeds)?;
            let data_dir = resolve_data_dir(args.data_dir, &parsed);
            let out_dir = args.out_dir.unwrap_or_else(|| parsed.out_dir.clone());
            let cfg = &parsed.exp;
            if cfg.shift_grid.len() < 2 {
                bail!("search needs a shift grid with at least 2 points");
            }
            let (train, test) = load_datasets(cfg, &data_dir)?;
            let res = first_epoch_search(cfg, &train, &test)?;
            append_jsonl(&out_dir.join("runs.jsonl"), &res.records)?;
            write_sweep_csv(
                &out_dir.join(format!("{}_search.csv", stem(&args.config))),
                &res.records,
            )?;
            println!("shift    first_epoch_train_acc");
            for (shift, acc) in &res.per_shift {
                println!("{shift:<8} {acc:.4}");
            }
            println!("best shift: {}", res.best_shift);
            Ok(())
        }
        Cmd::Analyze {
            config,
            checkpoint: ckpt_path,
            data_dir,
            out_dir,
        } => {
            let parsed = load_config(&config, &None, &None)?;
            let data_dir = resolve_data_dir(data_dir, &parsed);
            let out_dir = out_dir.unwrap_or_else(|| parsed.out_dir.clone());
            let cfg = &parsed.exp;
            let mut model: Model<f32> = models::build(
                &spec_with_first_shift(cfg),
                cfg.input_dims(),
                cfg.dataset.classes(),
                cfg.seeds[0],
            )?;
            checkpoint::load_into_model(&mut model, &ckpt_path)
                .with_context(|| format!("checkpoint {}", ckpt_path.display()))?;
            let (_, test) = load_datasets(cfg, &data_dir)?;
            let (x, _) = data::batches(&test, cfg.batch_size, 0, false)
                .next()
                .context("empty test split")?;
            let stats = balance_stats(&mut model, &x);
            let base = stem(&ckpt_path);
            write_balance_csv(&out_dir.join(format!("{base}_balance.csv")), &stats)?;
            println!("layer                      fraction_plus_one");
            for s in &stats {
                println!("{:<26} {:.4}", s.layer, s.fraction_plus_one);
            }
            let pairs = model.bn_sign_pairs();
            if !pairs.is_empty() {
                let effective: Vec<f64> = pairs
                    .iter()
                    .flat_map(|(_, beta, th)| {
                        th.iter().zip(beta).map(|(t, b)| t - b).collect::<Vec<_>>()
                    })
                    .collect();
                let hist = Histogram::build(&effective, -4.0, 4.0, 160);
                write_histogram_csv(&out_dir.join(format!("{base}_effective_th.csv")), &hist)?;
                let mean = effective.iter().sum::<f64>() / effective.len() as f64;
                println!("mean effective threshold (th - beta): {mean:.4}");
            }
            Ok(())
        }
        Cmd::Export {
            config,
            checkpoint: ckpt_path,
            out,
        } => {
            let parsed = load_config(&config, &None, &None)?;
            let cfg = &parsed.exp;
            let mut model: Model<f32> = models::build(
                &spec_with_first_shift(cfg),
                cfg.input_dims(),
                cfg.dataset.classes(),
                cfg.seeds[0],
            )?;
            checkpoint::load_into_model(&mut model, &ckpt_path)
                .with_context(|| format!("checkpoint {}", ckpt_path.display()))?;
            let folded = model.fold_thresholds()?;
            let packed = export_packed(&model, cfg.input_dims())?;
            packed.save(&out)?;
            println!(
                "folded {folded} activation threshold(s); wrote packed model {}",
                out.display()
            );
            Ok(())
        }
        Cmd::Infer {
            packed,
            config,
            split,
            data_dir,
            verify,
            checkpoint: ckpt_path,
        } => {
            let parsed = load_config(&config, &None, &None)?;
            let data_dir = resolve_data_dir(data_dir, &parsed);
            let cfg = &parsed.exp;
            let model = PackedModel::<f32>::load(&packed)?;
            let (train, test) = load_datasets(cfg, &data_dir)?;
            let ds = match split.as_str() {
                "test" => &test,
                "train" => &train,
                other => bail!("unknown split \"{other}\" (expected test or train)"),
            };
            let started = std::time::Instant::now();
            let preds = predict_packed(&model, ds, cfg.batch_size);
            let elapsed = started.elapsed().as_secs_f64();
            let correct = preds
                .iter()
                .zip(&ds.labels)
                .filter(|(p, &l)| **p == l as usize)
                .count();
            let acc = correct as f64 / ds.len() as f64;
            println!(
                "packed top-1 accuracy on {split}: {acc:.4} ({correct}/{})",
                ds.len()
            );
            println!(
                "inference time: {elapsed:.2}s ({:.0} images/s)",
                ds.len() as f64 / elapsed
            );

            if verify {
                let ckpt_path =
                    ckpt_path.context("--verify needs --checkpoint for the reference model")?;
                let mut reference: Model<f32> = models::build(
                    &spec_with_first_shift(cfg),
                    cfg.input_dims(),
                    cfg.dataset.classes(),
                    cfg.seeds[0],
                )?;
                checkpoint::load_into_model(&mut reference, &ckpt_path)?;
                reference.fold_thresholds()?;
                let ref_preds = predict_reference(&mut reference, ds, cfg.batch_size);
                let mismatches = preds.iter().zip(&ref_preds).filter(|(a, b)| a != b).count();
                if mismatches > 0 {
                    bail!("verification failed: {mismatches} prediction(s) differ from the reference model");
                }
                println!("verified: exact match ({} predictions)", preds.len());
            }
            Ok(())
        }
    }
}

/// Sweeps vary the shift per run; standalone commands use the grid's first
/// entry as the model's activation shift.
fn spec_with_first_shift(cfg: &ExperimentConfig) -> models::ModelSpec {
    let mut spec = cfg.model;
    spec.activation = spec.activation.with_shift(cfg.shift_grid[0]);
    spec
}

fn predict_packed(model: &PackedModel<f32>, ds: &Dataset<f32>, batch_size: usize) -> Vec<usize> {
    let (c, h, w) = ds.dims();
    let img_len = c * h * w;
    let mut preds = Vec::with_capacity(ds.len());
    let mut i = 0;
    while i < ds.len() {
        let n = batch_size.min(ds.len() - i);
        let x = Tensor::from_vec(
            &[n, c, h, w],
            ds.images.data()[i * img_len..(i + n) * img_len].to_vec(),
        );
        preds.extend(model.predict(&x));
        i += n;
    }
    preds
}

fn predict_reference(model: &mut Model<f32>, ds: &Dataset<f32>, batch_size: usize) -> Vec<usize> {
    let (c, h, w) = ds.dims();
    let img_len = c * h * w;
    let mut preds = Vec::with_capacity(ds.len());
    let mut i = 0;
    while i < ds.len() {
        let n = batch_size.min(ds.len() - i);
        let x = Tensor::from_vec(
            &[n, c, h, w],
            ds.images.data()[i * img_len..(i + n) * img_len].to_vec(),
        );
        let logits = model.forward(&x, Mode::Eval);
        preds.extend(bnnkit::nn::argmax_rows(&logits));
        i += n;
    }
    preds
}

fn exper_summary(cfg: &ExperimentConfig, records: &[RunRecord]) -> Vec<exper::ShiftSummary> {
    exper::summarize_shifts(&cfg.shift_grid, records)
}
