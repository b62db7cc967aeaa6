//! End-to-end tests of the `bnnkit` binary against synthetic datasets
//! written in the real on-disk formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bnnkit::data::synth;

const BIN: &str = env!("CARGO_BIN_EXE_bnnkit");

struct Sandbox {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        synth::write_mnist(&root.join("data"), 192, 64, 42).unwrap();
        Sandbox { _dir: dir, root }
    }

    fn write_config(&self, name: &str, body: &str) -> PathBuf {
        let path = self.root.join(name);
        let full = format!(
            "{body}data_dir = {}\nout_dir = {}\n",
            self.root.join("data").display(),
            self.root.join("runs").display()
        );
        std::fs::write(&path, full).unwrap();
        path
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .current_dir(&self.root)
            .env_remove("BNNKIT_DATA_DIR")
            .output()
            .expect("spawn bnnkit")
    }

    fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMOKE: &str = "arch = mlp2\ndataset = mnist\nepochs = 1\nbatch_size = 32\nseeds = 7\n";

fn final_acc_of(jsonl: &Path, line_idx: usize) -> f64 {
    let text = std::fs::read_to_string(jsonl).unwrap();
    let line = text.lines().nth(line_idx).unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v["final_test_acc"].as_f64().unwrap()
}

#[test]
fn train_smoke_writes_checkpoint_and_record() {
    let sb = Sandbox::new();
    let cfg = sb.write_config("smoke.conf", SMOKE);
    let out = sb.run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("epoch   0"), "{text}");
    assert!(sb.runs_dir().join("smoke_shift0_seed7.ckpt").exists());

    let jsonl = sb.runs_dir().join("runs.jsonl");
    let line = std::fs::read_to_string(&jsonl).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(v["status"], "completed");
    assert_eq!(v["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(v["version"], 1);
    // resolved config is echoed and re-parseable
    let echoed = v["resolved_config"].as_str().unwrap();
    assert!(bnnkit::config::parse(echoed).is_ok());
}

#[test]
fn train_rerun_is_deterministic() {
    let sb = Sandbox::new();
    let cfg = sb.write_config("det.conf", SMOKE);
    assert!(sb
        .run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    assert!(sb
        .run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let jsonl = sb.runs_dir().join("runs.jsonl");
    assert_eq!(final_acc_of(&jsonl, 0), final_acc_of(&jsonl, 1));
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let sb = Sandbox::new();
    let cfg = sb.write_config(
        "typo.conf",
        "arch = mlp2\ndataset = mnist\nepochs = 1\nshfit = 1\n",
    );
    let out = sb.run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("shfit"), "{err}");
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn missing_dataset_names_expected_files() {
    let sb = Sandbox::new();
    let cfg = sb.write_config("nodata.conf", SMOKE);
    let out = sb.run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        sb.root.join("empty").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
}

#[test]
fn sweep_single_point_single_seed_writes_one_row() {
    let sb = Sandbox::new();
    let cfg = sb.write_config("sweep1.conf", SMOKE);
    let out = sb.run(&["sweep", "--config", cfg.to_str().unwrap(), "--shifts", "0"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(sb.runs_dir().join("sweep1_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}"); // version comment + header + one row
    assert!(lines[0].starts_with('#'));
    assert!(lines[2].starts_with("0,7,"), "{csv}");
}

#[test]
fn search_prints_chosen_shift_and_per_shift_accuracies() {
    let sb = Sandbox::new();
    let cfg = sb.write_config("search.conf", SMOKE);
    let out = sb.run(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--shifts",
        "-1,0,1",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("best shift:"), "{text}");
    assert!(text.contains("first_epoch_train_acc"), "{text}");
    assert!(sb.runs_dir().join("search_search.csv").exists());
}

#[test]
fn analyze_writes_one_balance_row_per_binary_activation() {
    let sb = Sandbox::new();
    let cfg = sb.write_config("ana.conf", SMOKE);
    assert!(sb
        .run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let ckpt = sb.runs_dir().join("ana_shift0_seed7.ckpt");
    let out = sb.run(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(sb.runs_dir().join("ana_shift0_seed7_balance.csv")).unwrap();
    // mlp2 has exactly one binary activation
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn analyze_rejects_wrong_architecture_checkpoint() {
    let sb = Sandbox::new();
    let cfg = sb.write_config("a.conf", SMOKE);
    assert!(sb
        .run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let ckpt = sb.runs_dir().join("a_shift0_seed7.ckpt");
    let other = sb.write_config(
        "b.conf",
        "arch = lenet5\ndataset = mnist\nepochs = 1\nbatch_size = 32\n",
    );
    let out = sb.run(&[
        "analyze",
        "--config",
        other.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("checkpoint"), "{}", stderr(&out));
}

#[test]
fn export_then_infer_verify_reports_exact_match() {
    let sb = Sandbox::new();
    // Shifted thresholds + binarized first/last for real packed kernels.
    let cfg = sb.write_config(
        "full.conf",
        "arch = mlp2\ndataset = mnist\nepochs = 2\nbatch_size = 32\nseeds = 7\n\
         shifts = 0.8\nbinarize_first_last = true\n",
    );
    assert!(sb
        .run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let ckpt = sb.runs_dir().join("full_shift0.8_seed7.ckpt");
    assert!(ckpt.exists());

    let packed = sb.root.join("full.pack");
    let out = sb.run(&[
        "export",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        packed.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(
        stdout(&out).contains("folded 1 activation threshold"),
        "{}",
        stdout(&out)
    );

    let out = sb.run(&[
        "infer",
        "--packed",
        packed.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--verify",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("packed top-1 accuracy"), "{text}");
    assert!(text.contains("verified: exact match"), "{text}");
}

#[test]
fn export_of_fp_model_is_refused() {
    let sb = Sandbox::new();
    let cfg = sb.write_config(
        "fp.conf",
        "arch = mlp2\ndataset = mnist\nepochs = 1\nbatch_size = 32\n\
         precision = fp\nactivation = gen_hardtanh\n",
    );
    assert!(sb
        .run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let ckpt = sb.runs_dir().join("fp_shift0_seed1.ckpt");
    let out = sb.run(&[
        "export",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        sb.root.join("fp.pack").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nothing to pack"), "{}", stderr(&out));
}
