use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prospr_cli::records::{read_rows, RESULTS_FILE};
use prospr_core::pruning::{read_mask, Granularity};

const TINY: &str = "\
[experiment]
model = mlp
hidden = 16
dataset = synthetic

[synthetic]
classes = 3
per_class = 40
dim = 6
separation = 3.0

[prune]
meta_batch_size = 24
sparsity = 80

[train]
epochs = 2
batch_size = 16
lr_drops = 1
";

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.conf");
    std::fs::write(&config, TINY).unwrap();
    Workspace { dir, config }
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_prospr"));
        cmd.args(args).arg("--config").arg(&self.config).env("RUST_LOG", "warn");
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn out_arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn mnist_dir() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k").to_string_lossy().into_owned()
}

#[test]
fn prune_is_bit_reproducible() {
    let ws = workspace();
    for name in ["a", "b"] {
        ws.ok(&["prune", "--seed", "3", "--sparsity", "90", "--out", &ws.out_arg(name)]);
    }
    let a = std::fs::read(ws.path("a/mask.bin")).unwrap();
    let b = std::fs::read(ws.path("b/mask.bin")).unwrap();
    assert_eq!(a, b);
    for artifact in ["init.ckpt", "saliency.json", "prune.json"] {
        assert!(ws.path("a").join(artifact).exists(), "{artifact}");
    }
}

#[test]
fn sparsity_flag_keeps_the_exact_count() {
    let ws = workspace();
    ws.ok(&["prune", "--sparsity", "95", "--out", &ws.out_arg("p")]);
    let mask = read_mask(&ws.path("p/mask.bin")).unwrap();
    // 6*16 + 16*3 prunable weights
    let m = 144;
    assert_eq!(mask.bits().len(), m);
    assert_eq!(mask.retained(), (m * 50 + 500) / 1000);
}

#[test]
fn structured_conv_mask_has_one_entry_per_channel() {
    let ws = workspace();
    let data = ws.path("cifar");
    std::fs::create_dir(&data).unwrap();
    let mut bytes = Vec::new();
    for i in 0..20u32 {
        bytes.push((i % 10) as u8);
        bytes.extend((0..3072u32).map(|j| (j.wrapping_mul(31).wrapping_add(i * 17) % 251) as u8));
    }
    for name in ["data_batch_1", "data_batch_2", "data_batch_3", "data_batch_4", "data_batch_5", "test_batch"] {
        std::fs::write(data.join(format!("{name}.bin")), &bytes).unwrap();
    }
    let conf = ws.path("vgg.conf");
    std::fs::write(&conf, "[experiment]\nmodel = small-vgg\ndataset = cifar10\n[prune]\nmeta_batch_size = 10\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_prospr"))
        .args(["prune", "--meta-steps", "1", "--granularity", "structured", "--sparsity", "50"])
        .arg("--config")
        .arg(&conf)
        .arg("--data-dir")
        .arg(&data)
        .arg("--out")
        .arg(ws.path("vgg"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mask = read_mask(&ws.path("vgg/mask.bin")).unwrap();
    assert_eq!(mask.spec().granularity, Granularity::PerChannel);
    assert_eq!(mask.bits().len(), 16 + 16 + 32 + 32 + 64 + 64 + 10);
}

#[test]
fn run_equals_prune_then_train() {
    let ws = workspace();
    ws.ok(&["run", "--out", &ws.out_arg("run")]);
    ws.ok(&["prune", "--out", &ws.out_arg("split")]);
    ws.ok(&["train", "--out", &ws.out_arg("split")]);
    for f in ["mask.bin", "init.ckpt", "trained.ckpt"] {
        assert_eq!(std::fs::read(ws.path("run").join(f)).unwrap(), std::fs::read(ws.path("split").join(f)).unwrap(), "{f}");
    }
    let a = read_rows(&ws.path("run").join(RESULTS_FILE)).unwrap();
    let b = read_rows(&ws.path("split").join(RESULTS_FILE)).unwrap();
    assert_eq!(a[0].final_acc.to_bits(), b[0].final_acc.to_bits());
    assert_eq!(a[0].run_id, b[0].run_id);
}

#[test]
fn results_header_is_stable_and_append_only() {
    let ws = workspace();
    ws.ok(&["run", "--out", &ws.out_arg("r")]);
    ws.ok(&["run", "--force", "--out", &ws.out_arg("r")]);
    let text = std::fs::read_to_string(ws.path("r").join(RESULTS_FILE)).unwrap();
    assert!(text.starts_with("run_id,criterion,M,density,seed,final_acc,train_seconds,collapse_flag,"), "{text}");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn existing_outputs_need_force() {
    let ws = workspace();
    ws.ok(&["prune", "--out", &ws.out_arg("o")]);
    let again = ws.run(&["prune", "--out", &ws.out_arg("o")]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    ws.ok(&["prune", "--force", "--out", &ws.out_arg("o")]);
}

#[test]
fn train_reports_missing_and_mismatched_masks() {
    let ws = workspace();
    let missing = ws.run(&["train", "--out", &ws.out_arg("nothing")]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("mask.bin: not found"), "{}", stderr(&missing));

    ws.ok(&["prune", "--out", &ws.out_arg("narrow")]);
    let wide = ws.path("wide.conf");
    std::fs::write(&wide, TINY.replace("hidden = 16", "hidden = 20")).unwrap();
    let pruned = Command::new(env!("CARGO_BIN_EXE_prospr"))
        .args(["prune", "--config", wide.to_str().unwrap(), "--out", &ws.out_arg("wide")])
        .output()
        .unwrap();
    assert_eq!(pruned.status.code(), Some(0), "{}", stderr(&pruned));
    let mask = ws.path("narrow/mask.bin");
    let init = ws.path("wide/init.ckpt");
    let out = Command::new(env!("CARGO_BIN_EXE_prospr"))
        .args(["train", "--config", wide.to_str().unwrap(), "--out", &ws.out_arg("mixed")])
        .args(["--mask", mask.to_str().unwrap(), "--init-weights", init.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mask does not match model"), "{}", stderr(&out));
    assert!(stderr(&out).contains("layer01.weight"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = workspace();
    let unknown_flag = ws.run(&["prune", "--sparsityy", "90"]);
    assert_eq!(unknown_flag.status.code(), Some(1));

    let bad = ws.path("bad.conf");
    std::fs::write(&bad, "[prune]\nsparsity = 90\nmomentum = 0.9\n[train]\nepoch = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_prospr")).args(["prune", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("[prune] momentum") && msg.contains("[train] epoch"), "{msg}");

    let zero = ws.run(&["prune", "--meta-steps", "0", "--out", &ws.out_arg("z")]);
    assert_eq!(zero.status.code(), Some(1));
    assert!(stderr(&zero).contains("meta_steps must be >= 1"), "{}", stderr(&zero));
    let dense = ws.run(&["prune", "--sparsity", "100", "--out", &ws.out_arg("z")]);
    assert_eq!(dense.status.code(), Some(1));
}

#[test]
fn step_sweep_with_zero_test_emits_four_rows() {
    let ws = workspace();
    ws.ok(&["sweep", "--axis", "M", "--values", "0-test,1,2,3", "--jobs", "2", "--out", &ws.out_arg("m")]);
    let rows = read_rows(&ws.path("m").join(RESULTS_FILE)).unwrap();
    let mut steps: Vec<usize> = rows.iter().map(|r| r.meta_steps).collect();
    steps.sort();
    assert_eq!(steps, vec![0, 1, 2, 3]);
    assert!(ws.path("m/summary.csv").exists());
    let plain = ws.run(&["sweep", "--axis", "M", "--values", "0,1", "--out", &ws.out_arg("m0")]);
    assert_eq!(plain.status.code(), Some(1));
}

#[test]
fn criterion_and_grid_sweeps_emit_one_row_per_point() {
    let ws = workspace();
    ws.ok(&["sweep", "--axis", "criterion", "--out", &ws.out_arg("c")]);
    let rows = read_rows(&ws.path("c").join(RESULTS_FILE)).unwrap();
    let mut crits: Vec<String> = rows.iter().map(|r| r.criterion.clone()).collect();
    crits.sort();
    assert_eq!(crits, ["magnitude", "prospr", "prospr-fo", "random", "snip"]);

    ws.ok(&["sweep", "--axis", "sparsity-grid", "--jobs", "4", "--out", &ws.out_arg("g")]);
    let rows = read_rows(&ws.path("g").join(RESULTS_FILE)).unwrap();
    assert_eq!(rows.len(), 18);
    let m = 144;
    for r in &rows {
        let tenths = (r.sparsity * 10.0).round() as usize;
        let k = (m * (1000 - tenths) + 500) / 1000;
        assert!((r.density - k as f64 / m as f64).abs() < 1e-12, "{r:?}");
    }
}

#[test]
fn seed_sweep_reports_mean_and_std() {
    let ws = workspace();
    let stdout = ws.ok(&["sweep", "--axis", "seed", "--seeds", "5", "--out", &ws.out_arg("s")]);
    assert!(stdout.contains('±'), "{stdout}");
    let rows = read_rows(&ws.path("s").join(RESULTS_FILE)).unwrap();
    assert_eq!(rows.len(), 5);
    let summary = std::fs::read_to_string(ws.path("s/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2, "{summary}");
    assert!(summary.lines().next().unwrap().contains("mean_acc,std_acc"));
    let report = ws.ok(&["report", "--out", &ws.out_arg("s")]);
    assert!(report.lines().nth(1).unwrap().contains("   5 "), "{report}");
}

#[test]
fn default_gradient_check_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_prospr"))
        .args(["check-grad", "--data-dir", &mnist_dir()])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}{}", stderr(&out));
    assert!(stdout.contains("max relative error") && stdout.contains("median relative error"), "{stdout}");
    assert!(stdout.trim_end().ends_with("PASS"), "{stdout}");
}
