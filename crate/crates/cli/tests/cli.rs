use std::path::Path;
use std::process::{Command, Output};

use stnet_core::analysis::{Checkpoint, TrainConfig, Trainer};
use stnet_core::data::{read_dataset, DEFAULT_SIGMA};

fn stnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) -> String {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out, "--count", "5", "--width", "24", "--height", "24"];
    args.extend_from_slice(extra);
    let o = stnet(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("manifest.txt").to_str().unwrap().to_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(stnet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(stnet(&["analyze", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(stnet(&["eval", "--data", "x"]).status.code(), Some(2));
    assert_eq!(stnet(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let o = stnet(&["eval", "--oracle", "--data", "/nonexistent/manifest.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn analyze_reports_tree_block_costs() {
    let o = stnet(&["analyze", "--kind", "tree", "--d", "18"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let record = text.lines().last().unwrap();
    assert!(record.contains("params_measured=1620") && record.contains("rf_max=17"));
    let std = stdout(&stnet(&["analyze", "--kind", "standard", "--d", "18"]));
    assert!(std.contains("params_measured=6156"));
}

#[test]
fn synth_then_oracle_eval_scores_zero_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &["--seed", "4"]);
    let samples = read_dataset(Path::new(&manifest), DEFAULT_SIGMA).unwrap();
    assert_eq!(samples.len(), 5);

    let export = dir.path().join("maps");
    let o = stnet(&["eval", "--oracle", "--data", &manifest, "--export", export.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().last().unwrap().starts_with("mae=0.0 mse=0.0 images=5"));
    let grid = std::fs::read_to_string(export.join("img_00000_density.txt")).unwrap();
    let header: Vec<&str> = grid.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(&header[..3], &["#", "24", "24"]);
    let mass: f64 = header[3].parse().unwrap();
    assert!((mass - samples[0].count() as f64).abs() < 1e-9);
    assert!(std::fs::read(export.join("img_00004_density.ppm")).unwrap().starts_with(b"P6"));
}

#[test]
fn zero_epoch_training_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "d_channels = 9\nenhancer_count = 2\nseed = 5\n").unwrap();
    let ckpt = dir.path().join("init.ckpt");
    let o = stnet(&["train", "--config", conf.to_str().unwrap(), "--epochs", "0", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut cfg = TrainConfig::load(&conf).unwrap();
    cfg.epochs = 0;
    cfg.checkpoint = Some(ckpt.clone());
    let expected = Trainer::new(&cfg).unwrap().checkpoint().to_bytes();
    assert_eq!(std::fs::read(&ckpt).unwrap(), expected);
    assert!(Checkpoint::load(&ckpt).is_ok());
}

#[test]
fn train_resume_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(&dir.path().join("train"), &["--seed", "1", "--min-count", "1", "--max-count", "6"]);
    let bg = synth(&dir.path().join("bg"), &["--seed", "2", "--background"]);
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "epochs = 1\nbatch_size = 2\nd_channels = 9\nenhancer_count = 2\ncrop = 16\n").unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("log.txt");
    let o = stnet(&[
        "train", "--config", conf.to_str().unwrap(), "--train", &train, "--val", &train, "--background", &bg,
        "--checkpoint", ckpt.to_str().unwrap(), "--log", log.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = stnet(&["train", "--resume", ckpt.to_str().unwrap(), "--epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = std::fs::read_to_string(&log).unwrap();
    assert_eq!(records.lines().count(), 1);
    assert!(records.starts_with("epoch=1 "));
    assert_eq!(Checkpoint::load(&ckpt).unwrap().epoch, 2);

    let o = stnet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &train]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().last().unwrap().contains("images=5"));
}

#[test]
fn gradcheck_passes_on_a_fresh_model() {
    let o = stnet(&["gradcheck", "--probes", "8", "--size", "16", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("passed=true"));
}
