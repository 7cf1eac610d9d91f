use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vcenet::config::Config;
use vcenet::io;

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.conf");
const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.conf");

fn vcenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcenet")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a short training run; returns (data dir, checkpoint).
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    assert!(vcenet(&["synth", "--out", s(&data), "--n", "12", "--size", "48", "--seed", "3"]).status.success());
    let out = dir.join("run");
    let o = vcenet(&[
        "train",
        "--config",
        SMOKE,
        "--override",
        &format!("data.root={}", data.display()),
        "--override",
        &format!("out_dir={}", out.display()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (data, out.join("checkpoint.bin"))
}

#[test]
fn shipped_configs_parse() {
    for path in [SMOKE, DESK] {
        let cfg = Config::load(Path::new(path), &[]).unwrap();
        assert_eq!(cfg.hash(), Config::load(Path::new(path), &[]).unwrap().hash());
    }
}

#[test]
fn minimal_config_fills_defaults() {
    let cfg = Config::parse("", &[]).unwrap();
    assert_eq!(cfg.get("mam.upsample"), "bilinear");
    assert_eq!(cfg.get("train.optimizer"), "sgd");
    assert_eq!(cfg.hash(), Config::parse("# nothing\n\n", &[]).unwrap().hash());
}

#[test]
fn typos_are_rejected_by_name() {
    for text in ["learning_rat = 0.01", "train.learning_rat = 0.01"] {
        let err = Config::parse(text, &[]).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
    }
    let err = Config::parse("train.batch_size = -3", &[]).unwrap_err().to_string();
    assert!(err.contains("train.batch_size"), "{err}");
}

#[test]
fn file_and_overrides_hash_alike() {
    let text = "train.learning_rate = 0.0010\nmodel.channels = 32\nseed = 4\n";
    let overrides: Vec<String> =
        ["train.learning_rate=1e-3", "model.channels=32", "seed=4"].iter().map(|s| s.to_string()).collect();
    let a = Config::parse(text, &[]).unwrap();
    let b = Config::parse("", &overrides).unwrap();
    assert_eq!(a.canonical(), b.canonical());
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), Config::parse("", &[]).unwrap().hash());
}

#[test]
fn predict_keeps_size_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = trained(dir.path());
    let image = data.join("images/000000.png");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for out in [&a, &b] {
        let o = vcenet(&["predict", "--image", s(&image), "--checkpoint", s(&ck), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let mask = image::open(&a).unwrap();
    assert_eq!((mask.width(), mask.height()), (48, 48));
    assert!(mask.to_luma8().pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));

    // a non-square input of another size passes through as well
    let wide = dir.path().join("wide.png");
    image::RgbImage::from_fn(70, 52, |x, y| image::Rgb([(x * 3) as u8, (y * 4) as u8, 90])).save(&wide).unwrap();
    let out = dir.path().join("wide_mask.png");
    assert!(vcenet(&["predict", "--image", s(&wide), "--checkpoint", s(&ck), "--out", s(&out)]).status.success());
    let m = image::open(&out).unwrap();
    assert_eq!((m.width(), m.height()), (70, 52));
}

#[test]
fn truncated_checkpoint_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = trained(dir.path());
    let bytes = fs::read(&ck).unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let out = dir.path().join("mask.png");
    let o = vcenet(&["predict", "--image", s(&data.join("images/000001.png")), "--checkpoint", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().contains(".tmp")).collect();
    assert!(leftovers.is_empty());
}

#[test]
fn checkpoint_files_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let loaded = io::load_checkpoint(&ck).unwrap();
    let again = dir.path().join("again.bin");
    io::save_checkpoint(&again, &loaded).unwrap();
    assert_eq!(fs::read(&ck).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn run_outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let run = ck.parent().unwrap();
    let metrics = io::read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 2);
    assert_eq!(metrics[0].split, "train");
    assert_eq!(metrics[1].split, "test");
    assert_eq!(fs::read_to_string(run.join("losses.txt")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(run.join("audit.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("typo.conf");
    fs::write(&conf, "learning_rat = 0.01\n").unwrap();
    let o = vcenet(&["train", "--config", s(&conf)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    assert_eq!(vcenet(&["train", "--config", s(&dir.path().join("missing.conf"))]).status.code(), Some(1));
    assert_eq!(vcenet(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(vcenet(&["synth", "--out", s(&dir.path().join("x")), "--style", "plaid"]).status.code(), Some(1));
    assert_eq!(vcenet(&["--version"]).status.code(), Some(0));
}

#[test]
fn run_header_is_logged_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(vcenet(&["synth", "--out", s(&data), "--n", "8", "--size", "48"]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_vcenet"))
        .args(["train", "--config", SMOKE, "--seed", "9"])
        .arg("--override")
        .arg(format!("data.root={}", data.display()))
        .arg("--override")
        .arg(format!("out_dir={}", dir.path().join("run").display()))
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    let log = String::from_utf8_lossy(&o.stderr);
    let first_step = log.find("iteration 1/").unwrap();
    for needle in ["vcenet 0.", "seed 9", "config hash ", "params total: "] {
        let at = log.find(needle).unwrap_or_else(|| panic!("missing `{needle}` in\n{log}"));
        assert!(at < first_step);
    }
}
