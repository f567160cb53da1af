use std::path::{Path, PathBuf};
use std::process::Command;

use image::{GrayImage, Luma, Rgb, RgbImage};
use stnet::checkpoint::Checkpoint;
use stnet::cli::run;
use stnet::train::LogRecord;

fn stnet(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("stnet").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &str = "\
[encoder]
width_multiplier = 0.125

[decoder]
width = 16
reduction = 4

[train]
lr = 0.001
batch_size = 2
epochs = 2
max_steps = 6
";

fn write_rasters(dir: &Path, side: u32) -> (PathBuf, PathBuf, PathBuf) {
    let a = RgbImage::from_fn(side, side, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
    let b = RgbImage::from_fn(side, side, |x, y| Rgb([(y % 256) as u8, (x % 256) as u8, 9]));
    let l = GrayImage::from_fn(side, side, |x, y| Luma([if (x / 50 + y / 50) % 2 == 0 { 255 } else { 0 }]));
    let paths = (dir.join("a.png"), dir.join("b.png"), dir.join("l.png"));
    a.save(&paths.0).unwrap();
    b.save(&paths.1).unwrap();
    l.save(&paths.2).unwrap();
    paths
}

#[test]
fn tile_counts_and_missing_label() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, l) = write_rasters(dir.path(), 512);
    let out = dir.path().join("tiles");
    let (code, stdout, _) = stnet(&["tile", "--a", s(&a), "--b", s(&b), "--label", s(&l), "--out", s(&out)]);
    assert_eq!(code, 0);
    assert_eq!(stdout.trim(), "4");
    assert!(out.join("A/1_1.png").is_file());
    assert!(out.join("label/0_1.png").is_file());

    let out2 = dir.path().join("tiles2");
    let (code, stdout, _) =
        stnet(&["tile", "--a", s(&a), "--b", s(&b), "--label", s(&l), "--stride", "128", "--out", s(&out2)]);
    assert_eq!(code, 0);
    assert_eq!(stdout.trim(), "9");

    let missing = dir.path().join("nope.png");
    let (code, _, err) = stnet(&["tile", "--a", s(&a), "--b", s(&b), "--label", s(&missing), "--out", s(&out)]);
    assert_ne!(code, 0);
    assert!(err.starts_with("error[ingestion]:"), "{err}");
    assert!(err.contains("nope.png"), "{err}");
}

#[test]
fn synth_is_deterministic_with_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    for d in [&x, &y] {
        let (code, stdout, _) = stnet(&["synth", "--out", s(d), "--n", "20", "--size", "32", "--seed", "4"]);
        assert_eq!(code, 0);
        assert_eq!(stdout.trim(), "train 14 val 3 test 3");
    }
    let (fx, fy) = (files_under(&x), files_under(&y));
    assert_eq!(fx.len(), 20 * 3);
    assert_eq!(fx, fy);
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(stnet(&["synth", "--out", s(&data), "--n", "12", "--size", "32", "--seed", "1"]).0, 0);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.path().join("run");
    let (code, stdout, err) =
        stnet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir), "--seed", "3"]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("steps 6"), "{stdout}");
    for f in ["config.toml", "train.log.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let echoed = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 3"), "{echoed}");
    let log = std::fs::read_to_string(run_dir.join("train.log.jsonl")).unwrap();
    let records: Vec<LogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count(), 6);
    assert!(records.iter().any(|r| matches!(r, LogRecord::Epoch { val: Some(_), .. })));

    // Re-running from the echoed config reproduces the log.
    let rerun = dir.path().join("rerun");
    let (code, _, err) = stnet(&["train", "--config", s(&run_dir.join("config.toml")), "--out", s(&rerun)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read(rerun.join("train.log.jsonl")).unwrap(), log.as_bytes());
    assert_eq!(std::fs::read(rerun.join("last.ckpt")).unwrap(), std::fs::read(run_dir.join("last.ckpt")).unwrap());

    let ckpt = run_dir.join("best.ckpt");
    let report = dir.path().join("report.json");
    let (code, stdout, err) = stnet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    for k in ["f1", "precision", "recall", "iou", "oa"] {
        let x = v[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }
    assert_eq!(std::fs::read_to_string(&report).unwrap(), stdout);

    let a = data.join("test/A/00010.png");
    let b = data.join("test/B/00010.png");
    let label = data.join("test/label/00010.png");
    let (mask, prob, overlay) = (dir.path().join("m.png"), dir.path().join("p.png"), dir.path().join("o.png"));
    let (code, _, err) = stnet(&[
        "predict", "--checkpoint", s(&ckpt), "--a", s(&a), "--b", s(&b), "--out-mask", s(&mask), "--out-prob", s(&prob),
        "--label", s(&label), "--out-overlay", s(&overlay),
    ]);
    assert_eq!(code, 0, "{err}");
    let m = image::open(&mask).unwrap().to_luma8();
    assert_eq!(m.dimensions(), (32, 32));
    assert!(m.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let p = image::open(&prob).unwrap();
    assert_eq!(p.color(), image::ColorType::L16);
    let o = image::open(&overlay).unwrap().to_rgb8();
    let allowed = [[255, 255, 255], [0, 0, 0], [255, 0, 0], [0, 255, 0]];
    assert!(o.pixels().all(|px| allowed.contains(&px.0)));

    let ck = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.train.seed, 3);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nseed = 5\nepochs = 7\n[data]\nroot = \"/nowhere\"\n").unwrap();
    let args = stnet::cli::TrainArgs {
        config: Some(cfg),
        data: Some(PathBuf::from("/elsewhere")),
        out: dir.path().join("o"),
        seed: Some(9),
        variant: None,
        epochs: None,
        max_steps: None,
    };
    let eff = stnet::cli::effective_train_config(&args).unwrap();
    assert_eq!(eff.train.seed, 9);
    assert_eq!(eff.train.epochs, 7);
    assert_eq!(eff.train.lr, 1e-4);
    assert_eq!(eff.data.root, PathBuf::from("/elsewhere"));
}

#[test]
fn error_lines_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    let (code, _, err) = stnet(&["profile", "--config", s(&bad)]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[config]:") && err.contains("train.learning_rate"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let (code, _, err) = stnet(&["eval", "--checkpoint", s(&dir.path().join("none.ckpt")), "--data", s(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[io]:"), "{err}");

    let garbage = dir.path().join("g.ckpt");
    std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
    let (code, _, err) = stnet(&["eval", "--checkpoint", s(&garbage), "--data", s(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[checkpoint]:"), "{err}");

    let (code, _, err) = stnet(&["synth", "--out", s(dir.path()), "--change-rate", "abc"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[usage]:"), "{err}");
}

#[test]
fn profile_reports_both_conventions() {
    let (code, stdout, _) = stnet(&["profile", "--size", "64", "--variant", "base"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let total = v["flops_total"].as_u64().unwrap();
    assert_eq!(v["flops_halved"].as_u64().unwrap(), total / 2);
    assert!(v["params_by_module"]["encoder"].as_u64().unwrap() > 0);
    assert_eq!(v["variant"], "base");
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_stnet");
    let ok = Command::new(exe).args(["profile", "--size", "32", "--variant", "base"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let usage = Command::new(exe).arg("nonsense").output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    let err = String::from_utf8(usage.stderr).unwrap();
    assert!(err.starts_with("error[usage]:"), "{err}");
    let data = Command::new(exe)
        .args(["predict", "--checkpoint", "/nonexistent.ckpt", "--a", "x", "--b", "y", "--out-mask", "z"])
        .output()
        .unwrap();
    assert_eq!(data.status.code(), Some(2));
}
