use std::path::Path;
use std::process::{Command, Output};

use dair::checkpoint::{Checkpoint, PARAM};
use dair::image_io::read_png;

const TINY: [&str; 6] = ["--set", "channels=8,8,16,16", "--set", "heads=2", "--set", "reduction=4"];

fn dair(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dair")).current_dir(dir).env("DAIR_LOG", "warn").args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = dair(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Tiny dataset, a VAE and a network with `steps` updates each.
fn pipeline(dir: &Path, steps: &str) {
    ok(dir, &["synth", "--classes", "noise,haze", "--per-class", "2", "--size", "16", "--base-count", "2", "--seed", "3", "--out", "data"]);
    let mut pre = vec!["pretrain-vae", "--data", "data", "--out", "vae", "--steps", steps, "--patch", "16", "--batch", "2"];
    pre.extend(TINY);
    ok(dir, &pre);
    ok(dir, &["train", "--data", "data", "--vae", "vae", "--out", "run1", "--steps", steps]);
}

#[test]
fn synth_writes_counted_pairs_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--classes", "noise,haze,rain,lowlight", "--per-class", "8", "--size", "16", "--seed", "7", "--out", "ds"]);
    let index = std::fs::read_to_string(d.path().join("ds/index.tsv")).unwrap();
    assert_eq!(index.lines().count(), 33);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("ds/manifest-synth.json")).unwrap()).unwrap();
    assert_eq!(m["metrics"]["pairs"], 32);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["outputs"].as_object().unwrap().len(), 65);
}

#[test]
fn usage_and_io_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&dair(d.path(), &["frobnicate"])), 2);
    assert_eq!(code(&dair(d.path(), &["synth"])), 2);
    assert_eq!(code(&dair(d.path(), &["gradcheck"])), 2);
    assert_eq!(code(&dair(d.path(), &["pretrain-vae", "--data", "missing", "--out", "x"])), 1);
    assert_eq!(code(&dair(d.path(), &["synth", "--classes", "fog", "--out", "x"])), 3);
    assert_eq!(code(&dair(d.path(), &["synth", "--size", "12", "--out", "x"])), 5);
    assert!(dair(d.path(), &["--help"]).status.success());
}

#[test]
fn untrained_network_restores_identically() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p, "0");
    ok(p, &["restore", "--ckpt", "run1", "--in", "data/degraded/00001.png", "--out", "y.png"]);
    assert_eq!(read_png(&p.join("y.png")).unwrap(), read_png(&p.join("data/degraded/00001.png")).unwrap());
    assert!(p.join("manifest-restore.json").exists());

    ok(p, &["restore", "--ckpt", "run1", "--vae", "vae", "--in", "data/degraded", "--out", "restored"]);
    assert_eq!(std::fs::read_dir(p.join("restored")).unwrap().count(), 5);

    ok(p, &["eval", "--ckpt", "run1", "--data", "data", "--out", "ev", "--save-images"]);
    let report = std::fs::read_to_string(p.join("ev/eval.tsv")).unwrap();
    for line in report.lines().skip(1).filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[2], f[4], "{line}");
        assert_eq!(f[3], f[5], "{line}");
    }
    assert!(p.join("ev/images/00003.png").exists());

    let mut ck = Checkpoint::load(&p.join("run1/dair.ckpt")).unwrap();
    ck.arrays.retain(|k, _| !k.starts_with(&format!("{PARAM}vae/")));
    ck.save(&p.join("bare.ckpt")).unwrap();
    let o = dair(p, &["restore", "--ckpt", "bare.ckpt", "--in", "data/degraded/00001.png", "--out", "z.png"]);
    assert_eq!(code(&o), 4);
    ok(p, &["restore", "--ckpt", "bare.ckpt", "--vae", "vae", "--in", "data/degraded/00001.png", "--out", "z.png"]);
    assert_eq!(code(&dair(p, &["restore", "--ckpt", "vae/vae.ckpt", "--in", "y.png", "--out", "w.png"])), 4);
}

fn log_losses(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split('\t').take(2).collect::<Vec<_>>().join("\t")).collect()
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["synth", "--classes", "noise,haze", "--per-class", "2", "--size", "16", "--base-count", "2", "--out", "data"]);
    let base = ["pretrain-vae", "--data", "data", "--patch", "16", "--batch", "2"];
    let run = |extra: &[&str]| {
        let mut a: Vec<&str> = base.to_vec();
        a.extend(TINY);
        a.extend(extra);
        ok(p, &a);
    };
    run(&["--out", "full", "--steps", "4", "--ckpt-every", "2"]);
    run(&["--out", "part", "--steps", "4", "--resume", "full/vae-000002.ckpt"]);
    assert_eq!(log_losses(&p.join("full/train_log.tsv"))[2..], log_losses(&p.join("part/train_log.tsv")));
    let a = Checkpoint::load(&p.join("full/vae.ckpt")).unwrap();
    let b = Checkpoint::load(&p.join("part/vae.ckpt")).unwrap();
    assert_eq!(a.arrays, b.arrays);

    ok(p, &["train", "--data", "data", "--vae", "full", "--out", "t_full", "--steps", "3", "--ckpt-every", "1"]);
    ok(p, &["train", "--data", "data", "--vae", "full", "--out", "t_part", "--steps", "3", "--resume", "t_full/dair-000001.ckpt"]);
    assert_eq!(log_losses(&p.join("t_full/train_log.tsv"))[1..], log_losses(&p.join("t_part/train_log.tsv")));
    let a = Checkpoint::load(&p.join("t_full/dair.ckpt")).unwrap();
    let b = Checkpoint::load(&p.join("t_part/dair.ckpt")).unwrap();
    assert_eq!(a.arrays, b.arrays);
    assert_eq!(code(&dair(p, &["train", "--data", "data", "--vae", "full", "--out", "t_part", "--steps", "3", "--no-priors", "--resume", "t_full/dair-000001.ckpt"])), 3);
}

#[test]
fn diverging_run_keeps_last_good_state() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["synth", "--classes", "noise", "--per-class", "2", "--size", "16", "--base-count", "2", "--out", "data"]);
    let mut a = vec!["pretrain-vae", "--data", "data", "--out", "vae", "--steps", "20", "--patch", "16", "--batch", "2", "--set", "lr=1e30"];
    a.extend(TINY);
    let o = dair(p, &a);
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = Checkpoint::load(&p.join("vae/last_good.ckpt")).unwrap();
    assert!(ck.arrays.values().all(|t| t.data().iter().all(|v| v.is_finite())));
    assert!(!p.join("vae/vae.ckpt").exists());
}

#[test]
fn gradcheck_single_block() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gradcheck", "--block", "resattn", "--out", "gc"]);
    let text = std::fs::read_to_string(d.path().join("gc/gradcheck.tsv")).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with("\ttrue"));
    assert_eq!(code(&dair(d.path(), &["gradcheck", "--block", "nope", "--out", "gc"])), 3);
}
