//! End-to-end runs of the `hcrl` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hcrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hcrl(args);
    assert!(
        out.status.success(),
        "hcrl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small two-level dataset in `dir/data`.
fn synth(dir: &Path, seed: &str) -> std::path::PathBuf {
    let out = dir.join("data");
    ok(&["synth", "--n", "60", "--dim", "4", "--seed", seed, "--out", p(&out)]);
    out
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn synth_writes_labels_per_level_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), "3");
    let b = synth(&tmp.path().join("b"), "3");
    let labels = fs::read_to_string(a.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().next(), Some("level_1,level_2"));
    assert_eq!(labels.lines().count(), 61);
    for f in ["data.csv", "labels.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = synth(&tmp.path().join("c"), "4");
    assert_ne!(fs::read(a.join("data.csv")).unwrap(), fs::read(c.join("data.csv")).unwrap());
}

#[test]
fn train_eval_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "1");
    let csv = data.join("data.csv");
    let run = tmp.path().join("run");
    let stdout = ok(&[
        "train", "--data", p(&csv), "--out", p(&run),
        "--set", "latent_dim=2", "--set", "depth=2", "--set", "hidden=[8]",
        "--set", "epochs=6", "--set", "pretrain_epochs=1", "--set", "batch_size=16",
    ]);
    assert!(stdout.contains("checkpoint\t"));
    for f in ["config.toml", "checkpoint.json", "history.csv", "tree.json", "tree.dot"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);

    let ev = tmp.path().join("eval");
    let ckpt = run.join("checkpoint.json");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&csv), "--nll-samples", "1", "--out", p(&ev)]);
    let m = metrics(&ev);
    assert_eq!(m["nll_samples"], 1);
    assert!(m["fscore"]["f"].as_f64().unwrap() > 0.0);
    // the final history row was computed on the same data at the same weights
    let last = history.lines().last().unwrap();
    let header: Vec<&str> = history.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "reconstruction_error").unwrap();
    let re: f64 = last.split(',').nth(col).unwrap().parse().unwrap();
    assert!((m["reconstruction_error"].as_f64().unwrap() - re).abs() < 1e-9);

    let dot = tmp.path().join("tree.dot");
    ok(&["export", "--checkpoint", p(&ckpt), "--data", p(&csv), "--format", "dot", "--out", p(&dot)]);
    assert!(fs::read_to_string(&dot).unwrap().starts_with("digraph"));
}

#[test]
fn flat_training_and_unlabelled_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("x.csv");
    let rows: Vec<String> = (0..30)
        .map(|i| format!("{},{},{}", (i % 5) as f64 * 0.3, (i % 3) as f64, (i % 7) as f64 * -0.2))
        .collect();
    fs::write(&csv, rows.join("\n")).unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&csv), "--out", p(&run),
        "--set", "variant=vade", "--set", "components=1", "--set", "depth=1",
        "--set", "latent_dim=2", "--set", "hidden=[4]", "--set", "epochs=1", "--set", "pretrain_epochs=0",
    ]);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(!run.join("tree.json").exists());

    let ev = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", p(&run.join("checkpoint.json")), "--data", p(&csv), "--nll-samples", "3", "--out", p(&ev)]);
    assert!(metrics(&ev)["fscore"].is_null());

    // zero epochs still writes a checkpoint
    let idle = tmp.path().join("idle");
    ok(&[
        "train", "--data", p(&csv), "--out", p(&idle),
        "--set", "variant=vae", "--set", "depth=1", "--set", "latent_dim=2", "--set", "epochs=0",
    ]);
    assert!(idle.join("checkpoint.json").exists());
    assert_eq!(fs::read_to_string(idle.join("history.csv")).unwrap().lines().count(), 1);
}

#[test]
fn config_file_is_honoured_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "2");
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "data = {:?}\n\n[model]\nvariant = \"hcrl1\"\nlatent_dim = 2\ndepth = 2\nhidden = [6]\nepochs = 6\npretrain_epochs = 1\nbatch_size = 20\nseed = 4\n",
            p(&data.join("data.csv"))
        ),
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["train", "--config", p(&cfg), "--out", p(&b)]);
    for f in ["history.csv", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let stored = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(stored.contains("variant = \"hcrl1\""));
}

#[test]
fn bad_inputs_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let missing = hcrl(&["train", "--data", "/no/such/file.csv", "--out", p(&out)]);
    assert_eq!(missing.status.code(), Some(1));

    let data = synth(tmp.path(), "0");
    let csv = data.join("data.csv");
    let bogus = hcrl(&["train", "--data", p(&csv), "--out", p(&out), "--set", "bogus=1"]);
    assert_eq!(bogus.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bogus.stderr).contains("bogus"));

    let mismatch = hcrl(&["train", "--data", p(&csv), "--out", p(&out), "--set", "data_dim=7"]);
    assert_eq!(mismatch.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&mismatch.stderr).to_string();
    assert!(msg.contains('7') && msg.contains('4'), "{msg}");

    assert_eq!(hcrl(&["synth", "--branching", "0", "--out", p(&out)]).status.code(), Some(1));
    assert_eq!(hcrl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hcrl(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes_repeats_and_catches_corruption() {
    let first = ok(&["gradcheck", "--variant", "hcrl2", "--seed", "1"]);
    let second = ok(&["gradcheck", "--variant", "hcrl2", "--seed", "1"]);
    assert_eq!(first, second);
    ok(&["gradcheck", "--variant", "vade"]);
    let group = first.split_whitespace().next().unwrap();
    let bad = hcrl(&["gradcheck", "--variant", "hcrl2", "--seed", "1", "--corrupt", group]);
    assert_eq!(bad.status.code(), Some(2));
}
