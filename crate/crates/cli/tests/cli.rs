//! Black-box runs of the binary: exit codes and reproducible outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prunix_core::data::CorpusParams;
use prunix_core::pipeline::PipelineConfig;

fn prunix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunix")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let mut c = PipelineConfig::default();
    c.data.corpus = CorpusParams {
        per_class: 30,
        ..Default::default()
    };
    c.train.epochs_initial = 3;
    c.train.epochs_regularized = 3;
    c.train.epochs_finetune = 2;
    let path = dir.join("small.toml");
    fs::write(&path, c.to_toml()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(code(&prunix(&["frobnicate"])), 1);
    assert_eq!(code(&prunix(&["sweep", "--out", "x"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlr = -1.0\n").unwrap();
    let out = dir.path().join("o");
    let o = prunix(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&prunix(&["train", "--config", missing.to_str().unwrap()])), 1);
}

#[test]
fn malformed_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("broken.csv");
    fs::write(&csv, "label,p0\n3,not-a-number\n").unwrap();
    let mut c = PipelineConfig::default();
    c.data.path = Some(csv);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, c.to_toml()).unwrap();
    let out = dir.path().join("o");
    let o = prunix(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = PipelineConfig::default();
    c.data.corpus.per_class = 10;
    c.train.lr = 1e30;
    c.train.epochs_initial = 2;
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, c.to_toml()).unwrap();
    let out = dir.path().join("o");
    let o = prunix(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

/// train, prune, quantize, inject, eval, sweep and report in sequence.
fn staged(cfg: &Path, out: &Path) {
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let common = ["--config", c, "--seed", "5", "--out", o];
    let faults = out.join("faults.json");
    let steps: Vec<Vec<&str>> = vec![
        vec!["train"],
        vec!["prune"],
        vec!["quantize"],
        vec!["inject", "--stuck-off", "0.05", "--drift", "0.5", "--drift-fraction", "0.2"],
        vec!["eval", "--faults", faults.to_str().unwrap()],
        vec!["sweep", "--axis", "stuck_fraction", "--grid", "0,0.1"],
        vec!["report"],
    ];
    for step in steps {
        let mut args = vec![step[0]];
        args.extend(common);
        args.extend(&step[1..]);
        let r = prunix(&args);
        assert!(r.status.success(), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
    }
}

#[test]
fn staged_commands_rerun_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    staged(&cfg, &a);
    staged(&cfg, &b);
    let fa = files(&a);
    for name in ["finetuned.ckpt", "faults.json", "sparsity.json", "sweep_stuck_fraction.csv", "metrics.jsonl"] {
        assert!(fa.iter().any(|(n, _)| n == name), "missing {name}");
    }
    assert_eq!(fa, files(&b));
}

#[test]
fn run_command_reruns_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |out: &Path| {
        let r = prunix(&["run", "--config", cfg.to_str().unwrap(), "--seed", "2", "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    let fa = files(&a);
    assert!(fa.iter().any(|(n, _)| n == "metrics.csv"));
    assert_eq!(fa, files(&b));
}
