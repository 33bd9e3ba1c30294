use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use tempostruct::midi::parse_midi;
use tempostruct::synthetic::write_corpus;

const SMALL: &str = r#"
[model]
num_layers = 1
hidden_size = 16
dropout_keep = 1.0
[encoding]
chunk_len = 64
[training]
batch_size = 8
max_epochs = 2
"#;

fn run(args: &[&str], data: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tempostruct"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("TEMPOSTRUCT_DATA");
    if let Some(d) = data {
        cmd.env("TEMPOSTRUCT_DATA", d);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A synthetic corpus and a small-model config file.
fn setup(extra: &str) -> (TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, 5, 3).unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, format!("{SMALL}{extra}")).unwrap();
    (dir, corpus, config)
}

#[test]
fn ingest_writes_manifest_and_skip_report() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, 1, 0).unwrap();
    fs::remove_file(corpus.join("reels0.mid")).unwrap();
    let out = dir.path().join("index");
    let o = run(&["ingest", p(&corpus), "--out", p(&out)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert_eq!(manifest.matches("\"path\"").count(), 3);
    assert!(fs::read_to_string(out.join("skipped.tsv")).unwrap().is_empty());

    fs::write(corpus.join("broken1.mid"), b"MThd garbage").unwrap();
    let o = run(&["ingest", p(&corpus), "--out", p(&out)], None);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(out.join("skipped.tsv"))
        .unwrap()
        .contains("broken1.mid"));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&run(&["ingest", p(&empty), "--out", p(&out)], None)), 2);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&run(&["train", "--experiment", "ZZ"], None)), 64);
    assert_eq!(code(&run(&["frobnicate"], None)), 64);
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nlayers = 2\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", p(&bad)], None)), 64);
}

#[test]
fn gradcheck_reports_and_fails_on_fault() {
    let ok = run(&["gradcheck"], None);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("max relative error"));
    let bad = run(&["gradcheck", "--inject-fault"], None);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("max relative error"));
}

#[test]
fn train_without_corpus_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--out", p(&out)], None)), 2);
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&run(&["train", "--out", p(&out)], Some(&empty))), 2);
}

#[test]
fn diverging_training_exits_3() {
    let (dir, corpus, config) = setup("[optimizer]\nlearning_rate = inf\n");
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&config), "--out", p(&out)], Some(&corpus));
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_generate_evaluate() {
    let (dir, corpus, config) = setup("");
    let run_dir = dir.path().join("fc");
    let args = [
        "train",
        "--config",
        p(&config),
        "--experiment",
        "FC",
        "--seed",
        "1",
        "--out",
        p(&run_dir),
    ];
    let o = run(&args, Some(&corpus));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("experiment = \"FC\""));
    assert!(run_dir.join("metrics.csv").exists());
    let ckpt = run_dir.join("best.ckpt");
    assert!(ckpt.exists());

    let gen = |out: &Path, extra: &[&str]| {
        let mut args = vec!["generate", "--checkpoint", p(&ckpt), "--out", p(out)];
        args.extend_from_slice(extra);
        run(&args, None)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = gen(d, &["--seed", "7", "--csv"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("seed 7"));
        assert!(stdout(&o).contains("384 steps"));
    }
    let midi = fs::read(a.join("best-7.mid")).unwrap();
    assert_eq!(midi, fs::read(b.join("best-7.mid")).unwrap());
    assert!(parse_midi(&midi).is_ok());
    assert_eq!(fs::read_to_string(a.join("best-7.csv")).unwrap().lines().count(), 385);

    let prime = format!("{}:8", p(&corpus.join("jigs0.mid")));
    assert_eq!(code(&gen(&a, &["--prime", &prime, "--length", "32"])), 0);
    assert_eq!(code(&gen(&a, &["--experiment", "BL"])), 4);

    let o = run(
        &["evaluate", "--checkpoint", p(&ckpt), "--config", p(&config)],
        Some(&corpus),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("validation loss"));
}

#[test]
fn grid_search_writes_table() {
    let (dir, corpus, config) =
        setup("[training.grid]\nnum_layers = [1]\nhidden_sizes = [8, 12]\ndropout_keeps = [1.0]\n");
    let out = dir.path().join("grid");
    let o = run(
        &["grid-search", "--config", p(&config), "--jobs", "2", "--out", p(&out)],
        Some(&corpus),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("layers,hidden,keep,train_loss,valid_loss,time_per_epoch"));
    assert!(out.join("best.ckpt").exists());
}
