use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use loggate::corpus::{profile_corpus, ProfileInput};
use loggate::pipeline::{self, RunConfig};

fn loggate(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loggate"))
        .arg("--out")
        .arg(out)
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let path = dir.join(format!("corpus_{seed}.tsv"));
    let o = loggate(dir, &["synth", "--seed", seed, "--output", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

const QUICK: [&str; 4] = ["--set", "epochs=2", "--set", "vae_epochs=2"];

fn dataset_arg(path: &Path) -> String {
    format!("dataset={}", path.display())
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let o = loggate(dir.path(), &["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in ["profile", "synth", "build-stats", "pretrain-vae", "train", "evaluate", "ablate", "sweep"] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = loggate(dir.path(), &["train", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));

    let o = loggate(dir.path(), &["train", "--set", "epsilon=0.9"]);
    assert_eq!(o.status.code(), Some(2));

    let o = loggate(dir.path(), &["sweep", "--axis", "depth", "--grid", "1,2"]);
    assert_eq!(o.status.code(), Some(2));

    let o = loggate(dir.path(), &["sweep", "--axis", "epsilon", "--grid", "0.1,,x"]);
    assert_eq!(o.status.code(), Some(2));

    let o = loggate(dir.path(), &["synth", "--preset", "nope"]);
    assert_eq!(o.status.code(), Some(2));

    let o = loggate(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_errors_exit_1_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dataset_arg(&dir.path().join("absent.tsv"));
    let o = loggate(dir.path(), &["train", "--set", &missing]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage `load`"), "{}", stderr(&o));
}

#[test]
fn profile_prints_the_library_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "3");
    let o = loggate(dir.path(), &["profile", corpus.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), profile_corpus(&corpus, ProfileInput::Raw).unwrap().to_report());
    let o = loggate(dir.path(), &["profile", "--labeled", corpus.to_str().unwrap()]);
    assert_eq!(stdout(&o), profile_corpus(&corpus, ProfileInput::Labeled).unwrap().to_report());
}

#[test]
fn train_matches_library_and_evaluate_detects_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "7");
    let run = dir.path().join("run");
    let set = dataset_arg(&corpus);
    let mut args = vec!["train", "--set", &set];
    args.extend(QUICK);
    let o = loggate(&run, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("macro-F1"));
    for f in [
        "stats.tsv",
        "vnet.ckpt",
        "vnet_loss.tsv",
        "embeddings.bin",
        "model.ckpt",
        "history.tsv",
        "metrics.tsv",
        "summary.txt",
        "config.cfg",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let mut config = RunConfig::default();
    config.apply_overrides(&[set.as_str(), "epochs=2", "vae_epochs=2"]).unwrap();
    let lib_dir = dir.path().join("lib");
    let outcome = pipeline::train(&config, Some(&lib_dir)).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&run, "model.ckpt"), read(&lib_dir, "model.ckpt"));
    assert_eq!(read(&run, "config.cfg"), read(&lib_dir, "config.cfg"));

    // The saved config reproduces the run.
    let cfg = run.join("config.cfg");
    let o = loggate(&run, &["evaluate", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(run.join("eval_test/metrics.tsv")).unwrap();
    let macro_line = format!("macro_f1\t-\t{:?}", outcome.report.macro_f1);
    assert!(metrics.contains(&macro_line), "{metrics}");

    // A different corpus at the same path invalidates the run.
    let other = synth(dir.path(), "8");
    std::fs::copy(&other, &corpus).unwrap();
    let o = loggate(&run, &["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage `evaluate`"), "{}", stderr(&o));
}

#[test]
fn sweep_and_ablate_write_per_point_runs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "7");
    let set = dataset_arg(&corpus);
    let mut args = vec!["sweep", "--axis", "epsilon", "--grid", "0,0.3", "--set", &set];
    args.extend(QUICK);
    let o = loggate(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("sweep.tsv").is_file());
    assert!(dir.path().join("epsilon_0/model.ckpt").is_file());
    assert!(dir.path().join("epsilon_0.3/model.ckpt").is_file());

    let mut args = vec!["ablate", "--set", &set];
    args.extend(QUICK);
    let o = loggate(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("ablation.tsv")).unwrap();
    for mode in ["full", "stats_only", "semantic_only", "no_gate"] {
        assert!(table.contains(mode));
        assert!(dir.path().join(mode).join("metrics.tsv").is_file());
    }
}
