//! Drives the installed binary end to end: exit codes, artifact layout,
//! config-file precedence, and the analysis subcommands over a real
//! checkpoint. Every run here is tiny (p = 7, a handful of epochs).

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groklab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code (killed by signal?)")
}

/// Trains the shared tiny checkpoint once per test binary invocation.
fn tiny_run(dir: &Path) -> std::path::PathBuf {
    let out = run(&[
        "train",
        "--op", "add",
        "--p", "7",
        "--d", "4",
        "--hidden", "16",
        "--batch", "8",
        "--epochs", "2",
        "--eval-every", "1",
        "--seed", "3",
        "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "train failed: {}", stderr_of(&out));
    dir.join("add_p7_adam_seed3")
}

#[test]
fn help_and_version_exit_zero() {
    for args in [
        &["--help"][..],
        &["--version"][..],
        &["train", "--help"][..],
        &["sweep", "--help"][..],
        &["data", "--help"][..],
    ] {
        let out = run(args);
        assert_eq!(code(&out), 0, "{args:?} exited nonzero");
    }
    let version = run(&["--version"]);
    assert!(String::from_utf8_lossy(&version.stdout).contains("groklab"));
}

#[test]
fn parse_errors_exit_one() {
    for args in [
        &["--no-such-flag"][..],
        &["frobnicate"][..],
        &["train", "--epochs", "not-a-number"][..],
    ] {
        let out = run(args);
        assert_eq!(code(&out), 1, "{args:?} should be a usage error");
    }
}

#[test]
fn missing_required_keys_are_usage_errors() {
    let out = run(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("--op"));

    let out = run(&["train", "--op", "add"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("--p"));
}

#[test]
fn non_prime_modulus_is_a_usage_error() {
    let out = run(&["data", "--op", "add", "--p", "9", "--out", "/tmp"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("prime"), "stderr: {}", stderr_of(&out));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no.bin");
    let out = run(&["fft", "--ckpt", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr_of(&out));
}

#[test]
fn data_writes_dataset_split_and_frequencies() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "data", "--op", "add", "--p", "7",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let data_dir = dir.path().join("add_p7_random_seed0_data");

    let dataset = std::fs::read_to_string(data_dir.join("dataset.txt")).unwrap();
    let mut lines = dataset.lines();
    assert_eq!(lines.next(), Some("p=7 op=add"));
    assert_eq!(lines.count(), 49); // all 7x7 operand pairs

    let count = |name: &str| {
        std::fs::read_to_string(data_dir.join(name))
            .unwrap()
            .lines()
            .count()
    };
    assert_eq!(count("train_indices.txt"), 14); // floor(0.3 * 49)
    assert_eq!(count("test_indices.txt"), 9); // floor(0.2 * 49)
    assert_eq!(count("token_freq.csv"), 1 + 9); // header + V = p + 2 tokens
}

#[test]
fn train_writes_artifacts_and_guards_the_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = tiny_run(dir.path());
    for name in [
        "metrics.csv",
        "summary.json",
        "checkpoint.bin",
        "opt_state.bin",
        "curves.svg",
    ] {
        assert!(run_dir.join(name).is_file(), "missing artifact {name}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "epoch,train_loss,train_acc,val_acc,sigma_max_E,sigma_max_W,lambda_max_E,lambda_max_W,rank_EW,wall_ms"
    ));
    assert_eq!(metrics.lines().count(), 1 + 3); // header + evals at 0, 1, 2

    // Re-running into the same directory must refuse without --force...
    let out = bin()
        .args(["train", "--op", "add", "--p", "7", "--d", "4", "--hidden", "16"])
        .args(["--batch", "8", "--epochs", "2", "--eval-every", "1", "--seed", "3"])
        .args(["--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("--force"));

    // ... and proceed with it.
    let out = bin()
        .args(["train", "--op", "add", "--p", "7", "--d", "4", "--hidden", "16"])
        .args(["--batch", "8", "--epochs", "2", "--eval-every", "1", "--seed", "3"])
        .args(["--out", dir.path().to_str().unwrap(), "--force"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn analysis_subcommands_read_a_checkpoint_back() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = tiny_run(dir.path());
    let ckpt = run_dir.join("checkpoint.bin");
    let analysis = dir.path().join("analysis");

    let out = run(&[
        "fft", "--ckpt", ckpt.to_str().unwrap(),
        "--out", analysis.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "fft: {}", stderr_of(&out));
    let spectrum = std::fs::read_to_string(analysis.join("spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().count(), 1 + 4); // header + ceil(7/2) frequencies
    assert!(analysis.join("spectrum.svg").is_file());

    let out = run(&[
        "rank", "--ckpt", ckpt.to_str().unwrap(),
        "--out", analysis.to_str().unwrap(), "--force",
    ]);
    assert_eq!(code(&out), 0, "rank: {}", stderr_of(&out));
    let rank = std::fs::read_to_string(analysis.join("rank.csv")).unwrap();
    assert!(rank.starts_with("matrix,rank"));

    let out = run(&[
        "diag", "--ckpt", ckpt.to_str().unwrap(),
        "--op", "add", "--p", "7",
        "--out", analysis.to_str().unwrap(), "--force",
    ]);
    assert_eq!(code(&out), 0, "diag: {}", stderr_of(&out));
    let report = std::fs::read_to_string(analysis.join("diag_report.csv")).unwrap();
    assert!(report.contains("lambda_max"), "report: {report}");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        "op = add\np = 7\nd = 4\nhidden = 16\nbatch = 8\nepochs = 1\neval-every = 1\nseed = 5\n",
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config", conf.to_str().unwrap(),
        "--epochs", "2", // overrides the file's epochs = 1
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("add_p7_adam_seed5/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["config"]["epochs"], 2);
    assert_eq!(summary["config"]["seed"], 5);
}

#[test]
fn unknown_config_key_is_rejected_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "op = add\np = 7\nlerning-rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("lerning-rate"));
}

#[test]
fn out_root_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["data", "--op", "add", "--p", "7"])
        .env("GROKLAB_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(dir.path().join("add_p7_random_seed0_data/dataset.txt").is_file());
}
