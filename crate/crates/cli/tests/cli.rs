use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparsegrad::harness::{initial_model, BasisSet, Checkpoint, RunConfig};
use sparsegrad::numkit::{rel_frobenius_diff, Matrix};

const SMALL: &str = "\
train_samples = 512
valid_samples = 128
input_dim = 8
d = 8
h = 16
n_blocks = 2
epochs = 2
rho = 0.1
calibration_steps = 5
";

fn sparsegrad(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsegrad"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn sparsegrad_without_basis_is_an_instructive_usage_error() {
    let dir = workdir();
    let out = sparsegrad(&["train", "--config", "small.toml", "--method", "sparsegrad-sd"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("--basis") && err.contains("--calibrate"), "{err}");
}

#[test]
fn unknown_flag_and_bad_values_fail() {
    let dir = workdir();
    for args in [
        &["train", "--no-such-flag"][..],
        &["train", "--method", "sgd"],
        &["train", "--rho", "abc"],
        &["frobnicate"],
    ] {
        let out = sparsegrad(args, dir.path());
        assert!(!out.status.success(), "{args:?} succeeded");
    }
    fs::write(dir.path().join("bad.toml"), "lr = 0.1\nmystery = 3\n").unwrap();
    let out = sparsegrad(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mystery"), "{}", stderr(&out));
}

#[test]
fn invalid_combination_is_a_usage_error() {
    let dir = workdir();
    let out = sparsegrad(
        &["train", "--config", "small.toml", "--method", "lora", "--rank", "0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = sparsegrad(
        &["benchmark", "--config", "small.toml", "--methods", "regular"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_train_convert_resume() {
    let dir = workdir();
    let p = dir.path();
    ok(&sparsegrad(&["calibrate", "--config", "small.toml", "--out", "bases"], p));
    assert!(p.join("bases/up.sgba").exists() && p.join("bases/sparsity_report.json").exists());

    ok(&sparsegrad(
        &["train", "--config", "small.toml", "--method", "sparsegrad-sd", "--basis", "bases", "--out", "sd"],
        p,
    ));
    let ck = Checkpoint::load(&p.join("sd/checkpoint.sgck")).unwrap();

    // Without the bases the converted layers cannot be mapped back.
    let out = sparsegrad(&["convert", "--checkpoint", "sd/checkpoint.sgck", "--out", "plain.sgck"], p);
    assert!(!out.status.success());
    ok(&sparsegrad(
        &["convert", "--checkpoint", "sd/checkpoint.sgck", "--basis", "bases", "--out", "plain.sgck"],
        p,
    ));

    let bases = BasisSet::load_dir(&p.join("bases")).unwrap();
    let sparse = ck.sparse_model(&bases).unwrap();
    let cfg = RunConfig {
        init_checkpoint: Some(p.join("plain.sgck")),
        ..RunConfig::from_toml_str(SMALL).unwrap()
    };
    let resumed = initial_model(&cfg).unwrap();
    let x = Matrix::from_fn(16, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
    let err = rel_frobenius_diff(&resumed.infer(&x).unwrap(), &sparse.infer(&x).unwrap());
    assert!(err <= 1e-10, "relative difference {err}");

    ok(&sparsegrad(
        &["train", "--config", "small.toml", "--method", "regular", "--checkpoint", "plain.sgck", "--out", "resumed"],
        p,
    ));
    assert!(p.join("resumed/metrics.jsonl").exists());

    let out = sparsegrad(&["inspect", "--checkpoint", "plain.sgck"], p);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"plain\""));
}

#[test]
fn inspect_corrupted_basis_reports_checksum() {
    let dir = workdir();
    let p = dir.path();
    ok(&sparsegrad(&["calibrate", "--config", "small.toml", "--out", "bases"], p));
    let file = p.join("bases/down.sgba");
    let mut bytes = fs::read(&file).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&file, bytes).unwrap();
    let out = sparsegrad(&["inspect", "--basis", "bases/down.sgba"], p);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = workdir();
    let p = dir.path();
    for run in ["a", "b"] {
        ok(&sparsegrad(
            &["train", "--config", "small.toml", "--method", "meprop", "--seed", "3", "--out", run],
            p,
        ));
        ok(&sparsegrad(
            &["benchmark", "--config", "small.toml", "--methods", "regular,lora", "--out", &format!("bench-{run}")],
            p,
        ));
    }
    for f in ["a/metrics.jsonl", "a/summary.json", "a/summary.txt", "a/checkpoint.sgck", "bench-a/benchmark.jsonl"] {
        let other = f.replacen('a', "b", 1);
        assert_eq!(fs::read(p.join(f)).unwrap(), fs::read(p.join(&other)).unwrap(), "{f}");
    }
}

#[test]
fn ablate_writes_one_row_per_fraction() {
    let dir = workdir();
    let p = dir.path();
    ok(&sparsegrad(
        &[
            "ablate", "--config", "small.toml", "--method", "sparsegrad-reg", "--calibrate", "--fractions", "0.05,0.5,1",
            "--out", "abl",
        ],
        p,
    ));
    let csv = fs::read_to_string(p.join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
