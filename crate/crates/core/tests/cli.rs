//! End-to-end tests of the `mpsd` binary: artifact round trips, exit
//! codes and determinism, driven through real process invocations.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpsd::cli::RunConfig;
use mpsd::dp::{Mechanism, TrainConfig};

fn mpsd(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mpsd"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn mpsd")
}

fn write_fixture(dir: &Path, rows: usize, seed: u64) -> std::path::PathBuf {
    let table = common::adult_like(rows, seed);
    let path = dir.join("data.csv");
    table.write_csv(&path, "?").unwrap();
    path
}

fn small_config(dir: &Path, data: &Path) -> RunConfig {
    RunConfig {
        data: Some(data.to_path_buf()),
        target_feature: Some("income".into()),
        max_bond: 4,
        train: TrainConfig {
            epochs: 2,
            num_batches: 2,
            descent_steps: 2,
            batch_size: 32,
            learning_rate: 0.1,
            lr_decay: 1.0,
            seed: 9,
        },
        sample_count: 300,
        out_dir: dir.join("out"),
        seed: 9,
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn fit_sample_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 300, 10);
    let cfg = small_config(dir.path(), &data);
    let cfg_path = write_config(dir.path(), &cfg);
    let cfg_arg = cfg_path.to_str().unwrap();

    let fit = mpsd(
        &["--config", cfg_arg, "--preset", "no_privacy", "fit"],
        &[("MPSD_THREADS", "2")],
    );
    assert!(
        fit.status.success(),
        "fit failed: {}",
        String::from_utf8_lossy(&fit.stderr)
    );
    let out = cfg.out_dir.clone();
    let model = out.join("model.mpsd");
    assert!(model.exists());
    assert!(out.join("schema.json").exists());
    assert!(out.join("run_log.jsonl").exists());

    // Samples keep the original column order and are seed-deterministic.
    let synth = out.join("synthetic.csv");
    let sample = mpsd(
        &[
            "--config",
            cfg_arg,
            "sample",
            "--model",
            model.to_str().unwrap(),
            "--out",
            synth.to_str().unwrap(),
        ],
        &[],
    );
    assert!(
        sample.status.success(),
        "sample failed: {}",
        String::from_utf8_lossy(&sample.stderr)
    );
    let text = fs::read_to_string(&synth).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, common::COLUMNS.join(","));
    assert_eq!(text.lines().count(), 301);

    let again = out.join("synthetic_again.csv");
    let rerun = mpsd(
        &[
            "--config",
            cfg_arg,
            "sample",
            "--model",
            model.to_str().unwrap(),
            "--out",
            again.to_str().unwrap(),
        ],
        &[],
    );
    assert!(rerun.status.success());
    assert_eq!(fs::read(&synth).unwrap(), fs::read(&again).unwrap());

    let eval = mpsd(
        &[
            "--config",
            cfg_arg,
            "evaluate",
            "--real",
            data.to_str().unwrap(),
            "--synth",
            synth.to_str().unwrap(),
            "--schema",
            out.join("schema.json").to_str().unwrap(),
        ],
        &[],
    );
    assert!(
        eval.status.success(),
        "evaluate failed: {}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let report = fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("tv_complement"));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("scope,name,metric,mean,std"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();

    // Missing data file.
    let out = mpsd(
        &["--out-dir", dir.path().to_str().unwrap(), "fit", "--data", "/nonexistent.csv"],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Unknown preset.
    let out = mpsd(&["--preset", "bogus", "fit"], &[]);
    assert_eq!(out.status.code(), Some(2));

    // Malformed config JSON.
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"max_bond\": }").unwrap();
    let out = mpsd(&["--config", bad.to_str().unwrap(), "fit"], &[]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown config keys are rejected, not ignored.
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, "{\"bond_dim\": 7}").unwrap();
    let out = mpsd(&["--config", unknown.to_str().unwrap(), "fit"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();

    // Header-only CSV: nothing to train on.
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "a,b\n").unwrap();
    let out = mpsd(
        &["--out-dir", dir.path().to_str().unwrap(), "fit", "--data", empty.to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exhausted_budget_exits_4_without_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 200, 11);
    let mut cfg = small_config(dir.path(), &data);
    cfg.noise.mechanism = Mechanism::Laplacian;
    cfg.noise.epsilon = 0.01;
    // Fixed noise scale the 0.01 budget cannot pay even one update for.
    cfg.noise.sigma_override = Some(1.0);
    cfg.clip.threshold = Some(1.0);
    let cfg_path = write_config(dir.path(), &cfg);

    let out = mpsd(&["--config", cfg_path.to_str().unwrap(), "fit"], &[]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!cfg.out_dir.join("model.mpsd").exists());
}

#[test]
fn experiment_writes_sweep_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 300, 12);
    let mut cfg = small_config(dir.path(), &data);
    cfg.clip.threshold = Some(1.0);
    cfg.sample_count = 300;
    cfg.eval.downstream = false;
    let cfg_path = write_config(dir.path(), &cfg);

    let out = mpsd(
        &[
            "--config",
            cfg_path.to_str().unwrap(),
            "experiment",
            "--epsilons",
            "1,10",
            "--mechanisms",
            "laplacian,none",
        ],
        &[("MPSD_THREADS", "2")],
    );
    assert!(
        out.status.success(),
        "experiment failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(cfg.out_dir.join("experiment.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "mechanism,epsilon,metric,mean,std");
    // Two mechanisms x two epsilons, each contributing every aggregate.
    for mech in ["laplacian", "none"] {
        for eps in ["1", "10"] {
            assert!(
                csv.lines().any(|l| l.starts_with(&format!("{mech},{eps},"))),
                "missing cell {mech}/{eps} in:\n{csv}"
            );
        }
    }
}
