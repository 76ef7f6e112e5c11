//! End-to-end tests of the `lovis` binary: artifact layout, exit codes and
//! rerun determinism at a tiny scale.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lovis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lovis"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

/// Tiny model + training settings so every command finishes in seconds.
fn write_tiny_config(path: &Path) {
    fs::write(
        path,
        "d_model = 8\nheads = 2\nn_text = 1\nn_cross = 1\n\
         pretrain_steps = 4\niterations = 4\neval_every = 2\nseed = 11\n",
    )
    .unwrap();
}

fn gen_tiny_data(dir: &Path) {
    let out = lovis(&[
        "gen-data",
        "--houses",
        "3",
        "--episodes",
        "4",
        "--seed",
        "11",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "gen-data");
}

#[test]
fn gen_data_writes_dataset_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    gen_tiny_data(&dir);
    for name in [
        "houses.json",
        "train.jsonl",
        "val_seen.jsonl",
        "val_unseen.jsonl",
        "run_manifest.json",
    ] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["dataset"]["fingerprint"].is_string());
    assert!(manifest["wall_clock_seconds"].is_number());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lovis(&[
        "gen-data",
        "--style",
        "r9r",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2, "unknown style must be a config error");

    let data = tmp.path().join("data");
    gen_tiny_data(&data);
    let bad_cfg = tmp.path().join("bad.cfg");
    fs::write(&bad_cfg, "no_such_key = 5\n").unwrap();
    let out = lovis(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("p.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2, "unknown config key must exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no_such_key"), "error names the key: {stderr}");

    let out = Command::new(env!("CARGO_BIN_EXE_lovis"))
        .env("LOVIS_THREADS", "zero")
        .args([
            "ablate",
            "--data",
            data.to_str().unwrap(),
            "--axis",
            "modules",
            "--out",
            tmp.path().join("a").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2, "malformed LOVIS_THREADS must exit 2");
}

#[test]
fn missing_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lovis(&[
        "pretrain",
        "--data",
        tmp.path().join("nowhere").to_str().unwrap(),
        "--out",
        tmp.path().join("p.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn mismatched_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny_data(&data);
    let cfg = tmp.path().join("tiny.cfg");
    write_tiny_config(&cfg);
    let ckpt = tmp.path().join("pre.ckpt");
    let out = lovis(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out, "pretrain");

    // evaluating that checkpoint under different dimensions must fail loudly
    let other = tmp.path().join("other.cfg");
    fs::write(&other, "d_model = 16\nheads = 2\nn_text = 1\nn_cross = 1\n").unwrap();
    let out = lovis(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--split",
        "val_seen",
        "--config",
        other.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("shape"), "error should mention shapes: {stderr}");
}

#[test]
fn pipeline_runs_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny_data(&data);
    let cfg = tmp.path().join("tiny.cfg");
    write_tiny_config(&cfg);

    let ckpt = tmp.path().join("pre.ckpt");
    assert_ok(
        &lovis(&[
            "pretrain",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ]),
        "pretrain",
    );
    assert!(tmp.path().join("pretrain_losses.csv").exists());

    let run = |dir: &Path| {
        assert_ok(
            &lovis(&[
                "finetune",
                "--data",
                data.to_str().unwrap(),
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                dir.to_str().unwrap(),
            ]),
            "finetune",
        );
        let eval_dir = dir.join("eval");
        assert_ok(
            &lovis(&[
                "eval",
                "--data",
                data.to_str().unwrap(),
                "--ckpt",
                dir.join("best.ckpt").to_str().unwrap(),
                "--split",
                "val_unseen",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                eval_dir.to_str().unwrap(),
            ]),
            "eval",
        );
    };
    let (a, b) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    run(&a);
    run(&b);

    for rel in ["history.csv", "best.ckpt", "eval/metrics.csv", "eval/trajectories.jsonl"] {
        let fa = fs::read(a.join(rel)).unwrap();
        let fb = fs::read(b.join(rel)).unwrap();
        assert_eq!(fa, fb, "{rel} differs between identical runs");
    }

    // the history CSV carries the documented columns
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("iteration,split,NE,SR,SPL,CLS,nDTW,sDTW\n"));
    // eval rows at 0, 2, 4 on two splits each
    assert_eq!(history.lines().count(), 1 + 3 * 2);
}

#[test]
fn metrics_command_scores_trajectory_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny_data(&data);

    // references scored against themselves: every metric is perfect
    let split = data.join("val_unseen.jsonl");
    let csv_out = tmp.path().join("m.csv");
    let out = lovis(&[
        "metrics",
        "--pred",
        split.to_str().unwrap(),
        "--ref",
        split.to_str().unwrap(),
        "--houses",
        data.to_str().unwrap(),
        "--style",
        "r4r",
        "--out",
        csv_out.to_str().unwrap(),
    ]);
    assert_ok(&out, "metrics");
    let csv = fs::read_to_string(&csv_out).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "all");
    assert_eq!(fields[2], "0"); // NE
    assert_eq!(fields[3], "1"); // SR
    assert_eq!(fields[4], "1"); // SPL
    assert_eq!(fields[7], "1"); // sDTW

    // mismatched lengths are a data error
    let short = tmp.path().join("short.jsonl");
    let first = fs::read_to_string(&split).unwrap();
    fs::write(&short, first.lines().next().unwrap()).unwrap();
    let out = lovis(&[
        "metrics",
        "--pred",
        short.to_str().unwrap(),
        "--ref",
        split.to_str().unwrap(),
        "--houses",
        data.to_str().unwrap(),
        "--style",
        "r2r",
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn ablate_sweeps_both_axes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny_data(&data);
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "d_model = 8\nheads = 2\nn_text = 1\nn_cross = 1\n\
         pretrain_steps = 2\niterations = 2\neval_every = 2\nseed = 11\n",
    )
    .unwrap();

    let out_dir = tmp.path().join("mods");
    let out = Command::new(env!("CARGO_BIN_EXE_lovis"))
        .env("LOVIS_THREADS", "2")
        .args([
            "ablate",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--axis",
            "modules",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_ok(&out, "ablate modules");
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "variant,split,NE,SR,SPL,CLS,nDTW,sDTW");
    let variants: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        variants,
        ["h", "h", "h+o", "h+o", "h+v", "h+v", "h+o+v", "h+o+v"]
    );
    for label in ["h", "h_o", "h_v", "h_o_v"] {
        assert!(out_dir.join(label).join("best.ckpt").exists());
        assert!(out_dir.join(label).join("history.csv").exists());
    }

    let out = lovis(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--axis",
        "sideways",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2, "unknown axis is a config error");
}
