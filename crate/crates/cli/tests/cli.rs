//! End-to-end checks of the command-line interface: subcommand behavior,
//! exit codes, determinism of the synthesizer, and the metrics contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msvm"))
        .args(args)
        .output()
        .expect("spawn msvm")
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&p).unwrap())
        })
        .collect()
}

const TINY_CONFIG: &str = "classes = 3\n\
                           channels = 2,4,8,16\n\
                           d_state = 1\n\
                           windows = 2x2,2x2,2x2,2x2\n\
                           seed = 5\n\
                           steps = 2\n\
                           lr = 0.001\n\
                           batch_size = 1\n";

#[test]
fn synth_same_seed_writes_identical_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        let out = msvm(&[
            "synth", "--count", "3", "--out", out.to_str().unwrap(),
            "--seed", seed, "--size", "32",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(dir_snapshot(&a), dir_snapshot(&b));
    assert_ne!(dir_snapshot(&a), dir_snapshot(&c));
}

#[test]
fn synth_dataset_has_manifest_and_readable_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = msvm(&[
        "synth", "--count", "2", "--out", data.to_str().unwrap(),
        "--seed", "3", "--size", "32", "--classes", "2", "--split", "val",
    ]);
    assert!(out.status.success());
    let manifest = fs::read_to_string(data.join("manifest.tsv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("image\tmask\tsplit\tspec"));
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[2], "val");
        for rel in &fields[..2] {
            let pgm = msv_mamba::pgm::read(&data.join(rel)).unwrap();
            assert_eq!((pgm.width, pgm.height), (32, 32));
        }
        let mask = msv_mamba::pgm::read(&data.join(fields[1])).unwrap();
        assert!(mask.data.iter().all(|&v| v < 2));
    }
}

#[test]
fn train_writes_checkpoint_and_metrics_with_the_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(msvm(&[
        "synth", "--count", "2", "--out", data.to_str().unwrap(),
        "--seed", "4", "--size", "32",
    ])
    .status
    .success());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = msvm(&[
        "train", "--data", data.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.ckpt").is_file());
    let csv = fs::read_to_string(run.join("train.csv")).unwrap();
    assert!(csv.starts_with("step,split,class,dice,loss_main,loss_aux_sum,loss_total\n"));
    let rows = msv_mamba::metrics::parse_csv(&csv).unwrap();
    assert!(rows.iter().any(|r| r.class.is_none()), "missing mean row");
    assert!(rows.iter().all(|r| r.split == "train" && r.step == 2));
}

#[test]
fn disabling_auxiliary_supervision_forces_epsilon_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(msvm(&[
        "synth", "--count", "1", "--out", data.to_str().unwrap(),
        "--seed", "6", "--size", "32",
    ])
    .status
    .success());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = msvm(&[
        "train", "--data", data.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--no-aux",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("epsilon = 0.0"), "stdout: {stdout}");
    let rows =
        msv_mamba::metrics::parse_csv(&fs::read_to_string(run.join("train.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.loss_aux_sum == 0.0));
}

#[test]
fn eval_and_predict_consume_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(msvm(&[
        "synth", "--count", "2", "--out", data.to_str().unwrap(),
        "--seed", "8", "--size", "32",
    ])
    .status
    .success());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    assert!(msvm(&[
        "train", "--data", data.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(),
    ])
    .status
    .success());

    let ckpt = run.join("model.ckpt");
    let csv = dir.path().join("eval.csv");
    let out = msvm(&[
        "eval", "--data", data.to_str().unwrap(),
        "--ckpt", ckpt.to_str().unwrap(), "--csv", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval_text = fs::read_to_string(&csv).unwrap();
    let train_text = fs::read_to_string(run.join("train.csv")).unwrap();
    assert_eq!(
        eval_text.lines().next(),
        train_text.lines().next(),
        "eval and train must share one schema"
    );

    let mask_out = dir.path().join("pred.pgm");
    let image = fs::read_to_string(data.join("manifest.tsv"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split('\t')
        .next()
        .unwrap()
        .to_string();
    let out = msvm(&[
        "predict", "--image", data.join(image).to_str().unwrap(),
        "--ckpt", ckpt.to_str().unwrap(), "--mask-out", mask_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mask = msv_mamba::pgm::read(&mask_out).unwrap();
    assert_eq!((mask.width, mask.height), (32, 32));
    assert!(mask.data.iter().all(|&v| v < 3));
    assert!(dir.path().join("pred.overlay.pgm").is_file());
}

#[test]
fn resume_rejects_a_checkpoint_from_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(msvm(&[
        "synth", "--count", "1", "--out", data.to_str().unwrap(),
        "--seed", "2", "--size", "32",
    ])
    .status
    .success());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    assert!(msvm(&[
        "train", "--data", data.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(),
    ])
    .status
    .success());

    let other = dir.path().join("other.cfg");
    fs::write(&other, TINY_CONFIG.replace("d_state = 1", "d_state = 2")).unwrap();
    let out = msvm(&[
        "train", "--data", data.to_str().unwrap(),
        "--config", other.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--resume", run.join("model.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn usage_and_runtime_failures_use_distinct_exit_codes() {
    let out = msvm(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));

    let out = msvm(&["synth", "--count", "1", "--out", "/tmp/x", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = msvm(&[
        "eval", "--data", dir.path().join("missing").to_str().unwrap(),
        "--ckpt", dir.path().join("missing.ckpt").to_str().unwrap(),
        "--csv", dir.path().join("out.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = msvm(&[
        "synth", "--count", "0", "--out", dir.path().to_str().unwrap(), "--seed", "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
