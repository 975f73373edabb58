use std::path::Path;
use std::process::{Command, Output};

use vqmoco::pipeline::cli::{run, EXIT_DATA, EXIT_USAGE};
use vqmoco::pipeline::{read_csv, read_nifti};

const SMALL: &str = r#"{"schema_version": 1, "train": {"max_steps": 2}, "data": {"n_pairs": 4}}"#;

fn vqmoco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqmoco"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (s(p.strip_prefix(dir).unwrap()), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn out_of_range_label_is_usage_error() {
    let out = vqmoco(&["correct", "--input", "x", "--label", "11", "--vq", "v"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("0–10"), "{msg}");
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(run(["vqmoco", "frobnicate"]), EXIT_USAGE);
    assert_eq!(run(["vqmoco"]), EXIT_USAGE);
    assert_eq!(run(["vqmoco", "--help"]), 0);
}

#[test]
fn missing_config_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vqmoco(&[
        "train-vq",
        "--config",
        "missing.json",
        "--data",
        "d",
        "--out",
        &s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
}

#[test]
fn missing_checkpoint_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = run([
        "vqmoco",
        "correct",
        "--input",
        "nope",
        "--label",
        "3",
        "--vq",
        "nope",
        "--out",
        &s(dir.path()),
    ]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL).unwrap();
    for sub in ["a", "b"] {
        let out = vqmoco(&[
            "simulate",
            "--seed",
            "1",
            "--config",
            &s(&cfg),
            "--out",
            &s(&dir.path().join(sub)),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = read_all(&dir.path().join("a"));
    assert_eq!(a.len(), 4 * 3);
    assert_eq!(a, read_all(&dir.path().join("b")));
}

#[test]
fn phantom_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| s(&dir.path().join(p));
    let cfg = d("c.json");
    std::fs::write(&cfg, SMALL).unwrap();

    assert_eq!(
        run([
            "vqmoco",
            "phantom",
            "--count",
            "2",
            "--size",
            "16",
            "--out",
            &d("ph")
        ]),
        0
    );
    let vol = read_nifti(&dir.path().join("ph/phantom_001.nii")).unwrap();
    assert_eq!(vol.data().dim(), (16, 16, 4));

    let vols = [d("ph/phantom_000.nii"), d("ph/phantom_001.nii")];
    let data = d("data");
    let mut sim = vec![
        "vqmoco",
        "simulate",
        "--config",
        &cfg,
        "--out",
        &data,
        "--volumes",
    ];
    sim.extend(vols.iter().map(String::as_str));
    assert_eq!(run(sim), 0);
    assert_eq!(
        run([
            "vqmoco",
            "train-vq",
            "--config",
            &cfg,
            "--data",
            &d("data"),
            "--out",
            &d("run")
        ]),
        0
    );
    let log = std::fs::read_to_string(dir.path().join("run/train_vq.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let code = run([
        "vqmoco",
        "eval",
        "--config",
        &cfg,
        "--data",
        &d("data"),
        "--vq",
        &d("run/vq"),
        "--out",
        &d("run"),
    ]);
    assert_eq!(code, 0);
    let rows = read_csv(&dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 5);

    let code = run([
        "vqmoco",
        "correct",
        "--input",
        &d("data/pair_00000"),
        "--label",
        "4",
        "--vq",
        &d("run/vq"),
        "--mode",
        "rearranged",
        "--out",
        &d("run"),
    ]);
    assert_eq!(code, EXIT_DATA, "rearranged mode without priors");
}
