//! End-to-end tests driving the compiled `voxkd` binary.
//!
//! Workloads are kept tiny (divisor-8 networks, a few dozen voxels per
//! scene) so the whole suite runs in seconds while still exercising every
//! subcommand through its real entry point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn voxkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxkd"))
        .args(args)
        .env("VOXKD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = voxkd(args);
    assert!(
        out.status.success(),
        "voxkd {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

/// Asserts failure with a single `error: ...` line on stderr and returns it.
fn run_err(args: &[&str]) -> String {
    let out = voxkd(args);
    assert!(!out.status.success(), "voxkd {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).expect("stderr is UTF-8");
    let trimmed = stderr.trim_end();
    assert!(
        trimmed.starts_with("error: ") && !trimmed.contains('\n'),
        "expected one machine-parseable error line, got: {stderr:?}"
    );
    trimmed.to_string()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "[model]\ndivisor = 8\n\n[data]\nvoxel_size = 0.25\n\n\
         [train]\nepochs = 1\nseed = 7\n\n[optim]\nlr = 0.02\n",
    )
    .unwrap();
    path
}

fn gen_tiny_data(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join(format!("data_{seed}"));
    run_ok(&[
        "gen-data",
        "--scenes",
        "5",
        "--classes",
        "3",
        "--points-per-class",
        "80",
        "--room-size",
        "4.0",
        "--seed",
        &seed.to_string(),
        "--out",
        data.to_str().unwrap(),
    ]);
    data
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn gen_data_splits_scenes_and_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let msg = run_ok(&[
        "gen-data",
        "--scenes",
        "40",
        "--classes",
        "3",
        "--points-per-class",
        "20",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(msg.contains("32 train + 8 val"), "{msg}");
    let descriptors = read_tree(&out)
        .keys()
        .filter(|k| k.ends_with(".json") && *k != "dataset.json")
        .count();
    assert_eq!(descriptors, 40, "one descriptor per scene");

    // Same seed, same bytes.
    let again = dir.path().join("b");
    run_ok(&[
        "gen-data",
        "--scenes",
        "40",
        "--classes",
        "3",
        "--points-per-class",
        "20",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(read_tree(&out), read_tree(&again));

    // Refuses to clobber without --force, then obeys it.
    let err = run_err(&["gen-data", "--scenes", "5", "--out", out.to_str().unwrap()]);
    assert!(err.contains("--force"), "{err}");
    run_ok(&[
        "gen-data",
        "--scenes",
        "5",
        "--classes",
        "3",
        "--points-per-class",
        "20",
        "--out",
        out.to_str().unwrap(),
        "--force",
    ]);

    // A dataset needs foreground and background classes.
    let err = run_err(&[
        "gen-data",
        "--scenes",
        "5",
        "--classes",
        "1",
        "--out",
        dir.path().join("c").to_str().unwrap(),
    ]);
    assert!(err.contains("at least 2"), "{err}");
}

#[test]
fn the_pipeline_trains_distills_evaluates_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = gen_tiny_data(dir.path(), 1234);
    let runs = dir.path().join("runs");
    let teacher_dir = runs.join("teacher");
    let student_dir = runs.join("student");

    // Supervised teacher, with a flag override recorded in the run dir.
    let out = run_ok(&[
        "train-teacher",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        teacher_dir.to_str().unwrap(),
        "--lr",
        "0.015",
    ]);
    assert!(out.contains("epoch    0"), "{out}");
    let effective = std::fs::read_to_string(teacher_dir.join("config.toml")).unwrap();
    assert!(effective.contains("lr = 0.015"), "{effective}");
    let teacher_ckpt = teacher_dir.join("model.skd1");
    assert!(teacher_ckpt.is_file());

    // Distill a student against it.
    let out = run_ok(&[
        "distill",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        student_dir.to_str().unwrap(),
        "--teacher",
        teacher_ckpt.to_str().unwrap(),
        "--alpha",
        "0.5",
        "--lambda-dec",
        "0.5",
        "--lambda-enc",
        "0.25",
    ]);
    assert!(out.contains("kl"), "{out}");
    assert!(student_dir.join("model.skd1").is_file());

    // Evaluate the teacher and keep the metrics as JSON.
    let metrics = dir.path().join("eval.json");
    let table = run_ok(&[
        "eval",
        teacher_ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--voxel-size",
        "0.25",
        "--json",
        metrics.to_str().unwrap(),
    ]);
    assert!(table.contains("class_0"), "{table}");
    assert!(table.contains("mIoU"), "{table}");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(parsed["miou"].as_f64().unwrap() >= 0.0);

    // Render both runs into one report.
    let report_dir = dir.path().join("report");
    let out = run_ok(&[
        "report",
        runs.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(out.contains("rendered 2 runs"), "{out}");
    for name in ["loss.svg", "val_miou.svg", "per_class.txt"] {
        assert!(report_dir.join(name).is_file(), "missing {name}");
    }
    let svg = std::fs::read_to_string(report_dir.join("loss.svg")).unwrap();
    assert!(svg.starts_with("<svg"), "not an SVG: {}", &svg[..40.min(svg.len())]);
}

#[test]
fn reruns_and_resumes_reproduce_artifacts_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = gen_tiny_data(dir.path(), 99);
    let base = [
        "train-teacher",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "2",
    ];

    let straight = dir.path().join("straight");
    let rerun = dir.path().join("rerun");
    let split = dir.path().join("split");
    for out in [&straight, &rerun] {
        let mut args = base.to_vec();
        args.extend(["--out", out.to_str().unwrap()]);
        run_ok(&args);
        // Run it twice into the same directory: the fresh run must replace
        // the history, not extend it.
        run_ok(&args);
    }
    let model = std::fs::read(straight.join("model.skd1")).unwrap();
    assert_eq!(model, std::fs::read(rerun.join("model.skd1")).unwrap());
    let history = std::fs::read_to_string(straight.join("history.jsonl")).unwrap();
    assert_eq!(history, std::fs::read_to_string(rerun.join("history.jsonl")).unwrap());
    assert_eq!(history.lines().count(), 2, "rerun must not append: {history}");

    // Interrupt after one epoch, resume to the same target: identical bytes.
    let mut first = base.to_vec();
    first[5] = "1"; // --epochs 1
    first.extend(["--out", split.to_str().unwrap()]);
    run_ok(&first);
    let ckpt = split.join("epoch_0001.skd1");
    let mut second = base.to_vec();
    second.extend([
        "--out",
        split.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    let out = run_ok(&second);
    assert!(out.contains("resuming at epoch 1"), "{out}");
    assert_eq!(model, std::fs::read(split.join("model.skd1")).unwrap());
    assert_eq!(history, std::fs::read_to_string(split.join("history.jsonl")).unwrap());

    // A different seed must not reproduce the same weights.
    let other = dir.path().join("other");
    let mut args = base.to_vec();
    args.extend(["--out", other.to_str().unwrap(), "--seed", "8"]);
    run_ok(&args);
    assert_ne!(model, std::fs::read(other.join("model.skd1")).unwrap());
}

#[test]
fn failures_are_single_line_and_leave_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = gen_tiny_data(dir.path(), 5);

    // Missing teacher checkpoint.
    let err = run_err(&[
        "distill",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("s").to_str().unwrap(),
        "--teacher",
        dir.path().join("nope.skd1").to_str().unwrap(),
    ]);
    assert!(err.contains("nope.skd1"), "{err}");

    // Invalid hyperparameters are rejected before any work happens.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[optim]\nlr = -1.0\n").unwrap();
    run_err(&[
        "train-teacher",
        bad.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);

    // Evaluating a file that is not a checkpoint reports the byte offset.
    let garbage = dir.path().join("junk.skd1");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let err = run_err(&[
        "eval",
        garbage.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(err.contains("byte 0"), "{err}");

    // Report over a directory with no runs: error, and no output directory.
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let err = run_err(&["report", empty.to_str().unwrap()]);
    assert!(err.contains("no run histories"), "{err}");
    assert!(!empty.join("report").exists(), "partial report output");
}

#[test]
fn gradcheck_passes_at_sane_tolerance_and_fails_honestly_below_noise() {
    let args = [
        "gradcheck",
        "--divisor",
        "16",
        "--classes",
        "4",
        "--sites",
        "8",
        "--samples",
        "1",
    ];
    let out = run_ok(&args);
    assert!(out.contains("-> pass"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("classifier.bias")), "{out}");

    // Demanding more precision than central differences can deliver must
    // fail loudly, not quietly succeed.
    let mut strict = args.to_vec();
    strict.extend(["--tolerance", "1e-18"]);
    let err = run_err(&strict);
    assert!(err.contains("gradcheck failed"), "{err}");
}

#[test]
fn inspect_reports_counts_ratios_and_occupancy() {
    let out = run_ok(&["inspect", "--arch", "Res16UNet34C_Half", "--classes", "20"]);
    assert!(out.contains("9,467,204"), "{out}");
    assert!(out.contains("4.00"), "{out}");

    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), 11);
    let out = run_ok(&[
        "inspect",
        "--data",
        data.to_str().unwrap(),
        "--voxel-sizes",
        "0.2,0.025",
    ]);
    let means: Vec<f64> = out
        .lines()
        .filter(|l| l.trim_start().starts_with("0."))
        .map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            cols[1].trim_end_matches('%').parse().unwrap()
        })
        .collect();
    assert_eq!(means.len(), 2, "{out}");
    assert!(
        means[1] < means[0],
        "occupancy must drop at finer voxels: {means:?}"
    );
}
