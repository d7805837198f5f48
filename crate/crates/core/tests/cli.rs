use std::path::Path;
use std::process::{Command, Output};

fn mtop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtop"))
        .current_dir(dir)
        .args(args)
        .env_remove("MTOP_THREADS")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "encoder.num_layers=1",
    "--set",
    "encoder.hidden_dim=16",
    "--set",
    "encoder.num_heads=2",
    "--set",
    "encoder.ffn_dim=32",
];

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        "data",
        "--epochs",
        "1",
        "--runs",
        "2",
        "--out",
        out,
        "--run-name",
        "r",
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&mtop(dir, &args))
}

#[test]
fn synth_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&mtop(
        dir,
        &["synth", "--out", "data", "--tasks", "2", "--examples", "60"],
    ));
    assert!(dir.join("data/manifest.json").exists());

    let summary = train(dir, "a", &[]);
    assert!(summary.contains("median over 2 runs"));
    let root = dir.join("a/r");
    for f in ["config.resolved", "vocab.txt", "summary.txt"] {
        assert!(root.join(f).exists(), "{f}");
    }
    for r in ["run0", "run1"] {
        for f in ["config.resolved", "metrics.log", "ckpt.best", "report.txt"] {
            assert!(root.join(r).join(f).exists(), "{r}/{f}");
        }
    }
    let resolved = std::fs::read_to_string(root.join("run1/config.resolved")).unwrap();
    assert!(resolved.contains("seed = 1\n"));
    assert!(resolved.contains("train.epochs = 1\n"));
    assert!(resolved.contains("train.peak_lr = 1e-5\n"));

    train(dir, "b", &[]);
    for f in [
        "vocab.txt",
        "summary.txt",
        "run0/metrics.log",
        "run0/ckpt.best",
        "run1/report.txt",
    ] {
        let x = std::fs::read(dir.join("a/r").join(f)).unwrap();
        let y = std::fs::read(dir.join("b/r").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }

    let report = ok(&mtop(
        dir,
        &[
            "eval",
            "--checkpoint",
            "a/r/run0/ckpt.best",
            "--vocab",
            "a/r/vocab.txt",
            "--data",
            "data",
        ],
    ));
    let saved = std::fs::read_to_string(root.join("run0/report.txt")).unwrap();
    let table: String = report.lines().take(4).map(|l| format!("{l}\n")).collect();
    assert!(saved.contains(&table), "{report}\nvs\n{saved}");
}

#[test]
fn single_task_artifacts_feed_training() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&mtop(
        dir,
        &["synth", "--out", "data", "--tasks", "2", "--examples", "40"],
    ));
    let mut args = vec![
        "pretrain-single",
        "--data",
        "data",
        "--epochs",
        "1",
        "--artifacts",
        "st",
    ];
    args.extend_from_slice(TINY);
    ok(&mtop(dir, &args));
    assert!(dir.join("st/seed0/synth1.st").exists());
    let mut args = vec![
        "train",
        "--data",
        "data",
        "--epochs",
        "1",
        "--prompt-init",
        "st",
        "--pooler-init",
        "st",
        "--artifacts",
        "st",
    ];
    args.extend_from_slice(TINY);
    ok(&mtop(dir, &args));

    // Artifacts from another seed's backbone are rejected.
    args.extend_from_slice(&["--seed", "3"]);
    let out = mtop(dir, &args);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_reports_pass_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "bench",
        "--batches",
        "1",
        "--reps",
        "1",
        "--batch-size",
        "2",
    ];
    args.extend_from_slice(TINY);
    let table = ok(&mtop(tmp.path(), &args));
    let passes: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(2).unwrap())
        .collect();
    assert_eq!(passes, ["1", "8"], "{table}");
}

#[test]
fn build_nhc_writes_seven_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for c in 0..8 {
        for i in 0..(2300 + 100 * c) {
            lines.push_str(&format!(
                "{{\"category\":\"CAT {c}\",\"headline\":\"h {c} {i}\"}}\n"
            ));
        }
    }
    std::fs::write(tmp.path().join("news.jsonl"), lines).unwrap();
    let out = ok(&mtop(
        tmp.path(),
        &[
            "build-nhc",
            "--input",
            "news.jsonl",
            "--out",
            "nhc",
            "--seed",
            "7",
        ],
    ));
    assert!(out.contains("7 tasks, 28000 examples"), "{out}");
    let dirs = std::fs::read_dir(tmp.path().join("nhc"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(dirs, 7);
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(mtop(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        mtop(dir, &["train", "--set", "train.lr=3"]).status.code(),
        Some(1)
    );
    std::fs::write(dir.join("bad.cfg"), "model.variant = bert\n").unwrap();
    let out = mtop(dir, &["train", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.variant"));
    assert_eq!(
        mtop(dir, &["train", "--data", "missing"]).status.code(),
        Some(2)
    );
    assert_eq!(mtop(dir, &["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("run.cfg"),
        "# desk run\ntrain.epochs = 7\ntrain.batch_size = 8\n",
    )
    .unwrap();
    let out = ok(&mtop(
        dir,
        &[
            "train",
            "--config",
            "run.cfg",
            "--epochs",
            "3",
            "--print-config",
            "--data",
            "x",
        ],
    ));
    assert!(out.contains("train.epochs = 3\n"));
    assert!(out.contains("train.batch_size = 8\n"));
    assert!(out.contains("train.warmup_fraction = 0.1\n"));
}
