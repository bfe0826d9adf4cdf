//! End-to-end exercise of the compiled binary: generate → prep → train →
//! interrupt/resume → eval-gap → report, all inside a temp directory.

use std::path::Path;
use std::process::Command;

fn permrl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_permrl"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawning the binary");
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn pipeline_runs_end_to_end_and_resumes_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data.jsonl");
    let prepped = root.join("prepped.jsonl");

    // Generate a small mixed dataset.
    let stdout = run_ok(permrl().args([
        "gen",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--size",
        "12",
        "--max-retries",
        "5000",
    ]));
    assert!(stdout.contains("wrote 12 instances"), "{stdout}");
    assert!(data.exists());
    assert!(root.join("data.jsonl.meta.json").exists());

    // Prepare it: keep the full accuracy band, add one permuted variant per
    // task where an answer-preserving reordering exists.
    let stdout = run_ok(permrl().args([
        "prep",
        "--input",
        data.to_str().unwrap(),
        "--out",
        prepped.to_str().unwrap(),
        "--attempts",
        "4",
        "--band-min",
        "0",
        "--band-max",
        "1",
        "--variants",
        "1",
        "--seed",
        "9",
    ]));
    assert!(stdout.contains("rule filter: kept 12"), "{stdout}");
    assert!(stdout.contains("augmentation: 12 originals"), "{stdout}");
    assert!(prepped.exists());
    assert!(root.join("prepped.jsonl.meta.json").exists());
    assert!(root.join("prepped.jsonl.report.json").exists());
    assert!(line_count(&prepped) >= 12);

    // Train with a config file that overrides a deliberately wrong flag.
    let cfg = root.join("train.toml");
    std::fs::write(
        &cfg,
        "t_max = 6\nbatch_size = 4\nrollouts_per_group = 2\npermuted_groups = 1\n\
         embed_dim = 4\nhidden_dim = 6\nmax_response_len = 4\n\
         checkpoint_every = 2\ngap_eval_every = 3\n",
    )
    .unwrap();
    let run1 = root.join("run1");
    let stdout = run_ok(permrl().args([
        "train",
        "--data",
        prepped.to_str().unwrap(),
        "--out",
        run1.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--t-max",
        "999",
        "--seed",
        "5",
    ]));
    assert!(
        stdout.contains("completed 6 steps (6 of 6 total)"),
        "config file must override the flag: {stdout}"
    );
    let metrics1 = run1.join("metrics.jsonl");
    assert_eq!(line_count(&metrics1), 6);
    assert!(run1.join("checkpoint.json").exists());

    // The same schedule interrupted after two steps and resumed finishes
    // with a byte-identical metrics stream.
    let run2 = root.join("run2");
    let stdout = run_ok(permrl().args([
        "train",
        "--data",
        prepped.to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--stop-after",
        "2",
    ]));
    assert!(stdout.contains("completed 2 steps (2 of 6 total)"), "{stdout}");
    let stdout = run_ok(permrl().args([
        "train",
        "--data",
        prepped.to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--resume",
    ]));
    assert!(stdout.contains("completed 4 steps (6 of 6 total)"), "{stdout}");
    assert_eq!(
        std::fs::read(&metrics1).unwrap(),
        std::fs::read(run2.join("metrics.jsonl")).unwrap(),
        "interrupt plus resume must reproduce the uninterrupted stream"
    );

    // Gap evaluation straight off the checkpoint, with the run directory
    // supplied through the environment.
    let stdout = run_ok(
        permrl()
            .env("PERMRL_OUT_DIR", run1.to_str().unwrap())
            .args([
                "eval-gap",
                "--data",
                prepped.to_str().unwrap(),
                "--seed",
                "11",
                "--json",
            ]),
    );
    let report: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(report["pairs"].as_u64().unwrap() > 0);
    assert_eq!(report["checkpoint_step"].as_u64(), Some(6));
    let gap = report["gap"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&gap), "gap {gap} out of range");

    // Metrics flatten into a tab-separated table: header plus six rows.
    let stdout = run_ok(permrl().args(["report", "--metrics", metrics1.to_str().unwrap()]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("step\talpha\tmean_reward\t"));
    let columns = lines[0].split('\t').count();
    for row in &lines[1..] {
        assert_eq!(row.split('\t').count(), columns);
    }
}

#[test]
fn misspelled_config_keys_abort_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data.jsonl");
    run_ok(permrl().args([
        "gen",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "4",
        "--size",
        "4",
    ]));
    let cfg = root.join("broken.toml");
    std::fs::write(&cfg, "learning_rte = 0.5\n").unwrap();
    let out = permrl()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            root.join("run").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rte"), "{stderr}");
    assert!(
        !root.join("run").join("metrics.jsonl").exists(),
        "a bad config must fail before any training output appears"
    );
}
