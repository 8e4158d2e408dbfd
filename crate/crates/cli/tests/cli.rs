//! Behavioral tests for the stegolab binary: exit codes, manifest
//! reruns, and per-command report shapes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stegolab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stegolab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).expect("file exists")).expect("valid json")
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for command in ["simulate", "verify", "detect", "codebook", "poison", "metrics", "analyze"] {
        assert!(text.contains(command), "help lacks {command}");
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn verify_requires_config() {
    let out = run(&["verify"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("config"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_config_file_fails() {
    let out = run(&["verify", "--config", "/nonexistent/battery.toml"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn verify_reports_failure_with_exit_one() {
    // Seed 103 deterministically misses the 5% KL tolerance at
    // SNR 0.1 (the estimator is unbiased but this draw lands outside);
    // the command must exit 1 and say FAIL.
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("failing.json");
    fs::write(
        &spec,
        serde_json::json!({
            "kind": "kl_estimate",
            "seed": 103,
            "grid": {
                "d": [16],
                "sigma": [1.0],
                "norm": [0.31622776601683794],
                "trials": 100000
            }
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "verify",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "stdout: {}", stdout(&out));
    assert!(stdout(&out).contains("FAIL"), "stdout: {}", stdout(&out));
}

#[test]
fn simulate_manifest_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, "d = 8\nm = 2\ntrials = 2000\nseed = 5\n").unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let manifest = first.join("manifest.json");
    let out = run(&[
        "simulate",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for file in ["channel.json", "trials.csv", "summary.json"] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap(),
            "{file} differs between run and manifest rerun"
        );
    }
}

#[test]
fn detect_report_keeps_tv_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("detect.toml");
    fs::write(&cfg, "d = 8\ntrials = 4000\nseed = 9\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "detect",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["trials"], 4000);
    let adv = report["theoretical_advantage"].as_f64().unwrap();
    assert_eq!(report["tv"].as_f64().unwrap(), 2.0 * adv);
    assert!(report["stderr"].as_f64().unwrap() > 0.0);
}

#[test]
fn codebook_generate_then_inspect_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("book.toml");
    fs::write(&cfg, "d = 8\nm = 3\nnorm = 1.5\nseed = 11\n").unwrap();
    let gen_dir = dir.path().join("gen");
    let out = run(&[
        "codebook",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        gen_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let generated = read_json(&gen_dir.join("stats.json"));
    assert_eq!(generated["entries"], 3);

    let inspect_cfg = dir.path().join("inspect.toml");
    fs::write(
        &inspect_cfg,
        format!("input = {:?}\n", gen_dir.join("channel.json").to_str().unwrap()),
    )
    .unwrap();
    let inspect_dir = dir.path().join("inspect");
    let out = run(&[
        "codebook",
        "--config",
        inspect_cfg.to_str().unwrap(),
        "--out",
        inspect_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let inspected = read_json(&inspect_dir.join("stats.json"));
    assert_eq!(inspected["entries"], generated["entries"]);
    assert_eq!(inspected["d_min"], generated["d_min"]);
}

#[test]
fn metrics_scores_task_reports_rates() {
    let dir = tempfile::tempdir().unwrap();
    let positives = dir.path().join("pos.jsonl");
    let negatives = dir.path().join("neg.jsonl");
    fs::write(&positives, "0.9\n0.8\n{\"score\": 0.2}\n").unwrap();
    fs::write(&negatives, "0.1\n0.6\n0.3\n0.2\n").unwrap();
    let cfg = dir.path().join("metrics.toml");
    fs::write(
        &cfg,
        format!(
            "task = \"scores\"\npositives = {:?}\nnegatives = {:?}\nthreshold = 0.5\n",
            positives.to_str().unwrap(),
            negatives.to_str().unwrap()
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "metrics",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["tpr"].as_f64().unwrap(), 2.0 / 3.0);
    assert_eq!(report["fpr"].as_f64().unwrap(), 0.25);
}

#[test]
fn analyze_writes_report_and_projection() {
    let dir = tempfile::tempdir().unwrap();
    let vectors = dir.path().join("vectors.json");
    let mut items = vec![
        serde_json::json!({"id": "k", "kind": "anchor", "group": "g", "values": [1.0, 0.0]}),
        serde_json::json!({"id": "m", "kind": "message", "group": "g", "values": [0.0, 1.0]}),
    ];
    let jitter = [[0.02, -0.01], [-0.03, 0.02], [0.01, 0.03], [-0.02, -0.02], [0.04, 0.01]];
    for (i, [dx, dy]) in jitter.into_iter().enumerate() {
        items.push(serde_json::json!({
            "id": format!("s{i}"),
            "kind": "stego",
            "group": "g",
            "values": [1.0 + dx, 1.0 + dy]
        }));
    }
    fs::write(
        &vectors,
        serde_json::json!({"dim": 2, "items": items}).to_string(),
    )
    .unwrap();
    let cfg = dir.path().join("analyze.toml");
    fs::write(&cfg, format!("vectors = {:?}\n", vectors.to_str().unwrap())).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["groups"][0]["group"], "g");
    assert!(report["groups"][0]["psi"].is_array());
    assert!(report["groups"][0]["residuals"].is_object());
    let projection = fs::read_to_string(out_dir.join("projection.csv")).unwrap();
    assert_eq!(projection.lines().count(), 1 + 7);
    assert!(projection.starts_with("id,kind,group,c1,c2"));
}

#[test]
fn poison_http_oracle_requires_url() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("poison.toml");
    fs::write(
        &cfg,
        "messages = [\"x\"]\nknowledge = \"k.txt\"\nclean = \"c.jsonl\"\noracle = \"http\"\n",
    )
    .unwrap();
    let out = run(&["poison", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("oracle_url"), "stderr: {}", stderr(&out));
}

#[test]
fn bundled_demo_poison_config_runs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        &root,
        &[
            "poison",
            "--config",
            "configs/demo_poison.toml",
            "--out",
            dir.path().to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let dataset = fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(dataset.lines().count(), 100);
    let manifest = read_json(&dir.path().join("dataset.manifest.json"));
    assert_eq!(manifest["poison_count"], 10);
    assert_eq!(manifest["clean_count"], 90);
}
