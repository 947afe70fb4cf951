//! End-to-end checks of the `dppo` binary: happy paths, validation
//! diagnostics, and the config-echo round trip.

use std::path::Path;
use std::process::{Command, Output};

fn run_binary(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dppo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.conf", "seed=9\ntrain.epochs=6\n");
    let out = dir.path().join("out");
    let result = run_binary(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    for file in [
        "metrics.jsonl",
        "summary.csv",
        "curves.csv",
        "effective.conf",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "r_q,r_o,seed,final_reward,completions_used,wallclock_micros"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 6);
    let final_reward: f64 = row[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&final_reward));
    // Timing defaults to deterministic zeros.
    assert_eq!(row[5], "0");
    // Every metrics line is a JSON object.
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6 * 4);
    for line in metrics.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn invalid_rate_names_the_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.conf", "pruning.r_q=1.0\n");
    let out = dir.path().join("out");
    let result = run_binary(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("r_q < 1"), "stderr: {stderr}");
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

#[test]
fn missing_config_fails() {
    let result = run_binary(&["train", "--config", "/nonexistent/x.conf"]);
    assert!(!result.status.success());
}

#[test]
fn config_echo_reproduces_results_byte_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "run.conf",
        "seed=33\ntrain.epochs=5\npruning.r_o=0.5\npruning.r_q=0.3\n",
    );
    let out1 = dir.path().join("out1");
    let out2 = dir.path().join("out2");
    assert!(run_binary(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out1.to_str().unwrap(),
    ])
    .status
    .success());
    assert!(run_binary(&[
        "train",
        "--config",
        out1.join("effective.conf").to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ])
    .status
    .success());
    for file in [
        "metrics.jsonl",
        "summary.csv",
        "curves.csv",
        "effective.conf",
    ] {
        assert_eq!(
            std::fs::read(out1.join(file)).unwrap(),
            std::fs::read(out2.join(file)).unwrap(),
            "{file} differs when re-run from the echoed config"
        );
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.conf", "seed=1\ntrain.epochs=4\n");
    let out1 = dir.path().join("s1");
    let out2 = dir.path().join("s2");
    for (out, seed) in [(&out1, "1"), (&out2, "99")] {
        assert!(run_binary(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ])
        .status
        .success());
    }
    assert_ne!(
        std::fs::read(out1.join("metrics.jsonl")).unwrap(),
        std::fs::read(out2.join("metrics.jsonl")).unwrap(),
        "different seeds should give different trajectories"
    );
    let echoed = std::fs::read_to_string(out2.join("effective.conf")).unwrap();
    assert!(echoed.contains("seed=99"));
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.conf", "seed=2\nverify.trials=10000\n");
    let out = dir.path().join("out");
    let result = run_binary(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("verify_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["all_pass"], serde_json::Value::Bool(true));
    // 3 levels x 2 modes x 4 default rates.
    assert_eq!(report["unbiasedness"].as_array().unwrap().len(), 24);
    let factors = report["variance_factor_table"].as_array().unwrap();
    assert!(factors
        .iter()
        .any(|row| row["r_q"] == 0.9 && (row["factor"].as_f64().unwrap() - 3.025).abs() < 1e-9));
}

#[test]
fn task_above_enumeration_cap_fails_with_capacity_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "big.conf",
        "task.num_prompts=1\ntask.vocab_size=100\ntask.completion_len=3\n\
         task.prompt_lengths=4\ntask.target_map=1,2,3\n",
    );
    let out = dir.path().join("out");
    let result = run_binary(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(
        stderr.contains("capacity") || stderr.contains("cap"),
        "stderr: {stderr}"
    );
}

#[test]
fn pack_bench_uniform_lengths_are_fully_dense() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "uniform.conf",
        "pack_bench.profiles=2\npack_bench.num_prompts=12\n\
         pack_bench.min_len=16\npack_bench.l_max=16\n",
    );
    let out = dir.path().join("out");
    assert!(run_binary(&[
        "pack-bench",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .success());
    let csv = std::fs::read_to_string(out.join("pack_bench.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let density: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(density, 1.0, "line: {line}");
    }
}

#[test]
fn verify_rejects_non_enumerable_task() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "run.conf",
        "task.enumerable=false\nverify.trials=10000\n",
    );
    let out = dir.path().join("out");
    let result = run_binary(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!result.status.success());
}

#[test]
fn degenerate_batch_storm_exits_nonzero() {
    // With beta = 1 every prompt in a 2-prompt batch is a pruning candidate,
    // so bernoulli dropping at 0.9 empties most batches from epoch 2 on.
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "storm.conf",
        "seed=3\ntrain.epochs=6\npruning.r_q=0.9\npruning.beta=1.0\n\
         pruning.prune_mode=bernoulli\n",
    );
    let out = dir.path().join("out");
    let result = run_binary(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(
        stderr.contains("degenerate-batch storm"),
        "stderr: {stderr}"
    );
    // Atomicity: nothing partially written on failure.
    assert!(!out.join("metrics.jsonl").exists());
}

#[test]
fn pack_bench_writes_rows_and_handles_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "run.conf",
        "pack_bench.profiles=3\npack_bench.num_prompts=30\n",
    );
    let out = dir.path().join("out");
    assert!(run_binary(&[
        "pack-bench",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .success());
    let csv = std::fs::read_to_string(out.join("pack_bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "profile,strategy,num_prompts,num_sequences,density"
    );
    assert_eq!(lines.len(), 1 + 3 * 3);
    // Packed strategies must beat the unpacked baseline on mixed lengths.
    let density_of = |strategy: &str| -> f64 {
        lines[1..]
            .iter()
            .filter(|l| l.split(',').nth(1) == Some(strategy))
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum::<f64>()
            / 3.0
    };
    assert!(density_of("first_fit") > density_of("off"));

    let empty_config = write_config(dir.path(), "empty.conf", "pack_bench.num_prompts=0\n");
    let out_empty = dir.path().join("empty");
    assert!(run_binary(&[
        "pack-bench",
        "--config",
        empty_config.to_str().unwrap(),
        "--out",
        out_empty.to_str().unwrap(),
    ])
    .status
    .success());
    let csv = std::fs::read_to_string(out_empty.join("pack_bench.csv")).unwrap();
    assert_eq!(csv, "profile,strategy,num_prompts,num_sequences,density\n");
}
