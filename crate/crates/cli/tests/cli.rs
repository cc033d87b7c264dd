//! End-to-end tests of the `defkv` binary: flag validation, exit codes,
//! config merging, and artifact contents.

use std::path::Path;
use std::process::{Command, Output};

fn defkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defkv"))
        .args(args)
        .output()
        .unwrap()
}

fn gen_trace(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name).to_str().unwrap().to_string();
    let mut args = vec![
        "gen", "--seed", "3", "--layers", "2", "--q-heads", "4", "--kv-heads", "2", "--dh", "8",
        "--prompt-len", "96", "--steps", "16", "--out", &path,
    ];
    args.extend_from_slice(extra);
    let out = defkv(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn gen_is_deterministic_and_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_trace(dir.path(), "a.dkvt", &[]);
    let b = gen_trace(dir.path(), "b.dkvt", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let out = defkv(&["gen", "--seed", "3", "--prompt-len", "40", "--steps", "4", "--out",
        dir.path().join("c.dkvt").to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("prompt=40") && stdout.contains("steps=4"), "{stdout}");
}

#[test]
fn gen_divisibility_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = defkv(&["gen", "--kv-heads", "3", "--q-heads", "8", "--out",
        dir.path().join("x.dkvt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));
}

#[test]
fn evict_full_budget_retains_all() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), "t.dkvt", &[]);
    let plan = dir.path().join("plan.json");
    let out = defkv(&["evict", "--trace", &trace, "--policy", "defensivekv", "--budget", "1.0",
        "--out", plan.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(v["layers"][0]["heads"][0]["retained"].as_array().unwrap().len(), 96);
    assert!(String::from_utf8_lossy(&out.stdout).contains("L0=192"));
}

#[test]
fn evict_bad_budget_and_policy_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), "t.dkvt", &[]);
    let plan = dir.path().join("p.json");
    for args in [
        vec!["evict", "--trace", &trace, "--policy", "defensivekv", "--budget", "1.5",
            "--out", plan.to_str().unwrap()],
        vec!["evict", "--trace", &trace, "--policy", "nope", "--budget", "0.5",
            "--out", plan.to_str().unwrap()],
    ] {
        assert_eq!(defkv(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn evict_streaming_sinks_plus_recent() {
    // B = ceil(0.06 * 256) = 16: 4 sinks + 12 recent; summary notes the
    // ignored window flag.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dkvt").to_str().unwrap().to_string();
    let out = defkv(&["gen", "--seed", "1", "--prompt-len", "256", "--steps", "4", "--out", &path]);
    assert!(out.status.success());
    let plan = dir.path().join("plan.json");
    let out = defkv(&["evict", "--trace", &path, "--policy", "streaming", "--budget", "0.06",
        "--out", plan.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("window flag ignored"));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    let retained: Vec<usize> = v["layers"][0]["heads"][0]["retained"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as usize)
        .collect();
    let want: Vec<usize> = (0..4).chain(244..256).collect();
    assert_eq!(retained, want);
}

#[test]
fn evict_fixed_threshold_ablation_changes_plan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dkvt").to_str().unwrap().to_string();
    let out = defkv(&["gen", "--seed", "2", "--prompt-len", "256", "--steps", "8",
        "--shift-prob", "0.1", "--out", &path]);
    assert!(out.status.success());
    let base = dir.path().join("base.json");
    let ablated = dir.path().join("ablated.json");
    for (flags, out_path) in [
        (vec![], &base),
        (vec!["--agg-ablation", "fixed:1e-4"], &ablated),
    ] {
        let mut args = vec!["evict", "--trace", &path, "--policy", "defensivekv",
            "--budget", "0.5", "--out", out_path.to_str().unwrap()];
        args.extend(flags);
        assert!(defkv(&args).status.success());
    }
    assert_ne!(std::fs::read(&base).unwrap(), std::fs::read(&ablated).unwrap());
}

#[test]
fn fragility_full_budget_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), "t.dkvt", &[]);
    let report = dir.path().join("r.csv");
    let out = defkv(&["fragility", "--trace", &trace, "--budget", "1.0", "--criteria", "mean",
        "--out", report.to_str().unwrap()]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,ratio_mean");
    for line in lines {
        let ratio: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((ratio - 1.0).abs() < 1e-9);
    }
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["reports"][0]["outlier_count"], 0);
}

#[test]
fn fragility_defensive_beats_mean_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demo.dkvt").to_str().unwrap().to_string();
    let out = defkv(&["gen", "--seed", "0", "--shift-prob", "0.1", "--out", &path]);
    assert!(out.status.success());
    let report = dir.path().join("r.csv");
    let out = defkv(&["fragility", "--trace", &path, "--out", report.to_str().unwrap()]);
    assert!(out.status.success());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.with_extension("json")).unwrap())
            .unwrap();
    let reports = sidecar["reports"].as_array().unwrap();
    let min_of = |name: &str| {
        reports
            .iter()
            .find(|r| r["criterion"] == name)
            .unwrap()["min"]
            .as_f64()
            .unwrap()
    };
    assert!(min_of("defensive") >= min_of("mean"));
}

#[test]
fn fragility_bad_criterion_and_layer_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), "t.dkvt", &[]);
    let report = dir.path().join("r.csv");
    for args in [
        vec!["fragility", "--trace", &trace, "--criteria", "single:99",
            "--out", report.to_str().unwrap()],
        vec!["fragility", "--trace", &trace, "--layer", "9",
            "--out", report.to_str().unwrap()],
    ] {
        assert_eq!(defkv(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn compare_runs_and_empty_glob_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let _ = gen_trace(dir.path(), "t0.dkvt", &[]);
    let glob = dir.path().join("*.dkvt").to_str().unwrap().to_string();
    let table = dir.path().join("table.csv");
    let out = defkv(&["compare", "--traces", &glob, "--policies", "snapkv,defensivekv",
        "--budgets", "0.5", "--out", table.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("policy,budget,mean_ratio,worst_ratio,outliers,retained_total\n"));
    assert_eq!(csv.lines().count(), 3);
    // Determinism across reruns.
    let table2 = dir.path().join("table2.csv");
    let out = defkv(&["compare", "--traces", &glob, "--policies", "snapkv,defensivekv",
        "--budgets", "0.5", "--out", table2.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&table).unwrap(), std::fs::read(&table2).unwrap());

    let empty = dir.path().join("nothing-*.dkvt").to_str().unwrap().to_string();
    let out = defkv(&["compare", "--traces", &empty, "--out", table.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_degenerate_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.json");
    let out = defkv(&["bench", "--n", "1", "--m", "1", "--iters", "3",
        "--out", report.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["n"], 1);
    assert!(v["defensive_over_mean_ratio"].as_f64().unwrap() > 0.0);
    let out = defkv(&["bench", "--iters", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_merges_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    let traced = dir.path().join("from-config.dkvt");
    std::fs::write(
        &config,
        serde_json::json!({
            "seed": 11,
            "prompt_len": 64,
            "steps": 8,
            "out": traced,
        })
        .to_string(),
    )
    .unwrap();
    // Flag overrides prompt_len; seed and out come from the config.
    let out = defkv(&["--config", config.to_str().unwrap(), "gen", "--prompt-len", "48"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("prompt=48") && stdout.contains("seed=11"), "{stdout}");
    assert!(traced.exists());

    // Unknown keys rejected before any compute.
    std::fs::write(&config, r#"{"prompt_len": 64, "bogus": 1}"#).unwrap();
    let out = defkv(&["--config", config.to_str().unwrap(), "gen", "--out",
        dir.path().join("z.dkvt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn json_errors_flag_emits_single_line_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = defkv(&["--json-errors", "gen", "--kv-heads", "3", "--q-heads", "8",
        "--out", dir.path().join("x.dkvt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.trim();
    assert!(!line.contains('\n'));
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["code"], 2);
    assert!(v["error"].as_str().unwrap().contains("divisible"));
}

#[test]
fn corrupt_trace_file_exits_2_with_structured_message() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), "t.dkvt", &[]);
    let mut bytes = std::fs::read(&trace).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&trace, &bytes).unwrap();
    let out = defkv(&["evict", "--trace", &trace, "--policy", "snapkv",
        "--out", dir.path().join("p.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}
