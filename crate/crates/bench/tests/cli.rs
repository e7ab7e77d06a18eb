use std::path::Path;
use std::process::{Command, Output};

fn malmm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_malmm"))
        .args(args)
        .current_dir(dir)
        .env_remove("MALMM_SEED")
        .output()
        .expect("binary runs")
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const SMALL: &[&str] = &["--bank-size", "3", "--queries", "2", "--tokens", "2", "--channels", "4", "--blocks", "1"];

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = malmm(&["verify", "--instances", "50", "--out", "v.json"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(json_lines(&dir.path().join("v.json"))[0]["passed"], true);

    let bad = malmm(&["verify", "--instances", "200", "--mutate-tie-break"], dir.path());
    assert_eq!(bad.status.code(), Some(1));

    let config = malmm(&["verify", "--instances", "0"], dir.path());
    assert_eq!(config.status.code(), Some(2));
}

#[test]
fn mutated_failure_sets_reproduce_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let failures = |out: &str| {
        malmm(&["verify", "--seeds", "4,9", "--instances", "200", "--mutate-tie-break", "--out", out], dir.path());
        let report = &json_lines(&dir.path().join(out))[0];
        report["checks"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| (c["name"].clone(), c["seed"].clone(), c["failures"].clone()))
            .collect::<Vec<_>>()
    };
    let a = failures("a.json");
    assert_eq!(a, failures("b.json"));
    assert!(a.iter().any(|(_, _, f)| !f.as_array().unwrap().is_empty()));
}

#[test]
fn seed_env_sets_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_malmm"))
        .args(["verify", "--instances", "10", "--out", "v.json"])
        .current_dir(dir.path())
        .env("MALMM_SEED", "31")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json_lines(&dir.path().join("v.json"))[0]["seeds"], serde_json::json!([31]));
}

#[test]
fn unknown_policy_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = malmm(&["scaling", "--policy", "lru", "--frames-list", "2,4"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown policy `lru`") && err.contains("Usage:"), "{err}");
}

#[test]
fn non_increasing_frames_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = malmm(&["scaling", "--frames-list", "10,5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scaling_csv_appends_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["scaling", "--policy", "fifo", "--frames-list", "2,6", "--out", "s.csv"];
    args.extend_from_slice(SMALL);
    assert!(malmm(&args, dir.path()).status.success());
    assert!(malmm(&args, dir.path()).status.success());
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "policy,frames,bank_size,queries,tokens,channels,blocks,heads,seed,downstream_token_rows,peak_kv_rows,\
         peak_query_kv_rows,peak_resident_floats,peak_resident_bytes,wall_clock_ms"
    );
    assert_eq!(lines.len(), 5);
    // every column but wall-clock repeats exactly
    let strip = |l: &str| l.rsplit_once(',').unwrap().0.to_string();
    assert_eq!(strip(lines[1]), strip(lines[3]));
    assert_eq!(strip(lines[2]), strip(lines[4]));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"frames_list": [3], "policy": "concat", "queries": 2}"#).unwrap();
    let out = malmm(&["scaling", "--config", "c.json", "--tokens", "2", "--channels", "4"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..4], ["concat", "3", "20", "2"]);
    assert_eq!(row[9], "6");
}

#[test]
fn ablate_report_reruns_from_its_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["ablate", "--policies", "mbc,avgpool", "--epochs", "3", "--seed", "5", "--out", "a.json"];
    assert!(malmm(&args, dir.path()).status.success());
    let first = json_lines(&dir.path().join("a.json")).remove(0);
    assert_eq!(first["config"]["epochs"], 3);
    std::fs::write(dir.path().join("echo.json"), first.to_string()).unwrap();
    let rerun = malmm(&["ablate", "--config", "echo.json", "--out", "a.json"], dir.path());
    assert!(rerun.status.success(), "{}", String::from_utf8_lossy(&rerun.stderr));
    let both = json_lines(&dir.path().join("a.json"));
    assert_eq!(both.len(), 2);
    assert_eq!(both[0], both[1]);
}

#[test]
fn banklen_writes_two_columns_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "banklen-sweep",
        "--lengths-list",
        "1,2",
        "--epochs",
        "2",
        "--train-per-class",
        "2",
        "--eval-per-class",
        "2",
        "--out",
        "b.csv",
    ];
    assert!(malmm(&args, dir.path()).status.success());
    let text = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert!(text.starts_with("bank_length,eval_accuracy\n1,"));
    assert_eq!(text.lines().count(), 3);
    let side = json_lines(&dir.path().join("b.csv.json"));
    assert_eq!(side[0]["command"], "banklen-sweep");
    assert_eq!(side[0]["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn timing_rejects_two_repeats_and_writes_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out = malmm(&["timing", "--repeats", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let mut args = vec!["timing", "--frames-list", "4,8,16", "--repeats", "3", "--out", "t.csv"];
    args.extend_from_slice(SMALL);
    assert!(malmm(&args, dir.path()).status.success());
    let fit = json_lines(&dir.path().join("t.csv.fit.json"));
    assert!(fit[0]["rows"][0]["fit"]["r_squared"].is_number());
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap().rsplit(',').next().unwrap().split(';').count(), 3);
}
