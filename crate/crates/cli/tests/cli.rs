use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn liebox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liebox"))
        .args(args)
        .output()
        .expect("spawn liebox")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("json report")
}

fn data_rows(out: &Output) -> Vec<Vec<String>> {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn pi_table_csv_order_three() {
    let out = liebox(&["pi-table", "--order", "3", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r[1] != "0").count(), 4);
}

#[test]
fn baker_family_passes() {
    let out = liebox(&["identities", "--family", "baker", "--no-timestamp"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["passed"], Value::Bool(true));
    assert_eq!(v["command"], "identities");
}

#[test]
fn unknown_model_is_usage_error() {
    let out = liebox(&["bracket", "--model", "nope", "--word", "12"]);
    assert_eq!(out.status.code(), Some(2));
    let out = liebox(&["bracket", "--word", "12"]);
    assert_eq!(out.status.code(), Some(2));
    let out = liebox(&["pi-table", "--order", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn no_timestamp_is_byte_stable() {
    let args = [
        "bracket",
        "--model",
        "heisenberg",
        "--word",
        "12",
        "--at",
        "0.3,-0.2,0.1",
        "--no-timestamp",
    ];
    let a = liebox(&args);
    let b = liebox(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert!(json(&a).get("timestamp").is_none());
    let with = liebox(&args[..args.len() - 1]);
    assert!(json(&with)["timestamp"].is_u64());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.json",
        r#"{"model": "grushin", "seed": 7, "timestamp": false, "metric": {"segments": 5}}"#,
    );
    let out = liebox(&["--config", &cfg, "bracket", "--word", "12"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["config"]["model"], "grushin");
    assert_eq!(v["config"]["seed"], 7);
    assert_eq!(v["config"]["metric"]["segments"], 5);
    assert_eq!(v["config"]["metric"]["seed"], 7);

    let out = liebox(&[
        "--config",
        &cfg,
        "--seed",
        "11",
        "--segments",
        "3",
        "--model",
        "heisenberg",
        "bracket",
        "--word",
        "12",
    ]);
    let v = json(&out);
    assert_eq!(v["config"]["model"], "heisenberg");
    assert_eq!(v["config"]["seed"], 11);
    assert_eq!(v["config"]["metric"]["segments"], 3);

    let bad = write(dir.path(), "bad.json", r#"{"sede": 1}"#);
    assert_eq!(
        liebox(&["--config", &bad, "pi-table", "--order", "2"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn output_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pi.json");
    let p = path.to_string_lossy();
    let out = liebox(&["pi-table", "--order", "2", "-o", &p]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["tool"], "liebox");
}

#[test]
fn witness_expectations() {
    let dir = tempfile::tempdir().unwrap();
    // [[x1,x2],x3] + [[x2,x3],x1] + [[x3,x1],x2] expanded: the Jacobi sum.
    let mut terms = Vec::new();
    for (a, b, c) in [(1u8, 2u8, 3u8), (2, 3, 1), (3, 1, 2)] {
        for (w, s) in [
            ([a, b, c], "1"),
            ([b, a, c], "-1"),
            ([c, a, b], "-1"),
            ([c, b, a], "1"),
        ] {
            terms.push(serde_json::json!({"word": w, "coeff": s}));
        }
    }
    let jac = serde_json::json!({"alphabet": 3, "terms": terms}).to_string();
    let jac = write(dir.path(), "jacobi.json", &jac);
    let out = liebox(&["witness", "--poly", &jac, "--expect", "trivial"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert_eq!(json(&out)["result"]["trivial"], true);
    let out = liebox(&["witness", "--poly", &jac, "--expect", "nontrivial"]);
    assert_eq!(out.status.code(), Some(1));

    let one = write(
        dir.path(),
        "one.json",
        r#"{"alphabet": 2, "terms": [{"word": [1, 2], "coeff": "1"}, {"word": [2, 1], "coeff": "-1"}]}"#,
    );
    let out = liebox(&["witness", "--poly", &one, "--expect", "nontrivial"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["result"]["trivial"], false);
}

#[test]
fn pinv_sweep_slope() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "a.csv", "1,2\n2,4\n3,6\n1,1\n");
    let b = write(dir.path(), "b.csv", "1\n0\n2\n1\n");
    let out = liebox(&[
        "pinv",
        "--matrix",
        &m,
        "--rhs",
        &b,
        "--lambda-sweep",
        "--expect-slope",
        "2",
        "--format",
        "csv",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 9);
    let errs: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(errs.windows(2).all(|w| w[0] < w[1]));

    let missing = dir.path().join("none.csv");
    let out = liebox(&["pinv", "--matrix", &missing.to_string_lossy(), "--rhs", &b]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn heisenberg_distances() {
    let out = liebox(&[
        "--model",
        "heisenberg",
        "--no-timestamp",
        "distance",
        "--from",
        "0,0,0",
        "--to",
        "0.2,-0.1,0.05",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["passed"], true);
    let text = v["result"].to_string();
    for k in ["fl", "cc", "rho"] {
        assert!(text.contains(k), "missing {k} in {text}");
    }
}

#[test]
fn flow_of_flat_field_is_translation() {
    let out = liebox(&[
        "--model", "flat2", "flow", "--field", "2", "--time", "-0.5", "--at", "1,1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = json(&out)["result"].to_string();
    assert!(text.contains("0.5"), "{text}");
}

#[test]
fn suite_reports_each_criterion() {
    let out = liebox(&["suite", "--quick", "--only", "1,2,12", "--no-timestamp"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let v = json(&out);
    let crit = v["result"].as_array().expect("criteria");
    assert_eq!(crit.len(), 3);
    assert!(crit.iter().all(|c| c["passed"] == true));
}
