use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn tilin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilin"))
        .args(args)
        .output()
        .expect("running tilin")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stderr));
    })
}

fn base_args<'a>(cmd: &'a str, model: &'a str, input: &'a str) -> Vec<&'a str> {
    vec![cmd, "--model", model, "--input", input]
}

#[test]
fn unsupported_norm_is_a_usage_error() {
    let (m, i) = (fixture("tanh_mlp.json"), fixture("tanh_mlp_inputs.json"));
    let mut args = base_args("verify", &m, &i);
    args.extend(["--norm", "3"]);
    let out = tilin(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("norm"));
}

#[test]
fn missing_model_reports_an_error() {
    let i = fixture("tanh_mlp_inputs.json");
    let out = tilin(&["verify", "--model", "/nonexistent.json", "--input", &i]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn single_iteration_certifies_the_initial_radius() {
    let (m, i) = (fixture("tanh_mlp.json"), fixture("tanh_mlp_inputs.json"));
    let mut args = base_args("verify", &m, &i);
    args.extend(["--iters", "1", "--indices", "0,2"]);
    let out = tilin(&args);
    assert!(out.status.success());
    let reports = json(&out);
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[1]["input_id"], 2);
    for r in reports {
        assert_eq!(r["eps_cert"], 0.05);
        assert_eq!(r["iterations"], 1);
        assert_eq!(r["method"], "ti-lin");
    }
}

#[test]
fn strict_mode_flags_misclassified_inputs() {
    // Input [1, 2] is predicted as class 1.
    let (m, i) = (fixture("fnn_relu_2x2.json"), fixture("fnn_relu_2x2_inputs.json"));
    let mut args = base_args("verify", &m, &i);
    args.extend(["--indices", "0", "--label", "0"]);
    let relaxed = tilin(&args);
    assert!(relaxed.status.success());
    assert_eq!(json(&relaxed)[0]["misclassified"], true);
    args.push("--strict");
    assert_eq!(tilin(&args).status.code(), Some(2));
}

#[test]
fn zero_radius_bounds_are_point_values() {
    let (m, i) = (fixture("fnn_relu_2x2.json"), fixture("fnn_relu_2x2_inputs.json"));
    let mut args = base_args("bounds", &m, &i);
    args.extend(["--eps", "0", "--indices", "0"]);
    let out = tilin(&args);
    assert!(out.status.success());
    let report = &json(&out)[0];
    assert_eq!(report["eps"], 0.0);
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    let last = &layers[2];
    assert_eq!(last["lower"], serde_json::json!([2.0, 3.0]));
    assert_eq!(last["upper"], serde_json::json!([2.0, 3.0]));
}

#[test]
fn compare_emits_one_row_per_input_norm_and_policy() {
    let (m, i) = (fixture("tanh_mlp.json"), fixture("tanh_mlp_inputs.json"));
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("table.csv");
    let summary = dir.path().join("summary.json");
    let mut args = base_args("compare", &m, &i);
    let (csv_str, summary_str) = (csv_path.to_str().unwrap(), summary.to_str().unwrap());
    args.extend(["--out", csv_str, "--summary", summary_str, "--iters", "6"]);
    let out = tilin(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["input", "method", "norm", "eps_cert", "time", "improvement_pct"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 10 * 3);
    for row in &rows {
        if &row[1] == "ti-lin-midpoint" {
            assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
        }
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(summary).unwrap()).unwrap();
    assert_eq!(summary["ti-lin-forward"]["inf"]["inputs"], 10);
}

#[test]
fn compare_rejects_a_baseline_outside_the_policies() {
    let (m, i) = (fixture("tanh_mlp.json"), fixture("tanh_mlp_inputs.json"));
    let mut args = base_args("compare", &m, &i);
    args.extend(["--policies", "forward"]);
    assert_eq!(tilin(&args).status.code(), Some(1));
}

#[test]
fn oracle_check_passes_on_real_reports() {
    let (m, i) = (fixture("sigmoid_arctan_mlp.json"), fixture("sigmoid_arctan_mlp_inputs.json"));
    let mut args = base_args("oracle-check", &m, &i);
    args.extend(["--indices", "0..1", "--samples", "2000", "--eps", "0.2", "--norm", "2"]);
    let out = tilin(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let entries = json(&out);
    let checks = entries[0]["checks"].as_array().unwrap();
    let names: Vec<&str> = checks.iter().map(|c| c["oracle"].as_str().unwrap()).collect();
    assert_eq!(names, ["soundness", "soundness", "prediction", "attack"]);
}

#[test]
fn oracle_check_flags_an_inflated_radius() {
    let (m, i) = (fixture("affine_margin.json"), fixture("affine_margin_inputs.json"));
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("reports.json");
    let mut verify = base_args("verify", &m, &i);
    verify.extend(["--indices", "0", "--label", "0"]);
    let out = tilin(&verify);
    assert!(out.status.success());
    let mut reports = json(&out);
    // The true radius is 0.5; claim twice that.
    reports[0]["eps_cert"] = serde_json::json!(1.0);
    std::fs::write(&report_path, reports.to_string()).unwrap();

    let mut args = base_args("oracle-check", &m, &i);
    args.extend(["--indices", "0", "--label", "0", "--samples", "2000"]);
    args.extend(["--report", report_path.to_str().unwrap()]);
    let out = tilin(&args);
    assert_eq!(out.status.code(), Some(3));
    let checks = &json(&out)[0]["checks"];
    let attack = checks.as_array().unwrap().iter().find(|c| c["oracle"] == "attack").unwrap();
    assert_eq!(attack["violations"], 1);
}

#[test]
fn oracle_check_validates_bounds_reports() {
    let (m, i) = (fixture("tanh_mlp.json"), fixture("tanh_mlp_inputs.json"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bounds.json");
    let mut bounds = base_args("bounds", &m, &i);
    bounds.extend(["--eps", "0.1", "--indices", "0..1", "--norm", "1"]);
    bounds.extend(["--out", path.to_str().unwrap()]);
    assert!(tilin(&bounds).status.success());

    let mut check = base_args("oracle-check", &m, &i);
    check.extend(["--indices", "0..1", "--samples", "2000"]);
    check.extend(["--bounds", path.to_str().unwrap()]);
    let out = tilin(&check);
    assert_eq!(out.status.code(), Some(0));
    let entries = json(&out);
    assert_eq!(entries.as_array().unwrap().len(), 2);
    assert_eq!(entries[0]["source"], "bounds");

    // Collapse the output interval of input 1 onto its lower end.
    let mut reports: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let last = reports[1]["layers"].as_array_mut().unwrap().last_mut().unwrap();
    last["upper"] = last["lower"].clone();
    std::fs::write(&path, reports.to_string()).unwrap();
    let out = tilin(&check);
    assert_eq!(out.status.code(), Some(3));
    assert!(json(&out)[1]["checks"][0]["violations"].as_u64().unwrap() > 0);
}
