//! End-to-end tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn occufit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occufit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn trout_fit_args(method: &str) -> Vec<String> {
    [
        "fit",
        "--family",
        "binomial",
        "--data",
        workspace_file("data/trout.csv").to_str().unwrap(),
        "--visits",
        "y1,y2,y3",
        "--detection",
        "1",
        "--occurrence",
        "1",
        "--method",
        method,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn trout_conditional_fit_matches_reference() {
    let args: Vec<String> = trout_fit_args("cl");
    let out = occufit(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let doc = stdout_json(&out);
    let fit = &doc["fit"];
    assert_eq!(fit["model"], "zib-homogeneous");
    let p = fit["theta_hat"][0].as_f64().unwrap();
    let psi = fit["psi_hat"].as_f64().unwrap();
    assert!((p - 0.533454).abs() < 1e-5, "p = {p}");
    assert!((psi - 0.462557).abs() < 1e-5, "psi = {psi}");
    assert_eq!(doc["manifest"]["subcommand"], "fit");
    assert!(doc["manifest"]["input_digest"]
        .as_str()
        .unwrap()
        .starts_with("sha256:"));
    assert!(doc.get("ht_estimate").is_none());
    assert!(doc.get("bias_analysis").is_none());
}

#[test]
fn trout_ml_equals_cl() {
    let cl_args = trout_fit_args("cl");
    let ml_args = trout_fit_args("ml");
    let cl = stdout_json(&occufit(
        &cl_args.iter().map(String::as_str).collect::<Vec<_>>(),
    ));
    let ml = stdout_json(&occufit(
        &ml_args.iter().map(String::as_str).collect::<Vec<_>>(),
    ));
    let dp = cl["fit"]["theta_hat"][0].as_f64().unwrap()
        - ml["fit"]["theta_hat"][0].as_f64().unwrap();
    let dpsi =
        cl["fit"]["psi_hat"].as_f64().unwrap() - ml["fit"]["psi_hat"].as_f64().unwrap();
    assert!(dp.abs() < 1e-6, "p differs by {dp}");
    assert!(dpsi.abs() < 1e-6, "psi differs by {dpsi}");
}

#[test]
fn trout_ht_reports_weighted_estimate() {
    let mut args = trout_fit_args("cl");
    args.push("--ht".into());
    let doc = stdout_json(&occufit(
        &args.iter().map(String::as_str).collect::<Vec<_>>(),
    ));
    let ht = &doc["ht_estimate"];
    assert_eq!(ht["n"], 77);
    assert_eq!(ht["detected"], 32);
    let psi_tilde = ht["psi_bar_hat"].as_f64().unwrap();
    assert!((psi_tilde - 0.462557).abs() < 1e-5, "psi_tilde = {psi_tilde}");
    assert_eq!(ht["boundary"], false);
}

#[test]
fn ht_without_cl_is_a_usage_error() {
    let mut args = trout_fit_args("ml");
    args.push("--ht".into());
    let out = occufit(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gamma_mixture_ml_equals_cl_and_reports_bias() {
    // Overdispersed counts with plenty of zeros.
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("counts.csv");
    let mut rows = String::from("y\n");
    for (k, m) in [(0u32, 160u32), (1, 28), (2, 18), (3, 12), (4, 8), (5, 6), (7, 5), (10, 3)] {
        for _ in 0..m {
            rows.push_str(&format!("{k}\n"));
        }
    }
    std::fs::write(&csv, rows).unwrap();
    let base = [
        "fit",
        "--family",
        "poisson",
        "--data",
        csv.to_str().unwrap(),
        "--y",
        "y",
        "--mixture",
        "gamma",
    ];
    let cl = stdout_json(&occufit(&[&base[..], &["--method", "cl"]].concat()));
    let ml = stdout_json(&occufit(&[&base[..], &["--method", "ml"]].concat()));
    for j in 0..2 {
        let a = cl["fit"]["theta_hat"][j].as_f64().unwrap();
        let b = ml["fit"]["theta_hat"][j].as_f64().unwrap();
        assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "theta[{j}]: {a} vs {b}");
    }
    let dpsi =
        cl["fit"]["psi_hat"].as_f64().unwrap() - ml["fit"]["psi_hat"].as_f64().unwrap();
    assert!(dpsi.abs() < 1e-6, "psi differs by {dpsi}");
    let rho = cl["bias_analysis"]["rho"].as_f64().unwrap();
    assert!(rho > 0.0 && rho < 1.0, "rho = {rho}");
}

#[test]
fn binomial_count_above_visits_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "y\n5\n1\n0\n").unwrap();
    let out = occufit(&[
        "fit",
        "--family",
        "binomial",
        "--data",
        csv.to_str().unwrap(),
        "--y",
        "y",
        "--t",
        "3",
        "--method",
        "ml",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = occufit(&["fit", "--nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_every_subcommand() {
    for sub in ["fit", "simulate", "bias-curve"] {
        let out = occufit(&[sub, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--help"));
    }
}

fn mini_config(dir: &Path) -> PathBuf {
    let path = dir.join("mini.toml");
    std::fs::write(
        &path,
        r#"
scenario = "a"
n = 80
replicates = 3
seed = 11
psi = 0.5
mu = 2.0
kappa = 100000000.0

[[fitters]]
name = "hom-cl"
method = "cl"
detection = { kind = "constant" }
occurrence = { kind = "constant" }
"#,
    )
    .unwrap();
    path
}

#[test]
fn simulate_writes_all_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = mini_config(dir.path());
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        let st = occufit(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--scenario",
            "a",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    }
    for name in ["records.csv", "summary.csv", "summary.json", "manifest.json"] {
        assert!(out1.join(name).exists(), "missing {name}");
    }
    for name in ["records.csv", "summary.csv", "summary.json"] {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out1.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["replicates"], 3);
    assert_eq!(summary["rows"][0]["fitter"], "hom-cl");
}

#[test]
fn simulate_scenario_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = mini_config(dir.path());
    let out = occufit(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--scenario",
        "b",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_replicate_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let config = mini_config(dir.path());
    let out = dir.path().join("r5");
    let st = occufit(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--replicates",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["replicates"], 5);
}

#[test]
fn bias_curve_single_equidispersed_point_is_unbiased() {
    let out = occufit(&[
        "bias-curve",
        "--mu",
        "1",
        "--psi",
        "0.5",
        "--n",
        "200",
        "--kappa-grid",
        "100000000:100000000:1",
        "--replicates",
        "200",
        "--seed",
        "5",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let data_line = text.lines().nth(1).expect("one data row");
    let fields: Vec<f64> = data_line.split(',').map(|v| v.parse().unwrap()).collect();
    assert!(fields[2].abs() < 5.0, "empirical bias {} pct", fields[2]);
    assert!(fields[3].abs() < 1e-4, "asymptotic bias {} pct", fields[3]);
}

#[test]
fn bias_curve_asymptote_at_unit_dispersion() {
    let out = occufit(&[
        "bias-curve",
        "--mu",
        "1",
        "--psi",
        "0.5",
        "--n",
        "50",
        "--kappa-grid",
        "1:1:1",
        "--replicates",
        "2",
        "--seed",
        "5",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let asym: f64 = fields[3].parse().unwrap();
    assert!((asym - -41.0414067).abs() < 1e-6, "asym = {asym}");
}

#[test]
fn bias_curve_from_bundled_config_with_overrides() {
    let config = workspace_file("configs/figure1.toml");
    let out = occufit(&[
        "bias-curve",
        "--config",
        config.to_str().unwrap(),
        "--kappa-grid",
        "1:100:3",
        "--replicates",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 4, "header plus three grid rows");
    // The manifest goes to stderr when the CSV takes stdout.
    let manifest: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("manifest JSON on stderr");
    assert_eq!(manifest["subcommand"], "bias-curve");
}

#[test]
fn bias_curve_bad_grid_is_a_usage_error() {
    let out = occufit(&[
        "bias-curve",
        "--mu",
        "1",
        "--psi",
        "0.5",
        "--n",
        "50",
        "--kappa-grid",
        "10:1:5",
        "--replicates",
        "2",
        "--seed",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
