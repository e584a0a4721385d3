use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn slicewise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicewise"))
        .args(args)
        .env_remove("SLICEWISE_HARDWARE")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn ingest_golden(dir: &Path) -> String {
    let path = dir.join("q.json");
    let out = slicewise(&[
        "ingest",
        fixture("ncu_raw.csv").to_str().unwrap(),
        "--query-id",
        "Q21",
        "--cpu-overhead",
        "0.02",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    path.to_str().unwrap().to_owned()
}

#[test]
fn ingest_writes_versioned_profile() {
    let out = slicewise(&["ingest", fixture("golden.csv").to_str().unwrap()]);
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["manifest_hash"].as_str().unwrap().len(), 64);
    assert_eq!(v["query_id"], "golden");
    assert_eq!(v["kernels"].as_array().unwrap().len(), 3);
}

#[test]
fn ingest_missing_column_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "kernel_name,duration_ns,dram_bytes,int_ops\nk,1,2,3\n").unwrap();
    let out = slicewise(&["ingest", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("l2_requests"));
}

#[test]
fn ingest_missing_file_exits_1() {
    let out = slicewise(&["ingest", "/definitely/not/here.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_row_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        "kernel_name,duration_ns,dram_bytes,l2_requests,int_ops\nk,1,2,3,4\nk,1,x,3,4\n",
    )
    .unwrap();
    let out = slicewise(&["ingest", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn predict_identity_and_mig() {
    let dir = tempfile::tempdir().unwrap();
    let q = ingest_golden(dir.path());
    let v = json(&slicewise(&["predict", &q, "--alloc", "1,1,1,1"]));
    assert_eq!(v["result"]["prediction"]["slowdown"], 1.0);

    let v = json(&slicewise(&["predict", &q, "--mig", "3g.20gb"]));
    assert_eq!(v["result"]["target_allocation"]["dram_bw_fraction"], 0.5);
    assert!(v["result"]["prediction"]["slowdown"].as_f64().unwrap() >= 1.0);

    let out = slicewise(&["predict", &q, "--mig", "9g.99gb"]);
    assert_eq!(out.status.code(), Some(2));
    let out = slicewise(&["predict", &q, "--alloc", "1,1,1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn roofline_plot_has_sidecar_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let q = ingest_golden(dir.path());
    let plot = dir.path().join("plot.csv");
    let v = json(&slicewise(&["roofline", &q, "--level", "l2", "--plot", plot.to_str().unwrap()]));
    assert_eq!(v["result"]["points"][0]["label"], "Q21");
    let csv = std::fs::read_to_string(&plot).unwrap();
    assert!(csv.starts_with("series,ai,throughput,above_roof\nceiling:L2,"));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("plot.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(side["manifest_hash"], v["manifest_hash"]);
}

#[test]
fn advise_reports_whole_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let q = ingest_golden(dir.path());
    let v = json(&slicewise(&["advise", "--profile", &q, "--objective", "min-latency"]));
    assert_eq!(v["result"]["rows"].as_array().unwrap().len(), 18);
    assert_eq!(v["result"]["ranked_by"], "min_latency");

    let out = slicewise(&["advise", "--profile", &q, "--objective", "cheapest"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn advise_curve_plot() {
    let dir = tempfile::tempdir().unwrap();
    let q = ingest_golden(dir.path());
    let plot = dir.path().join("curve.csv");
    json(&slicewise(&[
        "advise", "--profile", &q, "--curve", "1/8,0.25,0.5,1", "--plot", plot.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(&plot).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().last().unwrap().starts_with("Q21,1,"));
}

#[test]
fn concurrency_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let q = ingest_golden(dir.path());
    let args = ["concurrency", "--profile", &q, "--doc", "7", "--seed", "7"];
    let a = slicewise(&args);
    let b = slicewise(&args);
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    assert_eq!(v["manifest"]["seed"], 7);
    assert_eq!(v["result"]["doc"], 7);

    let out = slicewise(&["concurrency", "--profile", &q, "--doc", "2", "--config", "cfg01:7g"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn hardware_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let q = ingest_golden(dir.path());
    let text = slicewise::hardware::BUNDLED_A100_TOML;
    let cut = text.find("[[mig_catalog]]").unwrap();
    let second = cut + 1 + text[cut + 1..].find("[[mig_catalog]]").unwrap();
    let hw = dir.path().join("one.toml");
    std::fs::write(&hw, &text[..second]).unwrap();

    let out = Command::new(env!("CARGO_BIN_EXE_slicewise"))
        .args(["advise", "--profile", &q])
        .env("SLICEWISE_HARDWARE", &hw)
        .output()
        .unwrap();
    let v = json(&out);
    assert_eq!(v["result"]["rows"].as_array().unwrap().len(), 1);
    assert_eq!(v["manifest"]["hardware"], hw.to_str().unwrap());

    std::fs::write(&hw, "name = \"broken\"\n").unwrap();
    let out = slicewise(&["--hw", hw.to_str().unwrap(), "advise", "--profile", &q]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_synthetic_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("roofline.csv");
    let v = json(&slicewise(&[
        "eval", "--synthetic", "--seed", "4", "--queries", "30", "--roofline-samples", samples.to_str().unwrap(),
    ]));
    let r = v["result"]["roofline"]["median"].as_f64().unwrap();
    let l = v["result"]["linear"]["median"].as_f64().unwrap();
    assert!(r <= l);
    assert_eq!(v["result"]["roofline"]["samples"], 150);

    let v = json(&slicewise(&["eval", "--samples", samples.to_str().unwrap()]));
    assert_eq!(v["result"]["samples"]["median"].as_f64().unwrap(), r);

    let out = slicewise(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn extrapolate_needs_plan() {
    let dir = tempfile::tempdir().unwrap();
    let q = ingest_golden(dir.path());
    let out = slicewise(&["extrapolate", &q, "--target-sf", "4"]);
    assert_eq!(out.status.code(), Some(2));

    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&q).unwrap()).unwrap();
    v["plan"] = serde_json::json!([{"op": "scan", "rows": 1e8, "width": 4.0}]);
    std::fs::write(&q, v.to_string()).unwrap();
    let out = slicewise(&["extrapolate", &q, "--target-sf", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Crystal model"));

    let r = json(&slicewise(&["extrapolate", &q, "--target-sf", "4", "--crystal"]));
    let t = r["result"]["predicted_time"].as_f64().unwrap();
    assert!((t - 4.0 * 4e8 / 1555e9).abs() < 1e-15);
}
