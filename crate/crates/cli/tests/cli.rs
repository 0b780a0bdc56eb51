use std::path::Path;
use std::process::{Command, Output};

use fedgraph::data::write_idx;

fn fedgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedgraph"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("FEDGRAPH_DATA")
        .output()
        .unwrap()
}

fn fixture(dir: &Path) {
    for (images, labels, n) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 120),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 30),
    ] {
        let labels_v: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let pixels: Vec<u8> = (0..n * 9)
            .map(|i| {
                let (row, p) = (i / 9, i % 9);
                let bright = (p < 4) == (row % 2 == 0);
                (if bright { 200 } else { 40 } + (i * 37 % 23)) as u8
            })
            .collect();
        write_idx(&dir.join(images), &dir.join(labels), 3, 3, &pixels, &labels_v).unwrap();
    }
}

fn tiny_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let out = fedgraph(&["show-config", "--preset", "desk"]);
    assert!(out.status.success());
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["data"]["dir"] = data.to_string_lossy().into();
    cfg["data"]["train_samples"] = serde_json::Value::Null;
    cfg["data"]["test_samples"] = serde_json::Value::Null;
    cfg["partition"]["num_clients"] = 2.into();
    cfg["client"]["width"] = 4.into();
    cfg["client"]["hidden_layers"] = 2.into();
    cfg["client"]["epochs"] = 3.into();
    cfg["privacy"]["probe"]["outer_rounds"] = 2.into();
    cfg["privacy"]["probe"]["sample_budget"] = 4.into();
    cfg["clustering"]["delta"] = 4.into();
    cfg["clustering"]["validation"]["grid"] = serde_json::json!([1, 4]);
    cfg["clustering"]["validation"]["repeats"] = 1.into();
    cfg["server"]["width"] = 4.into();
    cfg["server"]["epochs"] = 1.into();
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn show_config_applies_seed_override() {
    let out = fedgraph(&["show-config", "--preset", "paper", "--seed", "42"]);
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 42);
    assert_eq!(cfg["partition"]["num_clients"], 50);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "unknown": true}"#).unwrap();
    let out = fedgraph(&["partition", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = dir.path().join("nowhere");
    let out = fedgraph(&["partition", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fetch_fashion_mnist"));
}

#[test]
fn tiny_run_all_then_stage_failure_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    fixture(&data);
    let cfg = tiny_config(dir.path(), &data);
    let cfg = cfg.to_str().unwrap();

    let run = dir.path().join("run");
    let out = fedgraph(&["run-all", "--config", cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("crc") && table.contains("baseline"), "{table}");
    for file in ["metrics/summary.json", "figures/method_comparison.csv", "checkpoints/partition.fgck"] {
        assert!(run.join(file).is_file(), "{file}");
    }
    let report = fedgraph(&["report", "--out", run.to_str().unwrap()]);
    assert!(report.status.success());
    assert_eq!(report.stdout, out.stdout);

    let fresh = dir.path().join("fresh");
    let out = fedgraph(&["train-server", "--config", cfg, "--out", fresh.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}
