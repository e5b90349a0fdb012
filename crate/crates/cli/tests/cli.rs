//! Runs the `lightff` binary end to end on small synthetic problems.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lightff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, value: Value) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, value.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn synthetic_config(out: &Path) -> Value {
    json!({
        "dataset": {"kind": "synthetic", "n_per_class": 100, "num_classes": 3, "dim": 12, "separation": 8.0},
        "arch": [16, 16],
        "train": {"epochs": 3},
        "out": out,
    })
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn train_eval_sweep_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    let cfg = write_config(tmp.path(), synthetic_config(&model));
    let m = model.to_str().unwrap();

    let o = lightff(&["train", "--config", &cfg, "--algorithm", "ff-op"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(model.join("weights.bin").exists());

    for mode in ["op", "light-op", "mp"] {
        let o = lightff(&["eval", "--model", m, "--mode", mode]);
        assert_eq!(code(&o), 0, "{mode}: {}", stderr(&o));
    }
    let csv = std::fs::read_to_string(model.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset,algo,layers,error,mean_layers,avg_core_macs,avg_overhead_macs,wall_ms"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 8));
    let algos: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(algos, ["op", "light-op", "mp"]);

    let report: Value = serde_json::from_str(&std::fs::read_to_string(model.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "mp");

    let sweep = tmp.path().join("sweep.csv");
    let o = lightff(&["sweep", "--model", m, "--k", "-1,0,1", "--out", sweep.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("k,error,mean_layers"));
}

#[test]
fn flags_override_config_file_which_overrides_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    let mut value = synthetic_config(&model);
    value["train"]["learning_rate"] = json!(0.02);
    value["train"]["epochs"] = json!(2);
    let cfg = write_config(tmp.path(), value);

    let o = lightff(&[
        "train",
        "--preset",
        "mnist-desk",
        "--config",
        &cfg,
        "--epochs",
        "1",
        "--set",
        "train.batch_size=25",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let exp = &manifest(&model)["experiment"];
    assert_eq!(exp["train"]["epochs"], 1, "flag beats file");
    assert_eq!(exp["train"]["batch_size"], 25, "--set applies");
    assert!(
        (exp["train"]["learning_rate"].as_f64().unwrap() - 0.02).abs() < 1e-6,
        "file beats preset"
    );
    assert!(
        (exp["train"]["momentum"].as_f64().unwrap() - 0.95).abs() < 1e-6,
        "preset beats default"
    );
    assert_eq!(exp["dataset"]["kind"], "synthetic");
    assert_eq!(exp["arch"], json!([16, 16]));
}

#[test]
fn calibrate_rewrites_gates() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    let cfg = write_config(tmp.path(), synthetic_config(&model));
    assert_eq!(code(&lightff(&["train", "--config", &cfg])), 0);
    let m = model.to_str().unwrap();

    let o = lightff(&["calibrate", "--model", m, "--method", "stat", "--k", "-2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let low = manifest(&model)["calibration"]["gates"][0]["b"].as_f64().unwrap();
    let o = lightff(&["calibrate", "--model", m, "--k", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let high = manifest(&model)["calibration"]["gates"][0]["b"].as_f64().unwrap();
    // Larger k raises the threshold, so the bias -(mean + k std) drops.
    assert!(high < low, "{high} vs {low}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    let cfg = write_config(tmp.path(), synthetic_config(&model));

    let o = lightff(&["train", "--config", &cfg, "--algorithm", "pepita", "--arch", "8,8,8,8"]);
    assert_eq!(code(&o), 2, "pepita depth limit: {}", stderr(&o));

    let o = lightff(&["train", "--config", &cfg, "--set", "train.no_such_field=1"]);
    assert_eq!(code(&o), 2, "unknown field: {}", stderr(&o));

    let o = lightff(&["train", "--config", &cfg, "--mode", "pt"]);
    assert_eq!(code(&o), 2, "mode incompatible with ff-mp: {}", stderr(&o));

    let missing = tmp.path().join("nothing");
    let o = lightff(&["eval", "--model", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "missing model: {}", stderr(&o));

    let o = lightff(&[
        "train",
        "--config",
        &cfg,
        "--set",
        r#"dataset={"kind":"mnist","dir":"/nonexistent"}"#,
    ]);
    assert_eq!(code(&o), 3, "missing data: {}", stderr(&o));

    let o = lightff(&["train", "--config", &cfg, "--lr", "1e30", "--epochs", "2"]);
    assert_eq!(code(&o), 4, "divergence: {}", stderr(&o));
}
