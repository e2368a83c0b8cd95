use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cdeflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdeflow"))
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn quick_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/quick.json")
        .to_string_lossy()
        .into_owned()
}

fn generate(dir: &Path, samples: &str) -> String {
    let data = dir.join("data").to_string_lossy().into_owned();
    let out = cdeflow(&[
        "generate-data",
        "--out",
        &data,
        "--samples",
        samples,
        "--length",
        "10",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    data
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(cdeflow(&[]).status.code(), Some(1));
    assert_eq!(cdeflow(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cdeflow(&["verify", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        cdeflow(&["verify", "--suite", "nope"]).status.code(),
        Some(1)
    );
    let out = cdeflow(&[
        "train",
        "--config",
        "/no/such.json",
        "--data",
        "x",
        "--out",
        "y",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn help_exits_0() {
    let out = cdeflow(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("drop-sweep"));
}

#[test]
fn generate_data_splits_80_10_10() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "50");
    for (split, n) in [("train", 40), ("val", 5), ("test", 5)] {
        let manifest =
            std::fs::read_to_string(dir.path().join("data").join(split).join("manifest.csv"))
                .unwrap();
        assert_eq!(manifest.lines().count(), n, "{split}");
    }
}

#[test]
fn verify_passes_and_a_corrupted_tolerance_exits_3() {
    let out = cdeflow(&["verify", "--suite", "spline"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 5);

    let dir = tempfile::tempdir().unwrap();
    let tol = dir.path().join("tol.json");
    std::fs::write(&tol, r#"{"spline.knot_interpolation": -1.0}"#).unwrap();
    let out = cdeflow(&[
        "verify",
        "--suite",
        "spline",
        "--tolerances",
        tol.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out)["passed"], false);
}

#[test]
fn bench_memory_reports_constant_adjoint_counts() {
    let out = cdeflow(&["bench-memory", "--steps", "5,50"]);
    assert!(out.status.success());
    let report = json(&out);
    assert_eq!(report["adjoint_constant"], true);
    assert_eq!(report["rows"][1]["direct"], 51 + 200);
    assert_eq!(
        cdeflow(&["bench-memory", "--steps", "5"]).status.code(),
        Some(1)
    );
}

#[test]
fn trained_checkpoint_reloads_to_the_same_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "60");
    let run = dir.path().join("run").to_string_lossy().into_owned();
    let out = cdeflow(&[
        "train",
        "--config",
        &quick_config(),
        "--data",
        &data,
        "--out",
        &run,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(Path::new(&run).join("metrics.jsonl")).unwrap();
    let epochs: Vec<Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(epochs.len(), 3);
    assert!(epochs[0].get("wall_ms").is_none());
    let timings = std::fs::read_to_string(Path::new(&run).join("timings.jsonl")).unwrap();
    assert_eq!(timings.lines().count(), 3);

    let checkpoint = Path::new(&run)
        .join("model.json")
        .to_string_lossy()
        .into_owned();
    let val_dir = Path::new(&data).join("val").to_string_lossy().into_owned();
    let eval = json(&cdeflow(&[
        "eval",
        "--checkpoint",
        &checkpoint,
        "--data",
        &val_dir,
    ]));
    let best = json(&out)["best_val_acc"].as_f64().unwrap();
    assert_eq!(eval["accuracy"].as_f64().unwrap(), best);
    assert_eq!(eval["samples"], 6);
}

#[test]
fn degenerate_sweep_equals_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "60");
    let run = dir.path().join("run").to_string_lossy().into_owned();
    let sweep = dir.path().join("sweep").to_string_lossy().into_owned();
    let config = quick_config();
    assert!(
        cdeflow(&["train", "--config", &config, "--data", &data, "--out", &run])
            .status
            .success()
    );
    let checkpoint = Path::new(&run)
        .join("model.json")
        .to_string_lossy()
        .into_owned();
    let eval = json(&cdeflow(&[
        "eval",
        "--checkpoint",
        &checkpoint,
        "--data",
        &data,
    ]));
    let out = cdeflow(&[
        "drop-sweep",
        "--config",
        &config,
        "--data",
        &data,
        "--fractions",
        "0",
        "--repeats",
        "1",
        "--model",
        "ncde",
        "--out",
        &sweep,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let result: Value =
        serde_json::from_slice(&std::fs::read(Path::new(&sweep).join("runs.json")).unwrap())
            .unwrap();
    assert_eq!(result["cells"].as_array().unwrap().len(), 1);
    assert_eq!(result["cells"][0]["mean"], eval["accuracy"]);
    assert_eq!(result["cells"][0]["std"], 0.0);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.lines().nth(2).unwrap().starts_with("Neural CDE"));
}

#[test]
fn divergent_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "30");
    let config = dir.path().join("c.json");
    std::fs::write(
        &config,
        r#"{"model": {"kind": "grudt", "hidden": 4}, "lr": 1e307, "max_epochs": 2}"#,
    )
    .unwrap();
    let run = dir.path().join("run").to_string_lossy().into_owned();
    let out = cdeflow(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        &data,
        "--out",
        &run,
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "30");
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"learning_rate": 0.1}"#).unwrap();
    let run = dir.path().join("run").to_string_lossy().into_owned();
    let out = cdeflow(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        &data,
        "--out",
        &run,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}
