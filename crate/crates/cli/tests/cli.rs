use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
jobs = 1

[experiment]
seeds = [0]
thresholds = { mode = "pinned", bound = 4 }

[experiment.train]
epochs = 1
batch_size = 32

[[experiment.models]]
kind = "birnn"
hidden = 6

[[experiment.models]]
kind = "tcn"
hidden = 6

[[experiment.models]]
kind = "stgcn_lite"
hidden = 6

[[experiment.models]]
kind = "pdformer_lite"
hidden = 6
"#;

fn haulcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haulcast"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = haulcast(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn fixture_pipeline_writes_outputs_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["pipeline", "--default-fixture", "--config", &cfg, "--out", out.to_str().unwrap()]);
    }
    let metrics_a = fs::read(a.join("metrics.json")).unwrap();
    assert_eq!(metrics_a, fs::read(b.join("metrics.json")).unwrap());

    let rep = json(&a.join("metrics.json"));
    let f1 = rep["seeds"][0]["ensemble"]["metrics"]["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let geo = json(&a.join("predictions.geojson"));
    assert_eq!(geo["type"], "FeatureCollection");
    let features = geo["features"].as_array().unwrap();
    assert_eq!(features.len() as u64, rep["n_test"].as_u64().unwrap());
    for f in features.iter().take(50) {
        let ring = f["geometry"]["coordinates"][0].as_array().unwrap();
        assert_eq!(ring.len(), 5);
        assert_eq!(ring[0], ring[4]);
        let (lon, lat) = (ring[0][0].as_f64().unwrap(), ring[0][1].as_f64().unwrap());
        assert!((103.9..104.2).contains(&lon) && (30.5..30.8).contains(&lat), "{lon} {lat}");
        for key in ["cell_id", "slot", "pred_class", "true_class", "p0", "p1", "p2"] {
            assert!(!f["properties"][key].is_null(), "{key}");
        }
    }

    let preds = fs::read_to_string(a.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "cell_id,slot,p0,p1,p2,pred,true");
    assert!(a.join("confusion.csv").exists());
    assert!(a.join("history/seed0_tcn.csv").exists());

    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seeds"], serde_json::json!([0]));
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["experiment"]["train"]["epochs"], 1);
    assert!(!a.join("FAILED").exists());
}

#[test]
fn stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let dir = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    ok(&["synth", "--seed", "3", "--out", &dir("synth")]);
    let traj = format!("{}/trajectories.csv", dir("synth"));
    assert!(json(&tmp.path().join("synth/ground_truth.json"))["dwells"].as_array().unwrap().len() > 100);

    ok(&["ingest", "--input", &traj, "--out", &dir("ingest")]);
    let stays = fs::read_to_string(tmp.path().join("ingest/stay_points.csv")).unwrap();
    assert!(stays.lines().count() > 100);

    ok(&["features", "--input", &traj, "--config", &cfg, "--out", &dir("features")]);
    for f in ["activity.csv", "classes.csv", "adjacency.csv", "semantic.csv", "train.bin", "test.bin", "grid.json"] {
        assert!(tmp.path().join("features").join(f).exists(), "{f}");
    }

    ok(&["train", "--input", &traj, "--config", &cfg, "--out", &dir("train")]);
    assert!(tmp.path().join("train/models/seed0_birnn.bin").exists());
    assert!(tmp.path().join("train/history/seed0_pdformer_lite.csv").exists());

    ok(&["predict", "--input", &traj, "--config", &cfg, "--models", &dir("train"), "--out", &dir("predict")]);
    let preds = format!("{}/predictions.csv", dir("predict"));
    ok(&["evaluate", "--predictions", &preds, "--out", &dir("eval")]);
    let eval = json(&tmp.path().join("eval/evaluation.json"));
    let strict = eval["relaxed"]["strict"]["precision"].as_f64().unwrap();
    let relaxed = eval["relaxed"]["relaxed"]["precision"].as_f64().unwrap();
    assert!(relaxed >= strict);

    let out = haulcast(&["report", "--metrics", &format!("{}/evaluation.json", dir("eval"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("macro F1"));
}

#[test]
fn failures_leave_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let missing = tmp.path().join("missing.csv");
    let res = haulcast(&["pipeline", "--input", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(out.join("FAILED").exists());
    assert_eq!(json(&out.join("manifest.json"))["status"], "failed");

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "jobz = 1\n").unwrap();
    let res = haulcast(&["synth", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("bad.toml"));
}

#[test]
fn config_prints_parseable_settings() {
    let out = haulcast(&["config", "--seed", "4", "--horizon", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(v["experiment"]["horizon"].as_integer(), Some(2));
    assert_eq!(v["experiment"]["seeds"].as_array().unwrap().len(), 1);
}
