use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sarcd_core::depth::read_rdm;
use serde_json::Value;

fn sarcd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sarcd"))
        .current_dir(dir)
        .env_remove("SARCD_THREADS")
        .args(args)
        .output()
        .expect("spawn sarcd")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = sarcd(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn scene(dir: &Path, name: &str, spec: Option<&str>) {
    match spec {
        Some(json) => {
            fs::write(dir.join("spec.json"), json).unwrap();
            ok(dir, &["synth", "--spec", "spec.json", "--out", name]);
        }
        None => {
            ok(dir, &["synth", "--seed", "3", "--out", name]);
        }
    }
}

#[test]
fn help_lists_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sarcd(tmp.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "synth", "dilate", "conf-gt", "filter", "interp", "accumulate", "toy-train", "infer", "evaluate", "pipeline",
        "bench", "plot",
    ] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&sarcd(d, &["dilate", "--bogus"])), 2);
    assert_eq!(code(&sarcd(d, &["frobnicate"])), 2);
    scene(d, "s", None);
    let bad_conn = sarcd(d, &["dilate", "--radar", "s/radar.rdm", "--mono", "s/mono.rdm", "--out", "x.rdm", "--connectivity", "6"]);
    assert_eq!(code(&bad_conn), 2);
    let bad_tau = sarcd(d, &["dilate", "--radar", "s/radar.rdm", "--mono", "s/mono.rdm", "--out", "x.rdm", "--tau1", "-1"]);
    assert_eq!(code(&bad_tau), 2);
    let missing = sarcd(d, &["infer", "--net", "rcanet", "--weights", "w.rdw", "--out", "c.rdm"]);
    assert_eq!(code(&missing), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_sarcd"))
        .current_dir(d)
        .env("SARCD_THREADS", "0")
        .args(["bench", "--width", "32", "--height", "32", "--radar-points", "3", "--repetitions", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn data_errors_exit_3_with_stage_name() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = sarcd(d, &["dilate", "--radar", "nope.rdm", "--mono", "nope.rdm", "--out", "x.rdm"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dilate"));

    fs::write(d.join("junk.rdm"), b"XXXX\x01\x00\x00\x00").unwrap();
    assert_eq!(code(&sarcd(d, &["interp", "--in", "junk.rdm", "--out", "o.rdm"])), 3);

    scene(d, "s", None);
    fs::write(d.join("w.rdw"), b"RDW1 truncated").unwrap();
    let out = sarcd(
        d,
        &["infer", "--net", "msgnet", "--weights", "w.rdw", "--mono", "s/mono.rdm", "--radar", "s/radar.rdm", "--dfr", "s/radar.rdm", "--out", "d.rdm"],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
}

#[test]
fn diverging_training_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, "s", None);
    let out = sarcd(
        d,
        &["toy-train", "--scene", "s", "--net", "rcanet", "--steps", "3", "--optimizer", "sgd", "--lr", "1e300"],
    );
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, "a", None);
    scene(d, "b", None);
    let mut names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 10);
    for n in names {
        assert!(fs::read(d.join("a").join(&n)).unwrap() == fs::read(d.join("b").join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, "s", None);
    let stats = ok(d, &["dilate", "--radar", "s/radar.rdm", "--mono", "s/mono.rdm", "--out", "ddr.rdm", "--roi-out", "roi.rdm", "--stats", "stats.json"]);
    for key in ["seeds_grown", "seeds_skipped", "contested_pixels", "wall_time_s"] {
        assert!(stats.get(key).is_some(), "missing {key}");
    }
    assert_eq!(stats["seeds_grown"], 40);
    let saved: Value = serde_json::from_str(&fs::read_to_string(d.join("stats.json")).unwrap()).unwrap();
    assert_eq!(saved["roi_pixels"], stats["roi_pixels"]);

    let acc = ok(d, &["accumulate", "--scene", "s", "--frames", "5", "--out", "dacc.rdm"]);
    assert!(acc["accumulated_pixels"].as_u64() > acc["current_only_pixels"].as_u64());
    let one = ok(d, &["accumulate", "--scene", "s", "--frames", "1", "--out", "d1.rdm"]);
    assert_eq!(one["accumulated_pixels"], one["current_only_pixels"]);

    ok(d, &["interp", "--in", "dacc.rdm", "--out", "dint.rdm"]);
    ok(d, &["conf-gt", "--ddr", "ddr.rdm", "--dint", "dint.rdm", "--roi", "roi.rdm", "--tau2", "0.4", "--out", "c.rdm"]);
    assert!(d.join("c.mask.rdm").exists());
    let f = ok(d, &["filter", "--ddr", "ddr.rdm", "--conf", "c.rdm", "--tau3", "0.5", "--out", "dfr.rdm"]);

    let ddr = read_rdm(d.join("ddr.rdm")).unwrap();
    let dfr = read_rdm(d.join("dfr.rdm")).unwrap();
    assert_eq!(f["kept_pixels"].as_u64().unwrap() as usize, dfr.valid_count());
    assert!(dfr.valid_pixels().is_subset_of(&ddr.valid_pixels()));
    for (r, c, v) in dfr.valid_iter() {
        assert_eq!(v, ddr.get(r, c));
    }
    // re-filtering the filtered map changes nothing
    ok(d, &["filter", "--ddr", "dfr.rdm", "--conf", "c.rdm", "--tau3", "0.5", "--out", "dfr2.rdm"]);
    assert!(fs::read(d.join("dfr.rdm")).unwrap() == fs::read(d.join("dfr2.rdm")).unwrap(), "filter not idempotent");

    let ev = ok(d, &["evaluate", "--pred", "s/mono.rdm", "--gt", "s/lidar.rdm", "--ranges", "50,80", "--json", "ev.json"]);
    let b = ev["buckets"].as_array().unwrap();
    assert_eq!(b.len(), 2);
    assert!(b[1]["rmse_mm"].as_f64() >= b[1]["mae_mm"].as_f64());
    assert!(d.join("ev.json").exists());

    ok(d, &["plot", "--depth", "ddr.rdm", "--out", "ddr.svg"]);
    assert!(fs::read_to_string(d.join("ddr.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn zero_weight_pipeline_is_identity_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, "s", Some(r#"{"radar_sigma": 0.0, "outlier_fraction": 0.0, "seed": 4}"#));
    ok(d, &["pipeline", "--scene", "s", "--out", "r1", "--zero-weights"]);
    ok(d, &["pipeline", "--scene", "s", "--out", "r2", "--zero-weights"]);
    assert!(fs::read(d.join("r1/dhat.rdm")).unwrap() == fs::read(d.join("s/mono.rdm")).unwrap(), "output is not mono");

    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("r1/report.json")).unwrap()).unwrap();
    assert_eq!(report["prediction"], report["mono_baseline"]);

    // identical apart from the output directory recorded in the config
    let mut other: Value = serde_json::from_str(&fs::read_to_string(d.join("r2/report.json")).unwrap()).unwrap();
    other["config"]["out"] = report["config"]["out"].clone();
    assert!(report == other, "reports differ");
    for name in ["ddr.rdm", "roi.rdm", "dint.rdm", "conf.rdm", "dfr.rdm", "dhat.rdm", "msgnet.rdw", "rcanet.rdw"] {
        assert!(fs::read(d.join("r1").join(name)).unwrap() == fs::read(d.join("r2").join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn pipeline_rejects_missing_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sarcd(tmp.path(), &["pipeline", "--scene", "absent", "--out", "o"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn trained_pipeline_beats_mono() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, "s", Some(r#"{"radar_sigma": 0.1, "radar_points": 100, "seed": 2}"#));
    let summary = ok(d, &["pipeline", "--scene", "s", "--out", "run"]);
    let pred = summary["prediction"].as_array().unwrap().last().unwrap()["mae_mm"].as_f64().unwrap();
    let mono = summary["mono_baseline"].as_array().unwrap().last().unwrap()["mae_mm"].as_f64().unwrap();
    assert!(pred < mono, "pipeline {pred} vs mono {mono}");
    for name in ["loss_rcanet.csv", "loss_msgnet.csv", "timings.json"] {
        assert!(d.join("run").join(name).exists(), "{name}");
    }
    ok(d, &["plot", "--loss", "run/loss_msgnet.csv", "--out", "loss.svg"]);
    assert!(fs::read_to_string(d.join("loss.svg")).unwrap().contains("polyline"));
}

#[test]
fn train_then_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, "s", None);
    let t = ok(
        d,
        &["toy-train", "--scene", "s", "--net", "rcanet", "--steps", "10", "--report", "curve.csv", "--weights-out", "rca.rdw"],
    );
    assert_eq!(t["steps"], 10);
    assert_eq!(fs::read_to_string(d.join("curve.csv")).unwrap().lines().count(), 12);
    ok(d, &["dilate", "--radar", "s/radar.rdm", "--mono", "s/mono.rdm", "--out", "ddr.rdm"]);
    let inf = ok(d, &["infer", "--net", "rcanet", "--weights", "rca.rdw", "--image", "s/image.png", "--ddr", "ddr.rdm", "--out", "conf.rdm"]);
    let ddr = read_rdm(d.join("ddr.rdm")).unwrap();
    assert_eq!(inf["valid_pixels"].as_u64().unwrap() as usize, ddr.valid_count());

    ok(
        d,
        &["toy-train", "--scene", "s", "--net", "msgnet", "--steps", "5", "--rcanet-weights", "rca.rdw", "--weights-out", "msg.rdw"],
    );
    ok(d, &["filter", "--ddr", "ddr.rdm", "--conf", "conf.rdm", "--out", "dfr.rdm"]);
    ok(
        d,
        &["infer", "--net", "msgnet", "--weights", "msg.rdw", "--mono", "s/mono.rdm", "--radar", "s/radar.rdm", "--dfr", "dfr.rdm", "--out", "dhat.rdm"],
    );
    assert_eq!(read_rdm(d.join("dhat.rdm")).unwrap().dims(), (64, 64));
}

#[test]
fn bench_reports_requested_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let r = ok(d, &["bench", "--width", "64", "--height", "64", "--radar-points", "5", "--repetitions", "1", "--json", "b.json"]);
    assert_eq!(r["samples_s"].as_array().unwrap().len(), 1);
    assert_eq!(r["repetitions"], 1);
    assert_eq!(r["execution"], "sequential");
    assert!(r["median_s"].as_f64().unwrap() > 0.0);
    assert!(d.join("b.json").exists());

    let p = Command::new(env!("CARGO_BIN_EXE_sarcd"))
        .current_dir(d)
        .env("SARCD_THREADS", "2")
        .args(["bench", "--width", "64", "--height", "64", "--radar-points", "5", "--repetitions", "3", "--parallel"])
        .output()
        .unwrap();
    assert!(p.status.success());
    let v: Value = serde_json::from_slice(&p.stdout).unwrap();
    assert_eq!(v["samples_s"].as_array().unwrap().len(), 3);
    assert_eq!(v["seeds_grown"], r["seeds_grown"]);
}
