//! End-to-end runs of the `lgc3d` binary: exit codes, JSON output and seed handling.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lgc3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgc3d"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_ok(args: &[&str]) -> Value {
    let out = lgc3d(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn flops_reports_reference_values_and_consistency() {
    let v = json_ok(&[
        "--json", "flops", "--config", "small", "--bands", "200", "--patch", "15", "--layers",
    ]);
    for key in [
        "params",
        "madds",
        "madds_ungrouped",
        "training_params",
        "reference",
        "consistent",
        "layers",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["reference"]["params"], 156_856);
    assert_eq!(v["reference"]["madds"], 6_898_600);
    assert_eq!(v["consistent"], true);
    let layers = v["layers"].as_array().unwrap();
    let sum: u64 = layers.iter().map(|l| l["madds_grouped"].as_u64().unwrap()).sum();
    assert_eq!(sum, v["madds"].as_u64().unwrap());
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(lgc3d(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(lgc3d(&["flops"]).status.code(), Some(2));

    let out = lgc3d(&[
        "eval",
        "--checkpoint",
        "/nonexistent/x.ckpt",
        "--cube",
        "/nonexistent/c",
        "--split",
        "/nonexistent/s",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is one JSON object");
    assert!(err["error"].is_string() && err["message"].is_string());

    let out = lgc3d(&["flops", "--config", "small", "--patch", "8"]);
    assert_eq!(out.status.code(), Some(1), "even patch sizes are rejected");
}

#[test]
fn seed_flag_drives_synthetic_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (p, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        json_ok(&[
            "--json",
            "--seed",
            seed,
            "synth",
            "--size",
            "12",
            "--bands",
            "5",
            "--out",
            s(p),
        ]);
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn full_pipeline_on_a_tiny_scene() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let (cube, split, ckpt, plan, map, runs) = (
        p("scene.cube"),
        p("split.json"),
        p("m.ckpt"),
        p("m.plan"),
        p("map.ppm"),
        p("runs.jsonl"),
    );

    let v = json_ok(&[
        "--json",
        "synth",
        "--size",
        "16",
        "--bands",
        "6",
        "--classes",
        "4",
        "--out",
        s(&cube),
    ]);
    assert_eq!(v["bands"], 6);
    let v = json_ok(&[
        "--json",
        "split",
        "--cube",
        s(&cube),
        "--ratio",
        "6:1:3",
        "--out",
        s(&split),
    ]);
    let total = v["train"].as_u64().unwrap() + v["val"].as_u64().unwrap() + v["test"].as_u64().unwrap();
    assert_eq!(total, 16 * 16);

    let v = json_ok(&[
        "--json",
        "--seed",
        "5",
        "train",
        "--cube",
        s(&cube),
        "--split",
        s(&split),
        "--config",
        "desk",
        "--patch",
        "5",
        "--epochs",
        "1",
        "--out",
        s(&ckpt),
        "--record",
        s(&runs),
        "--dataset",
        "tiny",
    ]);
    assert_eq!(v["runs"][0]["seed"], 5);
    assert!(ckpt.exists());

    let v = json_ok(&[
        "--json",
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--cube",
        s(&cube),
        "--split",
        s(&split),
        "--compiled",
    ]);
    let oa = v["oa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));

    let v = json_ok(&["--json", "compile", "--checkpoint", s(&ckpt), "--out", s(&plan)]);
    let layers = v["layers"].as_u64().unwrap() as usize;
    let gathers = v["layer_gathers"].as_array().unwrap();
    assert_eq!(gathers.len(), layers);
    assert!(gathers.iter().all(|g| g == 1));
    assert_eq!(v["restorations"], 1);
    assert_eq!(v["permutation_builds"], 0);

    let v = json_ok(&["--json", "bench", "--model", s(&plan), "--batch", "4", "--reps", "2"]);
    assert!(v["max_abs_diff"].as_f64().unwrap() <= 1e-4);

    json_ok(&[
        "--json",
        "map",
        "--checkpoint",
        s(&ckpt),
        "--cube",
        s(&cube),
        "--out",
        s(&map),
    ]);
    assert!(std::fs::read(&map).unwrap().starts_with(b"P6\n16 16\n"));

    let v = json_ok(&["--json", "report", "--runs", s(&runs)]);
    assert_eq!(v["runs"], 1);
}
