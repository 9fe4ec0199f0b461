use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ibss(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibss"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ibss(dir, args);
    assert!(
        out.status.success(),
        "ibss {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TOY: &[&str] = &[
    "--set",
    "synth.source=toy",
    "--set",
    "bss.min_count=300",
    "--set",
    "bss.strategy={grid={cells_per_axis=10}}",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn toy_round_trip_with_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["synth"], TOY));
    ok(d, &with(&["bss"], TOY));
    let out = ok(d, &["report"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("verdict:        separable"), "{text}");

    let manifest = json(&d.join("manifest.json"));
    for name in manifest["files"].as_object().unwrap().keys() {
        assert!(d.join(name).exists(), "{name}");
    }
    let report = json(&d.join("report.json"));
    for key in ["verdict", "grouping", "statistic", "threshold", "direction_cov", "candidates"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let eval = json(&d.join("evaluation.json"));
    for p in eval["pairs"].as_array().unwrap() {
        assert!(p["spearman"].as_f64().unwrap().abs() > 0.9);
    }
    // Invariant cloud rows: cell id, 2 centre coordinates, then multiplets.
    let clouds = std::fs::read_to_string(d.join("invariant_clouds.csv")).unwrap();
    assert!(clouds.starts_with("cell_id,x1_center,x2_center,IA_1"));
}

#[test]
fn report_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["synth", "--duration", "500"], TOY));
    ok(d, &with(&["bss", "--threads", "1"], TOY));
    let one = std::fs::read(d.join("report.json")).unwrap();
    let map_one = std::fs::read(d.join("source_map.csv")).unwrap();
    ok(d, &with(&["bss", "--threads", "4"], TOY));
    assert_eq!(one, std::fs::read(d.join("report.json")).unwrap());
    assert_eq!(map_one, std::fs::read(d.join("source_map.csv")).unwrap());
}

#[test]
fn inseparable_is_a_successful_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let coupled = with(TOY, &["--set", "synth.toy.system.kind={kind=\"coupled\",coupling=1.0}"]);
    ok(d, &with(&["synth"], &coupled));
    ok(d, &with(&["bss"], &coupled));
    assert_eq!(json(&d.join("report.json"))["verdict"], "inseparable");
}

#[test]
fn short_scene_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["synth", "--duration", "20"]);
    ok(b.path(), &["synth", "--duration", "20"]);
    let ma = json(&a.path().join("manifest.json"));
    let mb = json(&b.path().join("manifest.json"));
    assert_eq!(ma["files"]["scene.wav"]["sha256"], mb["files"]["scene.wav"]["sha256"]);
    // 20 s of 16-bit mono plus a 44-byte header.
    assert_eq!(ma["files"]["scene.wav"]["bytes"], 44 + 2 * 20 * 16_000);
    let summary = json(&a.path().join("synth.json"));
    let gains = summary["realized_gain_db"].as_array().unwrap();
    assert!((gains[1].as_f64().unwrap() + 2.4).abs() < 1e-6);

    ok(a.path(), &["featurize", "--no-reduce"]);
    let m = json(&a.path().join("manifest.json"));
    assert!(m["files"].get("features.bin").is_some());
    assert!(m["files"].get("trajectory.bin").is_none());
}

#[test]
fn dimension_mismatch_fails_with_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--duration", "30"]);
    let out = ibss(d, &["featurize", "--set", "reduction.target_dim=1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("estimated intrinsic dimension"), "{err}");
}

#[test]
fn report_without_truth_has_no_evaluation() {
    let src = tempfile::tempdir().unwrap();
    ok(src.path(), &with(&["synth", "--duration", "500"], TOY));
    let dir = tempfile::tempdir().unwrap();
    let traj = src.path().join("trajectory.bin");
    ok(dir.path(), &with(&["bss", "--input", traj.to_str().unwrap()], TOY));
    ok(dir.path(), &["report"]);
    assert!(!dir.path().join("evaluation.json").exists());
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn missing_listed_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["synth", "--duration", "500"], TOY));
    ok(d, &with(&["bss"], TOY));
    std::fs::remove_file(d.join("source_map.csv")).unwrap();
    let out = ibss(d, &["report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("source_map.csv"));
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = ibss(dir.path(), &["synth", "--set", "synth.scene.durration_s=5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("durration_s"));

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[bss]\nmax_order = 5\nbogus = true\n").unwrap();
    let out = ibss(dir.path(), &["bss", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
}
