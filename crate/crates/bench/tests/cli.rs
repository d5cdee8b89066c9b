use std::path::Path;
use std::process::Command;

use dnt_bench::dataset::{write_sequence, Attribute};
use dnt_bench::results::read_rects;
use dnt_core::synth::{generate, SyntheticSpec};

const SMALL_CONFIG: &str = "\
# tiny tracker, for a quick run
input_size = 64
candidates = 40
dual_widths = 4,4,4
learning_rate = 0.01
init_iterations = 4
random_patches = 2
update_iterations = 2
";

fn dnt() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dnt"));
    c.env("RUST_LOG", "warn").env_remove("DNT_DATA").env_remove("DNT_WEIGHTS");
    c
}

fn dataset(root: &Path, frames: usize) {
    let seq = generate(&SyntheticSpec { frames, occlusion: None, ..Default::default() });
    write_sequence(&root.join("Square"), &seq.frames, &seq.truth, &[Attribute::ScaleVariation]).unwrap();
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn track_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 5);
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let results = dir.path().join("results");
    std::fs::create_dir_all(&results).unwrap();
    let log = results.join("Square.txt");
    let maps = dir.path().join("maps");

    run(dnt()
        .args(["track", "--sequence"])
        .arg(data.join("Square"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&log)
        .args(["--backbone", "test", "--seed", "5", "--debug-maps"])
        .arg(&maps));

    let rects = read_rects(&log).unwrap();
    assert_eq!(rects.len(), 5);
    assert!(rects.iter().all(|r| r.w > 0.0 && r.h > 0.0));
    let sidecar = std::fs::read_to_string(results.join("Square.json")).unwrap();
    let lines: Vec<serde_json::Value> = sidecar.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["sequence"], "Square");
    assert_eq!(lines[0]["seed"], 5);
    assert!(lines[1]["anomaly"].is_boolean());
    assert!(maps.join("f0001_boundary.png").exists());
    assert!(maps.join("f0004_s2_extracted.png").exists());

    let report = dir.path().join("report");
    let stdout = run(dnt()
        .arg("eval")
        .arg("--results")
        .arg(&results)
        .arg("--data")
        .arg(&data)
        .args(["--protocol", "ope", "--out"])
        .arg(&report));
    assert!(stdout.contains("Square"));
    for f in ["per_sequence.csv", "per_attribute.csv", "aggregate.csv", "curves.csv", "precision.svg", "success.svg"] {
        assert!(report.join(f).exists(), "{f}");
    }
    assert!(std::fs::read_to_string(report.join("per_attribute.csv")).unwrap().contains("SV"));
}

#[test]
fn eval_reports_missing_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 3);
    let out = dnt()
        .arg("eval")
        .arg("--results")
        .arg(dir.path().join("none"))
        .arg("--data")
        .arg(&data)
        .args(["--protocol", "sre", "--out"])
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Square_sre_0.txt"));
}

#[test]
fn eval_can_generate_tre_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 4);
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let results = dir.path().join("results");
    run(dnt()
        .arg("eval")
        .arg("--results")
        .arg(&results)
        .env("DNT_DATA", &data)
        .args(["--protocol", "tre", "--run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("r")));
    // starts 0, 1 and 2 leave at least two frames each
    for id in 0..3 {
        let rects = read_rects(&results.join(format!("Square_tre_{id}.txt"))).unwrap();
        assert_eq!(rects.len(), 4 - id);
    }
    assert!(!results.join("Square_tre_3.txt").exists());
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 3);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "candidates = 10\nno_such_key = 1\n").unwrap();
    let out = dnt()
        .args(["track", "--sequence"])
        .arg(data.join("Square"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o.txt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn pretrained_without_weights_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 3);
    let out = dnt()
        .args(["track", "--sequence"])
        .arg(data.join("Square"))
        .arg("--out")
        .arg(dir.path().join("o.txt"))
        .args(["--backbone", "pretrained"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--weights"));
}
