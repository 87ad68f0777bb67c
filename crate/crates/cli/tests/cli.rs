use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "sim.frames=25",
    "--set",
    "sim.objects=4",
    "--set",
    "encoder.resolution=16",
    "--set",
    "encoder.channels=[2,4,8]",
    "--set",
    "encoder.bottleneck=32",
    "--set",
    "encoder.epochs=2",
    "--set",
    "encoder.bottleneck_only_epochs=1",
];

fn sdtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdtrack")).args(TINY).args(args).env_remove("SDTRACK_CONFIG").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sdtrack(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_train_track_eval_ablate_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let d = |x: &str| dir.path().join(x);
    ok(&["simulate", "--out", s(&d("sim"))]);
    ok(&["train-encoder", "--bundle", s(&d("sim/bundle")), "--out", s(&d("enc"))]);
    assert!(std::fs::read_to_string(d("enc/loss.csv")).unwrap().lines().count() == 3);

    ok(&["track", "--bundle", s(&d("sim/bundle")), "--checkpoint", s(&d("enc/checkpoint")), "--out", s(&d("trk"))]);
    let rows = std::fs::read_to_string(d("trk/results.txt")).unwrap();
    assert!(rows.lines().count() > 0);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d("trk/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["sim"]["frames"], 25);
    let timing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d("trk/timing.json")).unwrap()).unwrap();
    assert_eq!(timing["frames"], 25);

    let gt = d("sim/bundle/gt.txt");
    ok(&["eval", "--gt", s(&gt), "--pred", s(&gt), "--out", s(&d("self"))]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d("self/report.json")).unwrap()).unwrap();
    for key in ["hota", "idf1", "mota"] {
        assert_eq!(report[key], 1.0, "{key}");
    }

    let table =
        ok(&["ablate", "--bundle", s(&d("sim/bundle")), "--checkpoint", s(&d("enc/checkpoint")), "--out", s(&d("ab"))]);
    assert!(table.contains("iou+emb ") && table.contains("iou+emb+sd"));
    let ab: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(ab.as_array().unwrap().len(), 2);

    ok(&[
        "render-overlay",
        "--bundle",
        s(&d("sim/bundle")),
        "--tracks",
        s(&d("trk/results.txt")),
        "--out",
        s(&d("ov")),
    ]);
    let ppm = std::fs::read(d("ov/frames/000001.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n320 240\n255\n"));
    assert_eq!(ppm.len(), b"P6\n320 240\n255\n".len() + 320 * 240 * 3);
}

#[test]
fn errors_exit_nonzero_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = |x: &str| dir.path().join(x);

    let out = sdtrack(&["--set", "association.nope=1", "simulate", "--out", s(&d("a"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
    assert!(!d("a").exists());

    let out = sdtrack(&["--set", "sim.radius=[10,200]", "simulate", "--out", s(&d("b"))]);
    assert!(!out.status.success());
    assert!(!d("b").exists());

    ok(&["simulate", "--out", s(&d("sim"))]);
    let out = sdtrack(&["track", "--bundle", s(&d("sim/bundle")), "--out", s(&d("t"))]);
    assert!(!out.status.success());
    assert!(!d("t/results.txt").exists());

    let out =
        sdtrack(&["eval", "--gt", s(&d("missing.txt")), "--pred", s(&d("sim/bundle/gt.txt")), "--out", s(&d("e"))]);
    assert!(!out.status.success());
    assert!(!d("e").exists());
}

#[test]
fn config_file_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 5, "sim": {"frames": 7, "objects": 2}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sdtrack"))
        .args(["simulate", "--out", s(&dir.path().join("o"))])
        .env("SDTRACK_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/config.json")).unwrap()).unwrap();
    assert_eq!((echoed["seed"].as_u64(), echoed["sim"]["seed"].as_u64()), (Some(5), Some(5)));
    assert_eq!(echoed["sim"]["frames"], 7);
}
