use std::path::Path;
use std::process::{Command, Output};

fn budd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_budd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn budd")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL_SPEC: &str = r#"{
  "height": 40, "width": 40,
  "events": [{"region": {"row": 12, "col": 12, "height": 6, "width": 6},
              "change_date": "2018-06-15", "affected": ["ndvi", "ratio", "coherence"]}]
}"#;

fn simulate(dir: &Path) {
    std::fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();
    ok(&budd(&["simulate", "--spec", "spec.json", "--seed", "3", "--out", "sim"], dir));
}

#[test]
fn simulate_run_compare_render() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    for f in ["sim/ndvi/manifest.json", "sim/ratio/manifest.json", "sim/coherence/manifest.json", "sim/truth.i32"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let stdout = ok(&budd(
        &["run", "--cubes", "sim", "--forest-mask", "sim/forest_mask.u8", "--tv-iters", "20", "--out", "run"],
        dir,
    ));
    assert!(stdout.contains("detection(s)"), "{stdout}");
    for f in ["run/detections.i32", "run/detections.i32.json", "run/alerts.jsonl", "run/report.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }

    let table = ok(&budd(&["compare", "--a", "run/detections.i32", "--b", "sim/truth.i32", "--out", "cmp"], dir));
    assert!(table.contains("agree"), "{table}");
    assert!(dir.join("cmp/comparison.u8").exists());
    assert!(dir.join("cmp/agreement.json").exists());

    ok(&budd(&["render", "--map", "cmp/comparison.u8", "--out", "cmp.ppm"], dir));
    ok(&budd(&["render", "--map", "run/detections.i32", "--palette", "alerts", "--out", "run.ppm"], dir));
    let ppm = std::fs::read(dir.join("run.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n40 40\n255\n"));

    let bad = budd(&["render", "--map", "run/detections.i32", "--palette", "agreement", "--out", "x.ppm"], dir);
    assert!(!bad.status.success());
}

#[test]
fn fit_then_detect_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    std::fs::write(dir.join("config.json"), r#"{"tile_size": 64, "denoise_enabled": false}"#).unwrap();
    ok(&budd(
        &[
            "--config", "config.json", "fit", "--cubes", "N=sim/ndvi,B=sim/ratio,C=sim/coherence",
            "--forest-mask", "sim/forest_mask.u8", "--define", "2015-01-01:2017-12-31", "--out", "models",
        ],
        dir,
    ));
    assert!(dir.join("models/models.json").exists());
    assert!(dir.join("models/forest_mask.u8").exists());
    let stdout = ok(&budd(
        &[
            "detect", "--cubes", "sim", "--models", "models", "--monitor", "2018-01-01:2019-12-31",
            "--modalities", "BC", "--flag", "0.6", "--confirm", "0.975", "--clear", "0.5", "--min-obs", "2",
            "--workers", "2", "--out", "det",
        ],
        dir,
    ));
    assert!(stdout.contains("detection(s)"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("det/report.json")).unwrap()).unwrap();
    assert_eq!(report["modalities"], "BC");

    let summary = ok(&budd(
        &["summarize", "--cubes", "sim", "--period", "2015-01-01:2017-12-31", "--maps", "bc=det/detections.i32"],
        dir,
    ));
    assert!(summary.contains("coherence") && summary.contains("bc"), "{summary}");
}

#[test]
fn errors_exit_nonzero_with_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    let out = budd(
        &["run", "--cubes", "sim", "--forest-mask", "sim/forest_mask.u8", "--tile-size", "8", "--out", "x"],
        dir,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tile_size"));

    let out = budd(&["detect", "--cubes", "sim", "--models", "missing", "--out", "y"], dir);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("budd: error: detect"), "{err}");

    let out = budd(&["fit", "--cubes", "Q=sim/ndvi", "--forest-mask", "sim/forest_mask.u8", "--out", "m"], dir);
    assert!(!out.status.success());
}
