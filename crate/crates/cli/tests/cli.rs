use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn depthpair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthpair"))
        .args(["--log-level", "off"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn json(path: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(depthpair(&["--help"]).status.code(), Some(0));
    assert_eq!(depthpair(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(depthpair(&["folds", "--out", "x.json"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "align.json");
    let missing = path(dir.path(), "missing");
    let res = depthpair(&["--json-errors", "align", &missing, &missing, "--out", &out]);
    assert_eq!(res.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(res.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "validation");
    assert_eq!(line["exit_code"], 2);
    assert!(!Path::new(&out).exists());
}

#[test]
fn oracle_provider_requires_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "align.json");
    let res = depthpair(&["align", "a", "b", "--provider", "oracle", "--out", &out]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--truth"));
    assert!(!Path::new(&out).exists());
}

#[test]
fn folds_are_written_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "folds.json");
    let res = depthpair(&[
        "folds",
        "a",
        "b",
        "c",
        "d",
        "e",
        "f",
        "--test-count",
        "2",
        "--seed",
        "1",
        "--out",
        &out,
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let plan = json(&out);
    assert_eq!(plan["P_test"].as_array().unwrap().len(), 2);
    assert_eq!(plan["P1"].as_array().unwrap().len(), 2);
    assert_eq!(plan["P2"].as_array().unwrap().len(), 2);

    let dup = path(dir.path(), "dup.json");
    assert_eq!(
        depthpair(&["folds", "a", "a", "b", "--out", &dup]).status.code(),
        Some(2)
    );
    assert!(!Path::new(&dup).exists());
}

#[test]
fn full_pipeline_produces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let res = depthpair(args);
        assert_eq!(
            res.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&res.stderr)
        );
    };

    ok(&["demo-specs", "--delta-ms", "-25", "--out", &path(d, "specs")]);
    ok(&[
        "simulate",
        "--scene",
        &path(d, "specs/scene.json"),
        "--rig",
        &path(d, "specs/rig.json"),
        "--duration",
        "1",
        "--seed",
        "3",
        "--out",
        &path(d, "sim"),
    ]);
    let truth = json(&path(d, "sim/truth.json"));
    assert_eq!(truth["delta_ms"], -25.0);
    assert_eq!(truth["seed"], 3);

    ok(&[
        "align",
        &path(d, "sim/lq"),
        &path(d, "sim/hq"),
        "--provider",
        "oracle",
        "--truth",
        &path(d, "sim/truth.json"),
        "--coarse-to-fine",
        "--out",
        &path(d, "align.json"),
    ]);
    let align = json(&path(d, "align.json"));
    let shift = align["shift"]["delta_ms"].as_f64().unwrap();
    assert!((shift + 25.0).abs() <= 5.0, "shift {shift}");
    assert_eq!(align["provider"], "oracle");
    assert_eq!(align["candidates"].as_array().unwrap().len(), 27);

    ok(&[
        "pair",
        &path(d, "sim/lq"),
        &path(d, "sim/hq"),
        &path(d, "align.json"),
        "--out",
        &path(d, "paired"),
    ]);
    assert!(Path::new(&path(d, "paired/manifest.json")).exists());

    ok(&[
        "tune",
        &path(d, "paired"),
        "--filter",
        "jbf",
        "--sigma-space",
        "1",
        "--sigma-range",
        "10,20",
        "--out",
        &path(d, "tune.json"),
    ]);
    assert_eq!(json(&path(d, "tune.json"))["scores"].as_array().unwrap().len(), 2);

    // Parameters tuned for one filter cannot drive another.
    let res = depthpair(&[
        "denoise",
        &path(d, "paired"),
        "--filter",
        "bf",
        "--params",
        &path(d, "tune.json"),
        "--out",
        &path(d, "bad"),
    ]);
    assert_eq!(res.status.code(), Some(2));

    ok(&[
        "denoise",
        &path(d, "paired"),
        "--filter",
        "jbf",
        "--params",
        &path(d, "tune.json"),
        "--out",
        &path(d, "pred"),
    ]);
    let manifest = json(&path(d, "pred/manifest.json"));
    assert_eq!(manifest["denoiser"], "jbf");

    ok(&[
        "eval",
        &path(d, "paired"),
        "--pred",
        &path(d, "pred"),
        "--heatmap",
        "--out",
        &path(d, "eval"),
    ]);
    let csv = fs::read_to_string(path(d, "eval/metrics.csv")).unwrap();
    let frames = manifest["frames"].as_array().unwrap().len();
    assert_eq!(csv.lines().count(), frames + 1);
    assert_eq!(fs::read_dir(path(d, "eval/heatmaps")).unwrap().count(), frames);
    let summary = json(&path(d, "eval/summary.json"));
    assert!(summary["mean_mse_mm2"].as_f64().unwrap() >= 0.0);

    ok(&["eval", &path(d, "paired"), "--out", &path(d, "eval_raw")]);
    assert_eq!(json(&path(d, "eval_raw/summary.json"))["predictions"], "raw");
}
