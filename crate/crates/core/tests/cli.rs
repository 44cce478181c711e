use std::path::Path;
use std::process::{Command, Output};

use paired_surface::design::ModelSpec;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paired-surface"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, seed: &str) -> std::path::PathBuf {
    let cfg = dir.join("sim.json");
    std::fs::write(&cfg, r#"{"m": 12, "n": 5, "basis_k": 6}"#).unwrap();
    let out = dir.join(format!("sim-{seed}"));
    let o = bin(&[
        "simulate",
        "--config",
        path(&cfg),
        "--seed",
        seed,
        "--dataset",
        "0",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("dataset.csv")
}

fn write_spec(dir: &Path, extra: Option<(&str, serde_json::Value)>) -> std::path::PathBuf {
    let mut spec = serde_json::to_value(ModelSpec::group_specific(2).with_k(6)).unwrap();
    if let Some((k, v)) = extra {
        spec.as_object_mut().unwrap().insert(k.into(), v);
    }
    let p = dir.join("spec.json");
    std::fs::write(&p, spec.to_string()).unwrap();
    p
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "9");
    let text = std::fs::read(&a).unwrap();
    let again = bin(&[
        "simulate",
        "--config",
        path(&dir.path().join("sim.json")),
        "--seed",
        "9",
        "--dataset",
        "0",
        "--out",
        path(&dir.path().join("again")),
    ]);
    assert!(again.status.success());
    assert_eq!(text, std::fs::read(dir.path().join("again/dataset.csv")).unwrap());
    let head = String::from_utf8_lossy(&text);
    assert!(head.starts_with("# paired-surface "));
    assert!(head.lines().next().unwrap().contains("seed=9"));
}

#[test]
fn unknown_spec_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "1");
    let spec = write_spec(dir.path(), Some(("smoothnes", serde_json::json!(3))));
    let o = bin(&["fit", "--data", path(&data), "--spec", path(&spec), "--out", path(&dir.path().join("fit"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("smoothnes"));
}

#[test]
fn test_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "1");
    let spec = write_spec(dir.path(), None);
    let o = bin(&[
        "test",
        "--data",
        path(&data),
        "--spec",
        path(&spec),
        "--method",
        "adjusted-lrt",
        "--out",
        path(&dir.path().join("t")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn fit_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "3");
    let spec = write_spec(dir.path(), None);
    let fit_dir = dir.path().join("fit");
    let o = bin(&["fit", "--data", path(&data), "--spec", path(&spec), "--out", path(&fit_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.json", "report.txt", "parameters.csv", "residuals.csv"] {
        assert!(fit_dir.join(f).exists(), "{f}");
    }
    let model = fit_dir.join("model.json");
    let grid_dir = dir.path().join("grid");
    let o = bin(&["predict-grid", "--model", path(&model), "--grid-res", "3", "--out", path(&grid_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(grid_dir.join("grid.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "group,outcome,w,h,fit,se,extrapolated");
    assert_eq!(rows.len(), 1 + 2 * 2 * 9);

    let o = bin(&["predict-grid", "--model", path(&model), "--group", "5", "--out", path(&grid_dir)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn adjusted_lrt_outputs_repeat_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "4");
    let spec = write_spec(dir.path(), None);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = bin(&[
            "test",
            "--data",
            path(&data),
            "--spec",
            path(&spec),
            "--method",
            "adjusted-lrt",
            "--seed",
            "11",
            "--out",
            path(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("test_result.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
