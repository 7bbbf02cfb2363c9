//! End-to-end runs of the abreu-lab binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_abreu-lab"));
    c.env_remove("ABREU_LAB_THREADS");
    c
}

fn write_config(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn square(dir: &Path, a: f64) -> PathBuf {
    write_config(
        dir,
        "square.json",
        json!({
            "schema": "abreu-lab/v1",
            "polytope": {"kind": "box", "lo": [0.0, 0.0], "hi": [1.0, 1.0]},
            "a": a,
            "h": 0.03125,
            "seed": 3,
            "stability": {"max_kinks": 2, "samples": 64},
            "output": dir.join("out"),
        }),
    )
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn abreu-lab");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn solve_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = square(tmp.path(), 4.0);
    let out = run(bin().args(["solve"]).arg(&cfg));
    assert_eq!(out.status.code(), Some(0));
    for f in [
        "solve_report.json",
        "phi.bin",
        "phi.json",
        "u.csv",
        "solve.metadata.json",
    ] {
        assert!(tmp.path().join("out").join(f).exists(), "{f}");
    }
    let r = read_json(&tmp.path().join("out/solve_report.json"));
    assert_eq!(r["converged"], json!(true));
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = square(tmp.path(), 4.0);
    let mut seen: Vec<Vec<Vec<u8>>> = Vec::new();
    for threads in ["1", "3", "1"] {
        let dir = tmp.path().join(format!("t{}", seen.len()));
        for sub in ["solve", "stability"] {
            let out = run(bin()
                .env("ABREU_LAB_THREADS", threads)
                .arg(sub)
                .arg(&cfg)
                .arg("--output")
                .arg(&dir));
            assert_eq!(out.status.code(), Some(0), "{sub} with {threads} threads");
        }
        seen.push(
            ["solve_report.json", "phi.bin", "stability_report.json"]
                .iter()
                .map(|f| std::fs::read(dir.join(f)).unwrap())
                .collect(),
        );
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[0], seen[2]);
}

#[test]
fn validate_reproduces_solve_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = square(tmp.path(), 4.0);
    let out_dir = tmp.path().join("out");
    assert_eq!(run(bin().arg("solve").arg(&cfg)).status.code(), Some(0));
    let out = run(bin()
        .arg("validate")
        .arg(&cfg)
        .arg("--validate.potential")
        .arg(out_dir.join("phi.bin")));
    assert_eq!(out.status.code(), Some(0));
    let solved = read_json(&out_dir.join("solve_report.json"));
    let validated = read_json(&out_dir.join("estimates.json"));
    let by_name = |v: &Value, name: &str| -> f64 {
        v.as_array()
            .unwrap()
            .iter()
            .find(|e| e["name"] == name)
            .unwrap_or_else(|| panic!("{name} missing"))["measured_constant"]
            .as_f64()
            .unwrap()
    };
    for name in ["det_lower", "det_edge"] {
        let a = by_name(&solved["estimates"], name);
        let b = by_name(&validated["reports"], name);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{name}: {a} vs {b}");
    }
    assert!(out_dir.join("edge_probes.csv").exists());
}

#[test]
fn affine_defect_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = square(tmp.path(), 0.0);
    let out = run(bin().arg("solve").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("L_A(1)"));
    assert!(!tmp.path().join("out/solve_report.json").exists());
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = square(tmp.path(), 4.0);

    let out = run(bin().arg("solve").arg(&cfg).args(["--no_such_key", "1"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = run(bin().env("ABREU_LAB_THREADS", "0").arg("solve").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));

    let bad = write_config(
        tmp.path(),
        "bad.json",
        json!({"schema": "abreu-lab/v1", "polytope": {"kind": "interval", "lo": 0.0, "hi": 1.0}, "a": 2.0, "tolerance": 1}),
    );
    let out = run(bin().arg("solve").arg(&bad));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tolerance"));

    let wrong = write_config(tmp.path(), "wrong.json", json!({"schema": "other/v9"}));
    assert_eq!(run(bin().arg("solve").arg(&wrong)).status.code(), Some(2));
}

#[test]
fn stability_needs_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "noseed.json",
        json!({
            "schema": "abreu-lab/v1",
            "polytope": {"kind": "interval", "lo": 0.0, "hi": 1.0},
            "a": 2.0,
            "output": tmp.path().join("out"),
        }),
    );
    assert_eq!(run(bin().arg("stability").arg(&cfg)).status.code(), Some(2));
    let out = run(bin()
        .arg("stability")
        .arg(&cfg)
        .args(["--seed", "7", "--samples", "500"]));
    assert_eq!(out.status.code(), Some(0));
    let r = read_json(&tmp.path().join("out/stability_report.json"));
    let lambda = r["report"]["lambda_hat"].as_f64().unwrap();
    assert!((lambda - 0.5).abs() < 0.02, "{lambda}");
}
