//! End-to-end runs of the `opfree` binary.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_opfree"))
}

fn problems() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../problems")
}

fn write_spec(dir: &tempfile::TempDir, text: &str) -> PathBuf {
    let p = dir.path().join("spec.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn shipped_problems_verify() {
    let mut n = 0;
    for entry in std::fs::read_dir(problems()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            for cmd in ["verify", "verify-section5"] {
                let out = bin().arg(cmd).arg("--spec").arg(&path).output().unwrap();
                assert_eq!(out.status.code(), Some(0), "{cmd} {path:?}: {}", String::from_utf8_lossy(&out.stdout));
                let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
                assert_eq!(report["pass"], true);
            }
            n += 1;
        }
    }
    assert!(n >= 3);
}

#[test]
fn convolve_power_of_semicircle() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        &dir,
        r#"{"B":{"d":1}, "eta":{"kraus":[[[1.4142135623730951,0]]]}, "mu":{"semicircle":{"variance":1,"levels":8}}}"#,
    );
    let out_path = dir.path().join("out.csv");
    let status = bin()
        .args(["convolve-power", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&out_path)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with("k,p,q,re,im\n"));
    let rows = csv_rows(&text);
    for (k, want) in [(2usize, 2.0), (4, 8.0), (6, 40.0)] {
        assert!((rows[k - 1][3] - want).abs() < 1e-10);
    }
    // bit-identical on a second run
    let again = bin().args(["convolve-power", "--spec"]).arg(&spec).output().unwrap();
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn density_peak() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        &dir,
        r#"{"B":{"d":1}, "eta":{"scaled_identity":2}, "mu":{"semicircle":{"variance":1,"levels":60}}}"#,
    );
    let out = bin()
        .args(["density", "--grid", "-4,4,81", "--eps", "0.01", "--spec"])
        .arg(&spec)
        .output()
        .unwrap();
    assert!(out.status.success());
    let rows = csv_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 81);
    let peak = rows.iter().map(|r| r[1]).fold(0.0, f64::max);
    assert!((peak - 1.0 / (std::f64::consts::PI * 2f64.sqrt())).abs() < 1e-2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let schema = write_spec(&dir, r#"{"B":{}, "eta":{"scaled_identity":2}, "mu":{"semicircle":{}}}"#);
    let out = bin().args(["moments", "--spec"]).arg(&schema).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "schema");
    assert_eq!(err["error"]["path"], "B.d");

    let domain = write_spec(&dir, r#"{"B":{"d":1}, "eta":{"scaled_identity":0.5}, "mu":{"semicircle":{}}}"#);
    let out = bin().args(["moments", "--spec"]).arg(&domain).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    // too close to the real axis for the compression series
    let conv = write_spec(&dir, r#"{"B":{"d":1}, "eta":{"scaled_identity":2}, "mu":{"semicircle":{"levels":3}}}"#);
    let out = bin().args(["subordinate", "--z", "[[[0,0.5]]]", "--spec"]).arg(&conv).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn tolerance_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(&dir, r#"{"B":{"d":1}, "eta":{"scaled_identity":2}, "mu":{"semicircle":{"levels":3}}}"#);
    let out = bin().env("OPFREE_TOL", "-1").args(["moments", "--spec"]).arg(&spec).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().env("OPFREE_TOL", "1e-9").args(["moments", "--spec"]).arg(&spec).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn subordinate_and_nfold() {
    let spec = problems().join("matrix_d2.json");
    let out = bin()
        .args(["subordinate", "--z", "[[[[0,8],0],[0,[0,8]]], [[[0.5,9],0],[0,[0,10]]]]", "--spec"])
        .arg(&spec)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[7] <= 1e-12));

    let spec = problems().join("bernoulli_n3.json");
    let out = bin().args(["nfold-sum", "--degree", "4", "--spec"]).arg(&spec).output().unwrap();
    let rows = csv_rows(&String::from_utf8(out.stdout).unwrap());
    // sum of three free symmetric Bernoullis: m2 = 3, m4 = 2*9 - 3 = 15
    assert!((rows[1][3] - 3.0).abs() < 1e-12);
    assert!((rows[3][3] - 15.0).abs() < 1e-12);
}
