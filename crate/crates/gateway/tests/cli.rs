use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const KEY: &str = "0101010101010101010101010101010101010101010101010101010101010101";

fn dynaswap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynaswap"))
        .args(args)
        .env("DYNASWAP_MASTER_KEY", KEY)
        .output()
        .unwrap()
}

fn suite(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn cvss_score_prints_json() {
    let out = dynaswap(&[
        "cvss",
        "score",
        "CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["base"], 9.8);
    assert_eq!(v["severity"], "Critical");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dynaswap(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        dynaswap(&["cvss", "score", "CVSS:2.0/AV:N"]).status.code(),
        Some(1)
    );
}

#[test]
fn provenance_verify_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store").display().to_string();
    let seeded = dynaswap(&[
        "--store",
        &store,
        "fixture",
        "seed",
        "--seed",
        "3",
        "--patients",
        "2",
    ]);
    assert_eq!(
        seeded.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&seeded.stderr)
    );

    let verify = || {
        dynaswap(&["--store", &store, "prov", "verify", "rec-0000"])
            .status
            .code()
    };
    assert_eq!(verify(), Some(0));

    let path = dir.path().join("store/provenance/rec-0000.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut bytes = text.into_bytes();
    bytes[10] = if bytes[10] == b'A' { b'B' } else { b'A' };
    fs::write(&path, bytes).unwrap();
    assert_eq!(verify(), Some(3));
}

#[test]
fn scenario_run_exit_status_follows_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let ok = dynaswap(&[
        "scenario",
        "run",
        &suite("table2.toml"),
        "--report",
        &report.display().to_string(),
    ]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["totals"]["failed"], 0);

    let faulty = dynaswap(&[
        "scenario",
        "run",
        &suite("table2.toml"),
        "--skip-transfer-mac",
    ]);
    assert_eq!(faulty.status.code(), Some(1));
}
