//! Subcommand behavior of the `wpmon` binary: exit codes, diagnostics, DOT
//! export and deterministic replay.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wpmon() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wpmon"))
}

fn catalog_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/catalog/v1")
}

fn reference_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/google-explicit-nostate.xml")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn validate_accepts_the_reference_document() {
    let out = wpmon().arg("validate").arg(reference_spec()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("ok (spec `google-explicit-nostate`)"));
}

#[test]
fn validate_fails_on_broken_specs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.xml");
    std::fs::write(&bad, "<Specification name=\"x\"><Wat/></Specification>").unwrap();
    let out = wpmon().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("unknown tag"));
}

#[test]
fn usage_errors_exit_2() {
    let out = wpmon().arg("validate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = wpmon().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn graph_exports_the_expected_dot_structure() {
    let out = wpmon().arg("graph").arg(reference_spec()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let dot = stdout(&out);
    let nodes = dot
        .lines()
        .filter(|l| l.contains("[label=") && !l.contains("->"))
        .count();
    let forward = dot
        .lines()
        .filter(|l| l.contains("->") && !l.contains("style=dashed"))
        .count();
    assert_eq!(nodes, 4, "{dot}");
    assert_eq!(forward, 3, "{dot}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.dot");
    let out = wpmon()
        .arg("graph")
        .arg(reference_spec())
        .arg("-o")
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&path).unwrap(), dot);
}

#[test]
fn replay_is_byte_identical_for_a_fixed_seed() {
    let scenarios: Vec<PathBuf> = std::fs::read_dir(catalog_dir().join("scenarios"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("attack-"))
                .unwrap_or(false)
        })
        .collect();
    assert_eq!(scenarios.len(), 11);

    let run = || {
        let mut cmd = wpmon();
        cmd.arg("replay");
        let mut sorted = scenarios.clone();
        sorted.sort();
        for s in &sorted {
            cmd.arg(s);
        }
        cmd.arg("--seed").arg("7");
        cmd.output().unwrap()
    };
    let a = run();
    let b = run();
    let c = run();
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&b), stdout(&c));
    assert!(stdout(&a).contains("11/11 scenarios passed"));
}

#[test]
fn replay_fails_when_expectations_are_not_met() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wrong.scenario");
    // expects a block on a perfectly fine unrelated request
    std::fs::write(
        &path,
        r#"{"name":"wrong","specs":["google-authcode.xml"],"kind":"attack"}
{"actor":"browser","direction":"request","method":"GET","url":"https://cdn.example/x","expect":"block","expect_reason":"flow-deviation"}
"#,
    )
    .unwrap();
    let out = wpmon().arg("replay").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn replay_resolves_specs_from_the_catalog_layout() {
    // scenario files live in catalog/v1/scenarios and reference spec file
    // names that resolve via the sibling specs/ directory
    let scenario = catalog_dir().join("scenarios/benign-google-authcode.scenario");
    let out = wpmon().arg("replay").arg(&scenario).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("1/1 scenarios passed"));
}
