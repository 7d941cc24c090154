use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const DEMO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/demo/iv_demo.json");

fn autolab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autolab")).args(args).current_dir(dir).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn two_by_two_scan_writes_header_and_four_pixels() {
    let tmp = TempDir::new().unwrap();
    let out = autolab(tmp.path(), &["scan", "run", "--nx", "2", "--ny", "2", "--out", "f.csv", "--pgm", "f.pgm"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("f.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "col,row,x_um,y_um,current_A");
    // no scene: the photoresistor is fully lit, 1 V across 1 kOhm
    assert!(lines[1..].iter().all(|l| l.ends_with(",1.00000E-03")), "{csv}");
    assert!(fs::read(tmp.path().join("f.pgm")).unwrap().starts_with(b"P2"));
}

#[test]
fn invalid_plans_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    for args in [&["--nx", "0"][..], &["--pitch-x", "-5"], &["--settle", "-1"], &["--nx", "two"]] {
        let mut full = vec!["scan", "run", "--out", "f.csv"];
        full.extend_from_slice(args);
        let out = autolab(tmp.path(), &full);
        assert_eq!(code(&out), 2, "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert!(!tmp.path().join("f.csv").exists());
}

#[test]
fn stub_agent_produces_iv_csv_and_replays() {
    let tmp = TempDir::new().unwrap();
    let out = autolab(
        tmp.path(),
        &[
            "agent", "run", "--llm", "stub", "--stub-script", DEMO, "--goal", "Measure the photoresistor I-V curve",
            "--data-dir", "data", "--session-id", "demo",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let session = tmp.path().join("data/sessions/demo");
    let csv = fs::read_to_string(session.join("work/iv.csv")).unwrap();
    assert_eq!(csv.lines().count(), 22);
    assert!(session.join("autolab_code_iter1.labs").exists());
    assert!(session.join("autolab_code_iter2.labs").exists());

    let out = autolab(tmp.path(), &["replay", "data/sessions/demo/session.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(session.join("replay/work/iv.csv")).unwrap(), csv);
}

#[test]
fn stub_without_script_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = autolab(tmp.path(), &["agent", "run", "--llm", "stub", "--goal", "g", "--smu-port", "0", "--stage-port", "0"]);
    assert_eq!(code(&out), 2);
    let out = autolab(tmp.path(), &["agent", "run", "--goal", "g", "--mode", "sideways"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn step_mode_rejection_on_closed_stdin_is_a_runtime_failure() {
    let tmp = TempDir::new().unwrap();
    let out = autolab(
        tmp.path(),
        &[
            "agent", "run", "--llm", "stub", "--stub-script", DEMO, "--goal", "g", "--mode", "step", "--data-dir", "d",
            "--session-id", "s", "--smu-port", "0", "--stage-port", "0",
        ],
    );
    assert_eq!(code(&out), 1);
    let session = fs::read_to_string(tmp.path().join("d/sessions/s/session.json")).unwrap();
    assert!(session.contains("AwaitingApproval"), "{session}");
    assert!(!tmp.path().join("d/sessions/s/work/iv.csv").exists());
}

#[test]
fn replay_of_missing_file_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&autolab(tmp.path(), &["replay", "nope.json"])), 2);
}
