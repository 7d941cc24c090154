use std::fs;
use std::sync::Arc;

use autolab_core::clock::{SharedClock, VirtualClock};
use autolab_core::labscript::{resolve_in_sandbox, Exit, LimitKind, Limits, Sandbox};
use autolab_core::scpi::DeviceModel;
use autolab_core::transport::{InstrumentKind, Rack, RackConfig};
use proptest::prelude::*;
use tempfile::TempDir;

struct Bench {
    rack: Rack,
    dir: TempDir,
    clock: SharedClock,
}

impl Bench {
    fn new(device: DeviceModel) -> Self {
        let clock: SharedClock = VirtualClock::shared();
        let rack = Rack::up(RackConfig { device, ..RackConfig::ephemeral() }, clock.clone()).unwrap();
        Self { rack, dir: TempDir::new().unwrap(), clock }
    }

    fn sandbox(&self, limits: Limits) -> Sandbox {
        Sandbox::new(self.dir.path().join("work"), limits, self.clock.clone(), self.rack.list_resources()).unwrap()
    }

    fn smu(&self) -> String {
        self.rack.resource(InstrumentKind::ScpiSmu).unwrap().resource_id.to_string()
    }

    fn stage(&self) -> String {
        self.rack.resource(InstrumentKind::XypStage).unwrap().resource_id.to_string()
    }
}

fn ohmic() -> Bench {
    Bench::new(DeviceModel::Ohmic { resistance: 1000.0 })
}

#[test]
fn sweep_runs_21_points_and_saves_csv() {
    let b = ohmic();
    let src = format!(
        "OPEN smu \"{}\"\nWRITE smu \":SOUR:FUNC VOLT;:OUTP ON\"\nSWEEP v FROM -1.0 TO 1.0 STEP 0.1\n  WRITE smu \":SOUR:VOLT {{v}}\"\n  QUERY smu \":READ?\" -> i\n  RECORD v, i\nEND\nSAVE \"iv.csv\"\n",
        b.smu()
    );
    let r = b.sandbox(Limits::default()).run_source(&src);
    assert_eq!(r.exit, Exit::Ok, "{}", r.stderr);
    assert_eq!(r.stderr, "");
    assert_eq!(r.records.len(), 21);
    for (k, row) in r.records.iter().enumerate() {
        let v = -1.0 + k as f64 * 0.1;
        assert!((row[0] - v).abs() < 1e-9);
        assert!((row[1] - v / 1000.0).abs() <= 1e-12, "{row:?}");
    }
    assert!((r.records[20][0] - 1.0).abs() < 1e-9);
    assert_eq!(r.saved_files, ["iv.csv"]);
    let csv = fs::read_to_string(b.dir.path().join("work/iv.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 22);
    assert_eq!(lines[0], "v,i");
    assert_eq!(lines[1], "-1.00000E+00,-1.00000E-03");
}

#[test]
fn undefined_header_reported_on_stderr() {
    let b = ohmic();
    let src = format!("OPEN smu \"{}\" SCPI\nPRINT \"probe\"\nQUERY smu \":FOO?\" -> x\nPRINT \"got '{{x}}'\"", b.smu());
    let r = b.sandbox(Limits::default()).run_source(&src);
    assert_eq!(r.exit, Exit::Ok);
    assert!(r.stderr.contains("line 3: SCPI error -113,\"Undefined header\""), "{}", r.stderr);
    assert_eq!(r.stdout, "probe\ngot ''\n");
}

#[test]
fn query_binds_text_or_number() {
    let b = ohmic();
    let src = format!("OPEN smu \"{}\"\nQUERY smu \"*IDN?\" -> id\nQUERY smu \":SOUR:VOLT:ILIM?\" -> lim\nSET twice = lim * 2\nPRINT \"{{id}} {{twice}}\"", b.smu());
    let r = b.sandbox(Limits::default()).run_source(&src);
    assert_eq!(r.exit, Exit::Ok, "{}", r.stderr);
    assert!(r.stdout.starts_with("VirtualLab,Model 2450"), "{}", r.stdout);
    let lim = b.rack.smu().unwrap().lock().unwrap().state().current_limit();
    assert!(r.stdout.trim_end().ends_with(&format!(" {}", autolab_core::format::plain_number(lim * 2.0))));
}

#[test]
fn stage_move_and_wait() {
    let b = ohmic();
    let src = format!(
        "OPEN st \"{}\"\nMOVE st 500, 250\nWAITIDLE st\nQUERY st \"POS?\" -> p\nPRINT \"{{p}}\"\nMOVE st -5, 0\n",
        b.stage()
    );
    let r = b.sandbox(Limits::default()).run_source(&src);
    assert_eq!(r.exit, Exit::Ok);
    assert_eq!(r.stdout, "500 250\n");
    assert!(r.stderr.contains("line 6: stage error ERR 2 RANGE"), "{}", r.stderr);
}

#[test]
fn wait_idle_timeout_aborts() {
    let b = ohmic();
    let src = format!("OPEN st \"{}\"\nMOVE st 50000, 0\nWAITIDLE st 100\nPRINT \"after\"", b.stage());
    let r = b.sandbox(Limits::default()).run_source(&src);
    assert!(matches!(&r.exit, Exit::ScriptError { line: 3, msg } if msg.contains("timed out")), "{:?}", r.exit);
    assert_eq!(r.stdout, "");
}

#[test]
fn virtual_time_budget() {
    let b = ohmic();
    let src = format!("OPEN st \"{}\"\nMOVE st 70000, 70000\nWAITIDLE st 100000", b.stage());
    let limits = Limits { max_virtual_ms: 1_000, ..Limits::default() };
    let r = b.sandbox(limits).run_source(&src);
    assert_eq!(r.exit, Exit::LimitExceeded { which: LimitKind::VirtualTime });
}

#[test]
fn instruction_cap_keeps_partial_records() {
    let b = ohmic();
    let r = b.sandbox(Limits::default()).run_source("SWEEP k FROM 0 TO 1e9 STEP 1\n  RECORD k\nEND");
    assert_eq!(r.exit, Exit::LimitExceeded { which: LimitKind::Instructions });
    assert_eq!(r.instructions_executed, 100_000);
    // sweep header, then per iteration one tick plus the RECORD
    assert_eq!(r.records.len(), 50_000);
    assert_eq!(r.records.last().unwrap(), &vec![49_999.0]);
}

#[test]
fn parse_errors_become_script_errors() {
    let b = ohmic();
    let r = b.sandbox(Limits::default()).run_source("PRINT \"a\"\nEND");
    assert!(matches!(r.exit, Exit::ScriptError { line: 2, .. }));
    assert_eq!(r.instructions_executed, 0);
}

#[test]
fn runtime_errors() {
    let b = ohmic();
    let sb = b.sandbox(Limits::default());
    let cases = [
        ("SET a = 1 / 0", "non-finite"),
        ("PRINT \"{nope}\"", "undefined variable"),
        ("SET a = 0\nSWEEP v FROM 0 TO 1 STEP a\nEND", "never reaches"),
        ("RECORD 1, 2\nRECORD 3", "RECORD has 1 values"),
        ("OPEN x \"TCPIP::127.0.0.1::1::SOCKET\"", "not in the rack"),
        ("OPEN x \"GPIB::12::INSTR\"", "invalid resource"),
    ];
    for (src, want) in cases {
        let r = sb.run_source(src);
        assert!(matches!(&r.exit, Exit::ScriptError { msg, .. } if msg.contains(want)), "{src}: {:?}", r.exit);
    }
    let wrong = format!("OPEN s \"{}\" XYP", b.smu());
    assert!(matches!(sb.run_source(&wrong).exit, Exit::ScriptError { .. }));
}

#[test]
fn connections_released_for_every_exit() {
    let b = ohmic();
    let sb = b.sandbox(Limits { max_instructions: 3, ..Limits::default() });
    let scripts = [
        format!("OPEN smu \"{}\"\nOPEN st \"{}\"", b.smu(), b.stage()),
        format!("OPEN smu \"{}\"\nOPEN st \"{}\"\nSET a = 1 / 0", b.smu(), b.stage()),
        format!("OPEN smu \"{}\"\nOPEN st \"{}\"\nPRINT \"x\"\nPRINT \"y\"", b.smu(), b.stage()),
    ];
    for src in &scripts {
        let start = std::time::Instant::now();
        sb.run_source(src);
        // the next session must get the instruments without waiting out the busy grace
        let r = sb.run_source(&format!("OPEN smu \"{}\"\nQUERY smu \"*IDN?\" -> id", b.smu()));
        assert_eq!(r.exit, Exit::Ok, "{:?}", r.exit);
        assert!(start.elapsed() < std::time::Duration::from_millis(450));
    }
}

#[test]
fn deterministic_results() {
    let run = || {
        let b = Bench::new(DeviceModel::Photoconductor { r_dark: 10_000.0, sensitivity_k: 9.0, irradiance: 0.5 });
        let src = format!(
            "OPEN smu \"{}\"\nWRITE smu \":SOUR:VOLT 2;:OUTP ON\"\nSWEEP k FROM 1 TO 5 STEP 1\nQUERY smu \":READ?\" -> i\nQUERY smu \":BAD:CMD?\" -> z\nRECORD k, i\nEND\nSAVE \"out/r.csv\"",
            b.smu()
        );
        let r = b.sandbox(Limits::default()).run_source(&src);
        let csv = fs::read(b.dir.path().join("work/out/r.csv")).unwrap();
        (serde_json::to_string(&r).unwrap(), csv)
    };
    assert_eq!(run(), run());
}

fn escaping_path() -> impl Strategy<Value = String> {
    let seg = prop::sample::select(vec!["a", "b", "..", ".", "x.csv", "sub"]);
    let prefix = prop::sample::select(vec!["", "/", "/tmp/", "../", "./"]);
    (prefix, prop::collection::vec(seg, 1..6)).prop_map(|(p, segs)| format!("{p}{}", segs.join("/")))
}

/// Lexical oracle: a path stays inside when it is relative and never
/// climbs above its starting directory.
fn stays_inside(path: &str) -> bool {
    if path.starts_with('/') {
        return false;
    }
    let mut depth = 0i32;
    for seg in path.split('/') {
        match seg {
            ".." => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            "" | "." => {}
            _ => depth += 1,
        }
    }
    true
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn save_never_leaves_workdir(path in escaping_path()) {
        let outer = TempDir::new().unwrap();
        let work = outer.path().join("session/work");
        let clock: SharedClock = VirtualClock::shared();
        let sb = Sandbox::new(&work, Limits::default(), clock, Vec::new()).unwrap();
        let before: Vec<_> = walk(outer.path());
        let r = sb.run_source(&format!("RECORD 1\nSAVE \"{path}\""));
        match &r.exit {
            Exit::Ok => {
                prop_assert!(stays_inside(&path));
                prop_assert!(!path.split('/').any(|s| s == ".."));
            }
            Exit::ScriptError { msg, .. } => {
                if !stays_inside(&path) {
                    prop_assert_eq!(msg.as_str(), "path escapes sandbox");
                }
            }
            other => prop_assert!(false, "unexpected exit {:?}", other),
        }
        for p in walk(outer.path()) {
            prop_assert!(p.starts_with(&work) || before.contains(&p), "touched {}", p.display());
        }
    }

    #[test]
    fn open_refuses_foreign_hosts(host in "[a-z0-9.-]{1,20}", port in 1u16..) {
        prop_assume!(host != "localhost" && host != "127.0.0.1");
        let clock: SharedClock = VirtualClock::shared();
        let dir = TempDir::new().unwrap();
        let sb = Sandbox::new(dir.path(), Limits::default(), clock, Vec::new()).unwrap();
        let r = sb.run_source(&format!("OPEN d \"TCPIP::{host}::{port}::SOCKET\" SCPI"));
        let refused = matches!(&r.exit, Exit::ScriptError { line: 1, msg } if msg.starts_with("host not allowed") || msg.starts_with("invalid resource"));
        prop_assert!(refused, "{:?}", r.exit);
    }
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if entry.file_type().is_ok_and(|t| t.is_dir()) {
                stack.push(p.clone());
            }
            out.push(p);
        }
    }
    out
}

#[cfg(unix)]
#[test]
fn symlinked_directories_are_refused() {
    let outer = TempDir::new().unwrap();
    let work = outer.path().join("work");
    let clock: SharedClock = Arc::new(VirtualClock::new());
    let sb = Sandbox::new(&work, Limits::default(), clock, Vec::new()).unwrap();
    let target = outer.path().join("outside");
    fs::create_dir(&target).unwrap();
    std::os::unix::fs::symlink(&target, work.join("link")).unwrap();
    std::os::unix::fs::symlink(target.join("f.csv"), work.join("f.csv")).unwrap();
    for p in ["link/x.csv", "f.csv"] {
        let r = sb.run_source(&format!("RECORD 1\nSAVE \"{p}\""));
        assert!(matches!(&r.exit, Exit::ScriptError { msg, .. } if msg == "path escapes sandbox"), "{p}: {:?}", r.exit);
    }
    assert_eq!(fs::read_dir(&target).unwrap().count(), 0);
    assert!(resolve_in_sandbox(&work, "ok/inner.csv").is_ok());
}
