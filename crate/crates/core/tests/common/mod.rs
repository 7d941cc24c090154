#![allow(dead_code)]

pub mod protocol;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use autolab_core::agent::CodeRunner;
use autolab_core::events::{EventKind, EventSink};
use autolab_core::labscript::{ExecutionResult, Sandbox};
use serde_json::Value;

pub const IV_GOAL: &str = "Measure the I-V characteristics of a photoresistor from -1 V to 1 V in 0.1 V steps and save them to iv.csv";

fn iv_script(smu: &str, measure: &str) -> String {
    format!(
        "# I-V sweep of the photoresistor
OPEN smu \"{smu}\" SCPI
WRITE smu \"*RST\"
WRITE smu \":SOUR:FUNC VOLT\"
WRITE smu \":SOUR:VOLT:ILIM 0.01\"
WRITE smu \":OUTP ON\"
SWEEP v FROM -1.0 TO 1.0 STEP 0.1
  WRITE smu \":SOUR:VOLT {{v}}\"
  QUERY smu \"{measure}\" -> i
  RECORD v, i
END
WRITE smu \":OUTP OFF\"
SAVE \"iv.csv\"
PRINT \"saved {{v}}\""
    )
}

/// Two replies: the first uses a header the SMU does not know, the second
/// is the corrected script with DONE.
pub fn iv_demo_replies(smu: &str) -> Vec<String> {
    vec![
        format!(
            "I will sweep the bias and read the current at each step.\n```labscript\n{}\n```",
            iv_script(smu, ":MEAS:CURR:DC?")
        ),
        format!(
            "The SMU has no DC node under :MEAS:CURR. Using :MEAS:CURR? instead.\nDONE\n```labscript\n{}\n```",
            iv_script(smu, ":MEAS:CURR?")
        ),
    ]
}

/// Sandbox wrapper that counts executions.
pub struct CountingRunner {
    pub inner: Sandbox,
    pub count: Arc<AtomicUsize>,
}

impl CountingRunner {
    pub fn new(inner: Sandbox) -> (Self, Arc<AtomicUsize>) {
        let count = Arc::new(AtomicUsize::new(0));
        (Self { inner, count: count.clone() }, count)
    }
}

impl CodeRunner for CountingRunner {
    fn run(&mut self, code: &str) -> ExecutionResult {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.run_source(code)
    }

    fn workdir(&self) -> &Path {
        &self.inner.workdir
    }
}

/// Sink that keeps every event for later inspection.
#[derive(Clone, Default)]
pub struct Recorder(pub Arc<Mutex<Vec<(EventKind, Value)>>>);

impl Recorder {
    pub fn kinds(&self) -> Vec<EventKind> {
        self.0.lock().unwrap().iter().map(|(k, _)| *k).collect()
    }
}

impl EventSink for Recorder {
    fn emit(&self, kind: EventKind, payload: Value) {
        self.0.lock().unwrap().push((kind, payload));
    }
}

pub fn work_dir(session_dir: &Path) -> PathBuf {
    session_dir.join("work")
}

use autolab_core::clock::SharedClock as Clock;
use autolab_core::events::NullSink;
use autolab_core::format::sci6;
use autolab_core::scan::{run_scan, Frame, ScanOptions, ScanPlan};
use autolab_core::scene::Scene;
use autolab_core::transport::{InstrumentKind, Rack, RackConfig, SceneSource, ScpiClient, StageClient};

pub const R_DARK: f64 = 10_000.0;
pub const K: f64 = 9.0;

/// Rack with the photoconductor looking at `scene`, on a virtual clock.
pub fn scene_rack(scene: Scene, clock: Clock) -> Rack {
    let config = RackConfig { scene: Some(SceneSource::Loaded(scene)), ..RackConfig::ephemeral() };
    Rack::up(config, clock).unwrap()
}

pub fn connect(rack: &Rack) -> (ScpiClient, StageClient) {
    let smu = ScpiClient::connect(&rack.resource(InstrumentKind::ScpiSmu).unwrap().resource_id).unwrap();
    let stage = StageClient::connect(&rack.resource(InstrumentKind::XypStage).unwrap().resource_id).unwrap();
    (smu, stage)
}

pub fn scan_on(rack: &Rack, plan: &ScanPlan) -> Frame {
    let (mut smu, mut stage) = connect(rack);
    let frame = run_scan(plan, &mut smu, &mut stage, &rack.clock(), &NullSink, ScanOptions::default()).unwrap();
    smu.close();
    stage.close();
    frame
}

/// Direct scene -> resistance -> current computation for every pixel,
/// formatted as the instrument would report it. Row-major from row 0.
pub fn scan_oracle(scene: &Scene, plan: &ScanPlan, ilim: f64) -> Vec<String> {
    let mut out = Vec::new();
    for row in 0..plan.ny {
        for col in 0..plan.nx {
            let x = plan.origin.x + col as f64 * plan.pitch_x;
            let y = plan.origin.y + row as f64 * plan.pitch_y;
            let c = ((x - scene.origin.x) / scene.pitch_um).round();
            let r = ((y - scene.origin.y) / scene.pitch_um).round();
            let e = if c < 0.0 || r < 0.0 || c >= scene.width() as f64 || r >= scene.height() as f64 {
                0.0
            } else {
                scene.value(c as usize, r as usize)
            };
            let resistance = R_DARK / (1.0 + K * e);
            out.push(sci6((plan.bias / resistance).clamp(-ilim, ilim)));
        }
    }
    out
}

pub fn formatted(frame: &Frame) -> Vec<String> {
    frame.data.iter().map(|v| sci6(*v)).collect()
}

use autolab_core::scan::PlannedPixel;

/// Independent check of a serpentine order: every cell exactly once, each
/// step one pitch along one axis, poses on the grid.
pub fn check_snake(plan: &ScanPlan, order: &[PlannedPixel]) -> Result<(), String> {
    let (nx, ny) = (plan.nx, plan.ny);
    if order.len() != nx * ny {
        return Err(format!("{} poses, expected {}", order.len(), nx * ny));
    }
    let mut seen = vec![false; nx * ny];
    for p in order {
        if p.col >= nx || p.row >= ny {
            return Err(format!("cell ({}, {}) off the grid", p.col, p.row));
        }
        let k = p.row * nx + p.col;
        if seen[k] {
            return Err(format!("cell ({}, {}) visited twice", p.col, p.row));
        }
        seen[k] = true;
        let x = plan.origin.x + p.col as f64 * plan.pitch_x;
        let y = plan.origin.y + p.row as f64 * plan.pitch_y;
        if (p.pose.x - x).abs() > 1e-9 || (p.pose.y - y).abs() > 1e-9 {
            return Err(format!("cell ({}, {}) at wrong pose {:?}", p.col, p.row, p.pose));
        }
    }
    for w in order.windows(2) {
        let dx = (w[1].pose.x - w[0].pose.x).abs();
        let dy = (w[1].pose.y - w[0].pose.y).abs();
        let x_step = (dx - plan.pitch_x).abs() < 1e-9 && dy < 1e-9;
        let y_step = (dy - plan.pitch_y).abs() < 1e-9 && dx < 1e-9;
        if !(x_step || y_step) {
            return Err(format!("jump from {:?} to {:?}", w[0].pose, w[1].pose));
        }
    }
    Ok(())
}
