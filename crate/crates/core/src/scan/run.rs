use std::time::Duration;

use log::warn;
use serde_json::json;

use super::frame::{Frame, FrameMeta};
use super::plan::{plan_snake, PlanError, ScanPlan};
use crate::clock::SharedClock;
use crate::events::{EventKind, EventSink};
use crate::format::plain_number;
use crate::stage::{fmt_coord, StageLimits};
use crate::transport::{ScpiClient, StageClient};

#[derive(Debug, Clone, Copy)]
pub struct ScanOptions {
    /// Interval between `STATUS?` polls while the stage moves.
    pub poll: Duration,
    /// Give up on a move that has not settled within this time.
    pub idle_timeout: Duration,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self { poll: Duration::from_millis(2), idle_timeout: Duration::from_secs(120) }
    }
}

fn parse_limits(reply: &str) -> Option<StageLimits> {
    let v: Vec<f64> = reply.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
    match v.as_slice() {
        [0.0, 0.0, x_max, y_max] => Some(StageLimits { x_max: *x_max, y_max: *y_max }),
        _ => None,
    }
}

struct Acquisition<'a> {
    smu: &'a mut ScpiClient,
    stage: &'a mut StageClient,
    clock: &'a SharedClock,
    options: ScanOptions,
}

impl Acquisition<'_> {
    fn setup(&mut self, bias: f64) -> Result<String, String> {
        let idn = self.smu.query("*IDN?").map_err(|e| format!("*IDN? failed: {e}"))?;
        let setup = format!(":SOUR:FUNC VOLT;:SOUR:VOLT {};:OUTP ON", plain_number(bias));
        self.smu.write(&setup).map_err(|e| format!("bias setup failed: {e}"))?;
        let errors = self.smu.drain_errors(16).map_err(|e| format!("bias setup failed: {e}"))?;
        if let Some(first) = errors.first() {
            return Err(format!("SMU rejected bias setup: {first}"));
        }
        Ok(idn)
    }

    fn wait_idle(&mut self) -> Result<(), String> {
        let deadline = self.clock.now() + self.options.idle_timeout;
        loop {
            match self.stage.command("STATUS?").map_err(|e| format!("stage: {e}"))?.as_str() {
                "IDLE" => return Ok(()),
                "MOVING" => {}
                other => return Err(format!("stage replied '{other}' to STATUS?")),
            }
            if self.clock.now() >= deadline {
                return Err("stage did not settle in time".into());
            }
            self.clock.sleep(self.options.poll);
        }
    }

    fn pixel(&mut self, x: f64, y: f64, settle: Duration) -> Result<f64, String> {
        let reply = self
            .stage
            .command(&format!("MOVE {} {}", fmt_coord(x), fmt_coord(y)))
            .map_err(|e| format!("stage: {e}"))?;
        if reply != "OK" {
            return Err(format!("stage replied '{reply}' to MOVE"));
        }
        self.wait_idle()?;
        self.clock.sleep(settle);
        let reading = self.smu.query(":READ?").map_err(|e| format!("SMU: {e}"))?;
        match reading.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("SMU returned '{reading}' to :READ?")),
        }
    }
}

/// Runs a serpentine acquisition over already connected sessions.
///
/// The bias is applied once before the first pixel and the output switched
/// off after the last. Any instrument error stops the scan; the returned
/// frame then has `complete == false` and keeps what was measured.
pub fn run_scan(
    plan: &ScanPlan,
    smu: &mut ScpiClient,
    stage: &mut StageClient,
    clock: &SharedClock,
    sink: &dyn EventSink,
    options: ScanOptions,
) -> Result<Frame, PlanError> {
    let mut plan = plan.clone();
    if let Some(limits) = stage.command("LIMITS?").ok().as_deref().and_then(parse_limits) {
        plan.limits = limits;
    }
    let order = plan_snake(&plan)?;
    let settle = Duration::from_secs_f64(plan.settle_ms / 1000.0);
    let meta = FrameMeta {
        plan: plan.clone(),
        started_at: chrono::Utc::now().to_rfc3339(),
        rack_identity: String::new(),
    };
    let mut frame = Frame::empty(meta);
    let mut acq = Acquisition { smu, stage, clock, options };

    let outcome = acq.setup(plan.bias).and_then(|idn| {
        frame.meta.rack_identity = idn;
        for (index, p) in order.iter().enumerate() {
            let current = acq.pixel(p.pose.x, p.pose.y, settle)?;
            frame.data[plan.storage_index(p.col, p.row)] = current;
            frame.acquired += 1;
            sink.emit(
                EventKind::PixelMeasured,
                json!({ "index": index, "col": p.col, "row": p.row, "current_A": current }),
            );
        }
        Ok(())
    });
    if let Err(e) = acq.smu.write(":OUTP OFF") {
        warn!("could not switch SMU output off: {e}");
    }
    match outcome {
        Ok(()) => frame.complete = true,
        Err(reason) => {
            warn!("scan aborted after {} pixels: {reason}", frame.acquired);
            frame.abort_reason = Some(reason);
        }
    }
    sink.emit(
        EventKind::ScanFinished,
        json!({
            "complete": frame.complete,
            "acquired": frame.acquired,
            "nx": frame.nx,
            "ny": frame.ny,
            "abort_reason": frame.abort_reason,
        }),
    );
    Ok(frame)
}
