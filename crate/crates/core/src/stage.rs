//! Virtual XY stage with straight-line, constant-velocity motion.
//!
//! The stage speaks a small ASCII line protocol:
//!
//! | command       | reply                         |
//! |---------------|-------------------------------|
//! | `MOVE <x> <y>`| `OK`, or `ERR 2 RANGE`        |
//! | `HOME`        | same as `MOVE 0 0`            |
//! | `POS?`        | `<x> <y>` of the current pose |
//! | `STATUS?`     | `IDLE` or `MOVING`            |
//! | `LIMITS?`     | `0 0 <x_max> <y_max>`         |
//!
//! Anything else answers `ERR 1 SYNTAX`. Coordinates are decimal micrometers.

use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::format::plain_number;

pub const DEFAULT_TRAVEL_UM: f64 = 75_000.0;
pub const DEFAULT_VELOCITY_UM_S: f64 = 5_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StagePose {
    pub x: f64,
    pub y: f64,
}

impl StagePose {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &StagePose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionStatus {
    Idle,
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLimits {
    pub x_max: f64,
    pub y_max: f64,
}

impl Default for StageLimits {
    fn default() -> Self {
        Self { x_max: DEFAULT_TRAVEL_UM, y_max: DEFAULT_TRAVEL_UM }
    }
}

impl StageLimits {
    pub fn contains(&self, p: &StagePose) -> bool {
        (0.0..=self.x_max).contains(&p.x) && (0.0..=self.y_max).contains(&p.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionState {
    current: StagePose,
    target: StagePose,
    /// Where the current segment began.
    start: StagePose,
    /// Distance covered along the current segment.
    traveled: f64,
    velocity: f64,
    status: MotionStatus,
    limits: StageLimits,
}

impl MotionState {
    /// Idle stage at `pose`. Panics if the velocity is not positive or the
    /// pose is outside the limits; both are configuration errors.
    pub fn new(pose: StagePose, velocity: f64, limits: StageLimits) -> Self {
        assert!(velocity > 0.0 && velocity.is_finite(), "stage velocity must be positive");
        assert!(limits.contains(&pose), "initial pose outside travel limits");
        Self {
            current: pose,
            target: pose,
            start: pose,
            traveled: 0.0,
            velocity,
            status: MotionStatus::Idle,
            limits,
        }
    }

    pub fn current(&self) -> StagePose {
        self.current
    }

    pub fn target(&self) -> StagePose {
        self.target
    }

    pub fn status(&self) -> MotionStatus {
        self.status
    }

    pub fn velocity(&self) -> f64 {
        self.velocity
    }

    pub fn limits(&self) -> StageLimits {
        self.limits
    }

    /// Starts a move from wherever the stage is now. Fails if the target is
    /// out of travel, leaving the state untouched.
    pub fn begin_move(&mut self, target: StagePose) -> Result<(), StagePose> {
        if !self.limits.contains(&target) {
            return Err(target);
        }
        self.start = self.current;
        self.target = target;
        self.traveled = 0.0;
        self.status = MotionStatus::Moving;
        Ok(())
    }

    /// Advances motion by `dt` seconds. Negative or NaN steps are ignored.
    pub fn advance_clock(&mut self, dt: f64) {
        if self.status == MotionStatus::Idle || dt.is_nan() || dt < 0.0 {
            return;
        }
        let total = self.start.distance(&self.target);
        self.traveled = (self.traveled + self.velocity * dt).min(total);
        if self.traveled >= total {
            self.current = self.target;
            self.status = MotionStatus::Idle;
        } else {
            let f = self.traveled / total;
            self.current = StagePose {
                x: self.start.x + (self.target.x - self.start.x) * f,
                y: self.start.y + (self.target.y - self.start.y) * f,
            };
        }
    }

    /// Handles one protocol line and returns the reply (without terminator).
    pub fn handle_command(&mut self, line: &str) -> String {
        let mut words = line.split_whitespace();
        let verb = words.next().unwrap_or("").to_ascii_uppercase();
        let rest: Vec<&str> = words.collect();
        match (verb.as_str(), rest.as_slice()) {
            ("MOVE", [x, y]) => match (parse_coord(x), parse_coord(y)) {
                (Some(x), Some(y)) => self.move_reply(StagePose { x, y }),
                _ => "ERR 1 SYNTAX".into(),
            },
            ("HOME", []) => self.move_reply(StagePose::default()),
            ("POS?", []) => format!("{} {}", fmt_coord(self.current.x), fmt_coord(self.current.y)),
            ("STATUS?", []) => match self.status {
                MotionStatus::Idle => "IDLE".into(),
                MotionStatus::Moving => "MOVING".into(),
            },
            ("LIMITS?", []) => {
                format!("0 0 {} {}", fmt_coord(self.limits.x_max), fmt_coord(self.limits.y_max))
            }
            _ => "ERR 1 SYNTAX".into(),
        }
    }

    fn move_reply(&mut self, target: StagePose) -> String {
        match self.begin_move(target) {
            Ok(()) => "OK".into(),
            Err(_) => "ERR 2 RANGE".into(),
        }
    }
}

fn parse_coord(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Coordinates are reported to the nanometer.
pub fn fmt_coord(v: f64) -> String {
    plain_number((v * 1000.0).round() / 1000.0)
}

/// Parses a `POS?` reply.
pub fn parse_pos(reply: &str) -> Option<StagePose> {
    let mut it = reply.split_whitespace().map(str::parse::<f64>);
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(x)), Some(Ok(y)), None) => Some(StagePose { x, y }),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub limits: StageLimits,
    pub velocity: f64,
    pub home: StagePose,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            limits: StageLimits::default(),
            velocity: DEFAULT_VELOCITY_UM_S,
            home: StagePose::default(),
        }
    }
}

/// A [`MotionState`] bound to a clock. Every access first brings the motion
/// up to the clock's present.
#[derive(Debug)]
pub struct StageSim {
    state: MotionState,
    clock: SharedClock,
    synced_at: std::time::Duration,
}

impl StageSim {
    pub fn new(config: StageConfig, clock: SharedClock) -> Self {
        let synced_at = clock.now();
        Self {
            state: MotionState::new(config.home, config.velocity, config.limits),
            clock,
            synced_at,
        }
    }

    fn sync(&mut self) {
        let now = self.clock.now();
        if now > self.synced_at {
            self.state.advance_clock((now - self.synced_at).as_secs_f64());
            self.synced_at = now;
        }
    }

    pub fn handle_line(&mut self, line: &str) -> String {
        self.sync();
        let reply = self.state.handle_command(line);
        // a zero-length move settles immediately
        self.state.advance_clock(0.0);
        reply
    }

    pub fn pose(&mut self) -> StagePose {
        self.sync();
        self.state.current()
    }

    pub fn state(&mut self) -> &MotionState {
        self.sync();
        &self.state
    }
}
