use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stage::{StageLimits, StagePose};

pub const DEFAULT_PITCH_UM: f64 = 100.0;
pub const DEFAULT_SETTLE_MS: f64 = 10.0;
pub const DEFAULT_BIAS_V: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("grid must have at least one column and one row (got {nx}x{ny})")]
    EmptyGrid { nx: usize, ny: usize },
    #[error("{0} pitch must be positive and finite")]
    Pitch(Axis),
    #[error("settle time must be non-negative")]
    Settle,
    #[error("bias must be finite")]
    Bias,
    #[error("scan footprint on the {axis} axis spans {from} to {to} um, outside travel 0..{limit} um")]
    ExceedsLimits { axis: Axis, from: f64, to: f64, limit: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanPlan {
    pub origin: StagePose,
    pub nx: usize,
    pub ny: usize,
    pub pitch_x: f64,
    pub pitch_y: f64,
    pub settle_ms: f64,
    pub bias: f64,
    pub limits: StageLimits,
}

impl Default for ScanPlan {
    fn default() -> Self {
        Self {
            origin: StagePose::default(),
            nx: 1,
            ny: 1,
            pitch_x: DEFAULT_PITCH_UM,
            pitch_y: DEFAULT_PITCH_UM,
            settle_ms: DEFAULT_SETTLE_MS,
            bias: DEFAULT_BIAS_V,
            limits: StageLimits::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedPixel {
    pub col: usize,
    pub row: usize,
    pub pose: StagePose,
}

impl ScanPlan {
    pub fn grid(nx: usize, ny: usize) -> Self {
        Self { nx, ny, ..Self::default() }
    }

    pub fn pixel_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn pose_of(&self, col: usize, row: usize) -> StagePose {
        StagePose {
            x: self.origin.x + col as f64 * self.pitch_x,
            y: self.origin.y + row as f64 * self.pitch_y,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.nx == 0 || self.ny == 0 {
            return Err(PlanError::EmptyGrid { nx: self.nx, ny: self.ny });
        }
        if !(self.pitch_x > 0.0 && self.pitch_x.is_finite()) {
            return Err(PlanError::Pitch(Axis::X));
        }
        if !(self.pitch_y > 0.0 && self.pitch_y.is_finite()) {
            return Err(PlanError::Pitch(Axis::Y));
        }
        if !(self.settle_ms >= 0.0 && self.settle_ms.is_finite()) {
            return Err(PlanError::Settle);
        }
        if !self.bias.is_finite() {
            return Err(PlanError::Bias);
        }
        let far = self.pose_of(self.nx - 1, self.ny - 1);
        let checks = [
            (Axis::X, self.origin.x, far.x, self.limits.x_max),
            (Axis::Y, self.origin.y, far.y, self.limits.y_max),
        ];
        for (axis, from, to, limit) in checks {
            if !(from >= 0.0 && to <= limit) {
                return Err(PlanError::ExceedsLimits { axis, from, to, limit });
            }
        }
        Ok(())
    }

    /// Index of `(col, row)` in the row-major frame buffer.
    pub fn storage_index(&self, col: usize, row: usize) -> usize {
        row * self.nx + col
    }
}

/// Serpentine visiting order: rows bottom to top, even rows left to right,
/// odd rows right to left.
pub fn plan_snake(plan: &ScanPlan) -> Result<Vec<PlannedPixel>, PlanError> {
    plan.validate()?;
    let mut out = Vec::with_capacity(plan.pixel_count());
    for row in 0..plan.ny {
        for i in 0..plan.nx {
            let col = if row % 2 == 0 { i } else { plan.nx - 1 - i };
            out.push(PlannedPixel { col, row, pose: plan.pose_of(col, row) });
        }
    }
    Ok(out)
}
