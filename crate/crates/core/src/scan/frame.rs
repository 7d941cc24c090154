use serde::{Deserialize, Serialize};

use super::plan::{plan_snake, ScanPlan};
use crate::format::sci6;
use crate::stage::fmt_coord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub plan: ScanPlan,
    /// RFC 3339 acquisition start time.
    pub started_at: String,
    /// `*IDN?` of the SMU that took the data.
    pub rack_identity: String,
}

/// Row-major photocurrent image. `data[row * nx + col]` holds the current
/// in amperes; pixels that were never reached hold 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
    /// Pixels measured so far, counted in acquisition order.
    pub acquired: usize,
    pub complete: bool,
    pub abort_reason: Option<String>,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn empty(meta: FrameMeta) -> Self {
        let (nx, ny) = (meta.plan.nx, meta.plan.ny);
        Self { nx, ny, data: vec![0.0; nx * ny], acquired: 0, complete: false, abort_reason: None, meta }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.nx + col]
    }

    /// Acquired pixels in acquisition order as `(col, row, current)`.
    pub fn acquired_pixels(&self) -> Vec<(usize, usize, f64)> {
        plan_snake(&self.meta.plan)
            .map(|order| {
                order
                    .into_iter()
                    .take(self.acquired)
                    .map(|p| (p.col, p.row, self.get(p.col, p.row)))
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub const CSV_HEADER: &str = "col,row,x_um,y_um,current_A";

/// One line per acquired pixel, in acquisition order.
pub fn export_csv(frame: &Frame) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (col, row, current) in frame.acquired_pixels() {
        let pose = frame.meta.plan.pose_of(col, row);
        out.push_str(&format!("{col},{row},{},{},{}\n", fmt_coord(pose.x), fmt_coord(pose.y), sci6(current)));
    }
    out
}

/// Min-max normalises `values` onto `0..=65535`, rounding half to even.
/// A constant input maps to all zeros.
pub fn normalize_u16(values: &[f64]) -> Vec<u16> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || max <= min {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - min) / (max - min) * 65535.0).round_ties_even() as u16)
        .collect()
}

/// Plain (P2) graymap. The first raster line is the top of the image, i.e.
/// frame row `ny - 1`. Pixels not yet acquired render as 0 and do not take
/// part in the normalisation.
pub fn export_pgm(frame: &Frame) -> String {
    let measured: Vec<(usize, usize, f64)> = frame.acquired_pixels();
    let levels = normalize_u16(&measured.iter().map(|p| p.2).collect::<Vec<_>>());
    let mut grid = vec![0u16; frame.nx * frame.ny];
    for ((col, row, _), level) in measured.iter().zip(levels) {
        grid[row * frame.nx + col] = level;
    }
    let mut out = format!("P2\n{} {}\n65535\n", frame.nx, frame.ny);
    for row in (0..frame.ny).rev() {
        let line: Vec<String> = grid[row * frame.nx..(row + 1) * frame.nx].iter().map(u16::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
