//! Serpentine raster acquisition: planning, running and exporting frames.

mod frame;
mod plan;
mod run;

pub use frame::{export_csv, export_pgm, normalize_u16, Frame, FrameMeta, CSV_HEADER};
pub use plan::{
    plan_snake, Axis, PlanError, PlannedPixel, ScanPlan, DEFAULT_BIAS_V, DEFAULT_PITCH_UM, DEFAULT_SETTLE_MS,
};
pub use run::{run_scan, ScanOptions};
