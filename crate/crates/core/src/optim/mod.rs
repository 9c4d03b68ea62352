//! Losses, Adam and the optimization workflows.

pub mod adam;
pub mod loss;
pub mod workflows;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use loss::{loss, record_loss, LossKind, LossSpec};
pub use workflows::{
    calibrate, energy_fractions, optimize_pattern, optimize_scene_pose, scan_loss, simulate_scans,
    CalibrationOptions, CalibrationResult, PatternOptions, PatternResult, PatternRow, PoseOptions,
    PoseRow, ReferenceScan, TraceRow,
};
