//! Round logs, run summaries, grid what-ifs and tier calibration.

pub mod calibrate;
pub mod log;
pub mod summary;

use thiserror::Error;

use crate::orchestrator::OrchestratorError;
use crate::tracker::TrackerError;

pub use calibrate::{
    calibrate_tiers, CalibrationResult, CalibrationSearch, CalibrationTargets, TierFit, TierTarget,
};
pub use log::{parse_round_log, write_round_log, RoundRecord, FIELDS, SCHEMA_VERSION};
pub use summary::{
    meta_for_job, records_from_job, remap_grid_intensity, summarize_run, CategoryTotals,
    EnergyCo2e, RegionIntensity, RoundSummary, RunMeta, RunReport, SiteTotals,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("schema violation in `{field}`: {reason}")]
    SchemaViolation { field: &'static str, reason: String },
    #[error("malformed round log: {0}")]
    Malformed(String),
    #[error("no intensity given for region `{0}`")]
    UnknownRegion(String),
    #[error("inconsistent run data: {0}")]
    Inconsistent(String),
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
