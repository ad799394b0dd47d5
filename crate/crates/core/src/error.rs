use std::path::PathBuf;

use thiserror::Error;

use crate::vehiclesim::TraceRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("maneuver infeasible: {0}")]
    Infeasible(String),

    #[error("simulation fault at t = {time:.2} s: {reason} ({} trace records kept)", trace.len())]
    SimulationFault {
        time: f64,
        reason: String,
        trace: Vec<TraceRecord>,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("split sizes infeasible: {n_cal} calibration + {n_test} test from {available} samples")]
    SplitSize {
        n_cal: usize,
        n_test: usize,
        available: usize,
    },

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("model schema mismatch: expected `{expected}`, found `{found}`")]
    SchemaMismatch { expected: String, found: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("vehicle width {w_veh} m is not smaller than lane width {w_min} m")]
    VehicleWiderThanLane { w_min: f64, w_veh: f64 },

    #[error("missing artifact {}: run `capguard {command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}
