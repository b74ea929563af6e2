//! Continuous-time LiDAR-IMU extrinsic calibration.
//!
//! Estimates the 6-DOF rigid transform between a spinning 3D LiDAR and an
//! IMU from a short motion sequence. The trajectory is a pair of uniform
//! cubic B-splines (positions in R³, unit-quaternion control points on
//! SO(3)); data association runs against a voxelized surfel map; the joint
//! state (extrinsics, control points, biases, gravity direction) is refined
//! by batch Levenberg-Marquardt with iterative map rebuilding. A simulator
//! with a three-plane scene and a Monte Carlo harness is included.
//!
//! Conventions used throughout:
//! - time is `f64` seconds, all quantities are SI,
//! - quaternions are Hamilton convention, written `(w, x, y, z)`,
//! - `Extrinsics` maps LiDAR-frame vectors into the IMU frame,
//! - the map frame coincides with the LiDAR frame of the first scan.

pub mod io;
pub mod linalg;
pub mod odometry;
pub mod optimizer;
pub mod pipeline;
pub mod rot_init;
pub mod scan;
pub mod sim;
pub mod splines;
pub mod surfel;
pub mod trajectory;

#[cfg(test)]
pub(crate) mod testutil;

use thiserror::Error;

/// Error type shared by all modules of this crate.
#[derive(Debug, Error)]
pub enum CalibError {
    /// Evaluation time outside the valid spline interval.
    #[error("time {t:.6} s outside spline domain [{start:.6}, {end:.6}) s")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The measurements do not constrain part of the state.
    #[error("unobservable problem: {0}")]
    Observability(String),

    #[error("degenerate registration: {0}")]
    DegenerateRegistration(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CalibError {
    /// True for errors caused by bad inputs or configuration (as opposed to
    /// numerical failures on valid inputs).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CalibError::InsufficientData(_)
                | CalibError::InvalidConfig(_)
                | CalibError::InvalidInput(_)
                | CalibError::Parse { .. }
                | CalibError::Io(_)
                | CalibError::Json(_)
                | CalibError::OutOfDomain { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, CalibError>;

pub use odometry::{IcpOdometry, OdometrySource, OracleOdometry, ScanPose};
pub use optimizer::{CalibState, LmOptions, LmReport, NoiseConfig, Problem};
pub use pipeline::{calibrate, CalibConfig, CalibReport, DeskewMode};
pub use rot_init::ImuSample;
pub use scan::{LidarPoint, Scan};
pub use splines::{quat_exp, quat_log, KnotGrid, SplineMatrices, SplineR3, SplineSO3};
pub use surfel::{Correspondence, Plane, Surfel, SurfelMap, VoxelCell};
pub use trajectory::{Extrinsics, Trajectory};
