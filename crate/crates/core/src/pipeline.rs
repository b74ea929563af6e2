//! End-to-end calibration pipeline.
//!
//! Four stages, with the last two repeated: (1) gyro-spline fit and
//! hand-eye initialization of the extrinsic rotation; (2) rotational
//! deskew, LiDAR odometry, trajectory fit, surfel map and association;
//! (3) batch optimization; (4) rebuild the map with the refined
//! continuous-time state and re-optimize. Odometry poses are used only in
//! the first round.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::io::ExtrinsicsParam;
use crate::odometry::{relative_pose, OdometrySource, RotationDeskew};
use crate::optimizer::{solve_lm, CalibState, LmOptions, LmReport, NoiseConfig, Problem};
use crate::rot_init::{fit_gyro_spline, relative_rotation, solve_handeye, ImuSample, RotPair};
use crate::scan::{LidarPoint, Scan};
use crate::splines::KnotGrid;
use crate::surfel::{associate, downsample, filter_ambiguous, SurfelMap, SurfelParams};
use crate::trajectory::{fit_to_poses, Extrinsics, Trajectory, GRAVITY_MAGNITUDE};
use crate::{CalibError, Result};

/// Which pose source backs the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdometryKind {
    Oracle,
    Icp,
}

/// Deskew flavour: rotation-only (gyro prediction, translation frozen) or
/// the full continuous-time rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeskewMode {
    RotationOnly,
    Full,
}

/// Pipeline configuration. Defaults follow the indoor profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    /// Spline knot spacing, seconds.
    pub knot_dt: f64,
    /// Voxel edge length, meters (0.5 indoor, 1.0 outdoor).
    pub cell_size: f64,
    /// Plane-likeness acceptance threshold in the first iteration.
    pub planarity_first: f64,
    /// Threshold after the map has been rebuilt once.
    pub planarity_later: f64,
    /// Point-to-surfel association gate, meters.
    pub reject_dist: f64,
    /// Random scan downsampling keep-ratio.
    pub downsample_ratio: f64,
    pub noise: NoiseConfig,
    /// Refinement rounds (each = map rebuild + batch optimization).
    pub iterations: usize,
    pub odometry: OdometryKind,
    pub seed: u64,
    /// Minimum mean gyro magnitude, rad/s; below this the dataset is
    /// rejected as unexcited before any optimization runs.
    pub min_excitation: f64,
    /// Hand-eye outlier threshold, radians.
    pub handeye_threshold: f64,
    /// Minimum voxel population before plane analysis.
    pub min_cell_points: usize,
    pub ransac_iters: usize,
    pub ransac_inlier_tol: f64,
    /// Optional Huber scale on LiDAR residuals, meters (off by default).
    pub huber_delta: Option<f64>,
    /// Jointly estimate the gravity direction (freeze when false).
    pub estimate_gravity: bool,
    pub lm_max_iters: usize,
    pub lm_lambda0: f64,
    pub lm_tol: f64,
    /// Early-exit thresholds: once the extrinsic estimate moves less than
    /// this between rounds, remaining rounds are skipped (the report keeps
    /// `iterations` entries by repeating the stabilized estimate).
    pub plateau_trans: f64,
    pub plateau_rot_deg: f64,
    /// Oracle odometry noise (rotation degrees, translation meters);
    /// consumed by the CLI when it instantiates the oracle source.
    pub oracle_noise: (f64, f64),
    /// Hand-eye pairs span this many scan intervals. Consecutive scans
    /// (stride 1) suit low-noise odometry; noisy front-ends need longer
    /// spans so the relative rotations dominate the registration error.
    pub handeye_stride: usize,
    /// When set, per-iteration surfel dumps (`surfels_iterN.jsonl`) are
    /// written into this directory.
    pub dump_surfels: Option<PathBuf>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            knot_dt: 0.02,
            cell_size: 0.5,
            planarity_first: 0.6,
            planarity_later: 0.7,
            reject_dist: 0.05,
            downsample_ratio: 0.25,
            noise: NoiseConfig::default(),
            iterations: 8,
            odometry: OdometryKind::Oracle,
            seed: 0,
            min_excitation: 0.1,
            handeye_threshold: 0.02,
            min_cell_points: 10,
            ransac_iters: 50,
            ransac_inlier_tol: 0.02,
            huber_delta: None,
            estimate_gravity: true,
            lm_max_iters: 50,
            lm_lambda0: 1e-4,
            lm_tol: 1e-8,
            plateau_trans: 3e-4,
            plateau_rot_deg: 0.01,
            oracle_noise: (0.2, 0.01),
            handeye_stride: 1,
            dump_surfels: None,
        }
    }
}

impl CalibConfig {
    /// Indoor/outdoor profiles differ in voxel resolution.
    pub fn apply_profile(&mut self, profile: &str) -> Result<()> {
        match profile {
            "indoor" => self.cell_size = 0.5,
            "outdoor" => self.cell_size = 1.0,
            other => {
                return Err(CalibError::InvalidConfig(format!(
                    "unknown profile {other:?} (expected indoor or outdoor)"
                )))
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let ok = self.knot_dt > 0.0
            && self.cell_size > 0.0
            && (0.0..=1.0).contains(&self.planarity_first)
            && (0.0..=1.0).contains(&self.planarity_later)
            && self.reject_dist > 0.0
            && self.downsample_ratio > 0.0
            && self.downsample_ratio <= 1.0
            && self.iterations >= 1
            && self.handeye_threshold > 0.0;
        if !ok {
            return Err(CalibError::InvalidConfig(
                "calibration config out of range".into(),
            ));
        }
        Ok(())
    }

    fn lm_options(&self) -> LmOptions {
        LmOptions {
            max_iters: self.lm_max_iters,
            lambda0: self.lm_lambda0,
            tol: self.lm_tol,
            huber_delta: self.huber_delta,
            estimate_gravity: self.estimate_gravity,
            ..Default::default()
        }
    }

    fn surfel_params(&self, first_iteration: bool) -> SurfelParams {
        SurfelParams {
            planarity_min: if first_iteration {
                self.planarity_first
            } else {
                self.planarity_later
            },
            min_cell_points: self.min_cell_points,
            ransac_iters: self.ransac_iters,
            ransac_inlier_tol: self.ransac_inlier_tol,
        }
    }
}

/// One refinement round of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub extrinsics: ExtrinsicsParam,
    /// Extrinsic rotation as roll/pitch/yaw, degrees.
    pub euler_deg: [f64; 3],
    pub surfels: usize,
    pub correspondences: usize,
    pub lm: LmReport,
    /// False for entries padded after the estimate stabilized.
    pub refined: bool,
    /// Wall-clock time of the round; excluded from the serialized report
    /// so reports are byte-identical across reruns.
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Full calibration report (one entry per configured iteration).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibReport {
    pub iterations: Vec<IterationRecord>,
    /// Round (1-based) after which the estimate stopped moving, if the
    /// plateau exit triggered.
    pub stabilized_at: Option<usize>,
    /// Initial extrinsic rotation from the hand-eye alignment.
    pub handeye_rotation: ExtrinsicsParam,
    pub bias_acc: [f64; 3],
    pub bias_gyro: [f64; 3],
    /// Estimated gravity in the trajectory frame, m/s².
    pub gravity: [f64; 3],
    /// Mean gyro magnitude of the dataset, rad/s.
    pub excitation: f64,
    /// Errors versus ground truth (simulated datasets only).
    pub truth: Option<TruthComparison>,
    #[serde(skip)]
    pub total_wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthComparison {
    pub extrinsics: ExtrinsicsParam,
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
    /// Per refinement round, against truth.
    pub per_iteration: Vec<(f64, f64)>,
}

impl CalibReport {
    pub fn final_extrinsics(&self) -> Extrinsics {
        self.iterations
            .last()
            .map(|r| r.extrinsics.into())
            .unwrap_or_else(Extrinsics::identity)
    }

    /// Fills the truth section with per-iteration errors.
    pub fn set_truth(&mut self, truth: Extrinsics) {
        let per_iteration = self
            .iterations
            .iter()
            .map(|it| extrinsic_error(&it.extrinsics.into(), &truth))
            .collect();
        let (rot_err_deg, trans_err_m) = extrinsic_error(&self.final_extrinsics(), &truth);
        self.truth = Some(TruthComparison {
            extrinsics: truth.into(),
            rot_err_deg,
            trans_err_m,
            per_iteration,
        });
    }

    /// Per-round (rotation deg, translation m) errors versus truth; empty
    /// when no truth was attached.
    pub fn iteration_errors(&self) -> Vec<(f64, f64)> {
        self.truth
            .as_ref()
            .map(|t| t.per_iteration.clone())
            .unwrap_or_default()
    }
}

/// Geodesic rotation error (degrees) and Euclidean translation error
/// (meters) between two extrinsic estimates.
pub fn extrinsic_error(est: &Extrinsics, truth: &Extrinsics) -> (f64, f64) {
    (
        est.rot.angle_to(&truth.rot).to_degrees(),
        (est.trans - truth.trans).norm(),
    )
}

/// Re-expresses every point of a scan in the scan's reference-time LiDAR
/// frame using the continuous-time state.
pub fn deskew_scan(
    scan: &Scan,
    traj: &Trajectory,
    ext: &Extrinsics,
    mode: DeskewMode,
) -> Result<Scan> {
    let points = match mode {
        DeskewMode::Full => scan
            .points
            .iter()
            .map(|p| {
                Ok(LidarPoint {
                    t: p.t,
                    pos: traj.lidar_point_to_map(ext, p.pos, p.t, scan.ref_time)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        DeskewMode::RotationOnly => {
            let deskew = RotationDeskew {
                gyro: traj.rot(),
                ext_rot: ext.rot,
            };
            return deskew.deskew(scan);
        }
    };
    Ok(Scan::new(scan.ref_time, points))
}

fn with_stage(e: CalibError, stage: &str) -> CalibError {
    match e {
        CalibError::Observability(m) => CalibError::Observability(format!("[{stage}] {m}")),
        CalibError::DegenerateRegistration(m) => {
            CalibError::DegenerateRegistration(format!("[{stage}] {m}"))
        }
        CalibError::InsufficientData(m) => CalibError::InsufficientData(format!("[{stage}] {m}")),
        CalibError::Diverged(m) => CalibError::Diverged(format!("[{stage}] {m}")),
        other => other,
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut h = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h
}

/// Runs the full calibration: rotation initialization, iterative surfel
/// mapping + batch optimization, and reporting.
pub fn calibrate(
    imu: &[ImuSample],
    scans: &[Scan],
    config: &CalibConfig,
    odometry: &mut dyn OdometrySource,
) -> Result<CalibReport> {
    calibrate_detailed(imu, scans, config, odometry).map(|(report, _)| report)
}

/// Like [`calibrate`] but also returns the final optimizer state.
pub fn calibrate_detailed(
    imu: &[ImuSample],
    scans: &[Scan],
    config: &CalibConfig,
    odometry: &mut dyn OdometrySource,
) -> Result<(CalibReport, CalibState)> {
    let t_start = Instant::now();
    config.validate()?;
    if imu.len() < 16 || scans.len() < 4 {
        return Err(CalibError::InsufficientData(format!(
            "need at least 16 IMU samples and 4 scans, got {} and {}",
            imu.len(),
            scans.len()
        )));
    }

    // Time spans must overlap by at least 2 seconds.
    let imu_span = (imu[0].t, imu[imu.len() - 1].t);
    let scan_pts_span = (
        scans
            .first()
            .and_then(|s| s.time_span())
            .ok_or_else(|| CalibError::InsufficientData("first scan is empty".into()))?
            .0,
        scans
            .last()
            .and_then(|s| s.time_span())
            .ok_or_else(|| CalibError::InsufficientData("last scan is empty".into()))?
            .1,
    );
    let overlap = imu_span.1.min(scan_pts_span.1) - imu_span.0.max(scan_pts_span.0);
    if overlap < 2.0 {
        return Err(CalibError::InsufficientData(format!(
            "IMU and LiDAR overlap {overlap:.2} s (need >= 2 s)"
        )));
    }

    // Motion excitation gate.
    let excitation = imu.iter().map(|s| s.gyro.norm()).sum::<f64>() / imu.len() as f64;
    if excitation < config.min_excitation {
        return Err(CalibError::Observability(format!(
            "[excitation check] mean |gyro| {excitation:.4} rad/s below floor {} rad/s; \
             the sequence has too little rotation for calibration",
            config.min_excitation
        )));
    }

    let grid = KnotGrid::covering(
        imu_span.0.min(scan_pts_span.0),
        imu_span.1.max(scan_pts_span.1),
        config.knot_dt,
    )?;

    // Downsampled scans are used everywhere below.
    let scans_ds: Vec<Scan> = scans
        .iter()
        .enumerate()
        .map(|(k, s)| downsample(s, config.downsample_ratio, mix(config.seed, k as u64)))
        .collect();
    if scans_ds.iter().any(|s| s.is_empty()) {
        return Err(CalibError::InsufficientData(
            "a scan became empty after downsampling".into(),
        ));
    }

    // Stage 1: rotation initialization.
    let gyro_spline = fit_gyro_spline(imu, grid).map_err(|e| with_stage(e, "gyro spline fit"))?;
    let poses_raw = odometry
        .scan_poses(&scans_ds, None)
        .map_err(|e| with_stage(e, "initial odometry"))?;
    let stride = config.handeye_stride.max(1);
    if poses_raw.len() <= stride {
        return Err(CalibError::InsufficientData(format!(
            "[hand-eye alignment] {} scan poses cannot form pairs of stride {stride}",
            poses_raw.len()
        )));
    }
    let mut pairs = Vec::with_capacity(poses_raw.len() - stride);
    for k in 0..poses_raw.len() - stride {
        let dq_imu = relative_rotation(&gyro_spline, poses_raw[k].t, poses_raw[k + stride].t)
            .map_err(|e| with_stage(e, "rotation pairing"))?;
        let (dq_lidar, _) = relative_pose(&poses_raw[k], &poses_raw[k + stride]);
        pairs.push(RotPair::new(dq_imu, dq_lidar, config.handeye_threshold));
    }
    let q_li = solve_handeye(&pairs).map_err(|e| with_stage(e, "hand-eye alignment"))?;
    let ext0 = Extrinsics::new(q_li, Vector3::zeros());

    // Stage 2: odometry with rotational deskew, trajectory + gravity init.
    let deskew_ctx = RotationDeskew {
        gyro: &gyro_spline,
        ext_rot: q_li,
    };
    let scan_poses = odometry
        .scan_poses(&scans_ds, Some(&deskew_ctx))
        .map_err(|e| with_stage(e, "deskewed odometry"))?;

    let imu_poses: Vec<(f64, UnitQuaternion<f64>, Vector3<f64>)> = scan_poses
        .iter()
        .map(|p| (p.t, q_li * p.rot * q_li.inverse(), q_li * p.trans))
        .collect();
    let mut traj = fit_to_poses(&imu_poses, grid).map_err(|e| with_stage(e, "trajectory fit"))?;
    // Re-anchor so the gauge-fixed first control point is the identity.
    let q_fix = traj.rot().ctrl()[0].inverse();
    let p_fix = -(q_fix * traj.pos().ctrl()[0]);
    traj.apply_left_transform(q_fix, p_fix);

    // Gravity direction from averaged rotated accelerometer readings.
    let mut g_sum = Vector3::zeros();
    for s in imu {
        g_sum -= traj.rot().orientation(s.t)? * s.accel;
    }
    let g_dir = if g_sum.norm() > 1e-6 {
        g_sum.normalize()
    } else {
        -Vector3::z()
    };
    traj.gravity = g_dir * GRAVITY_MAGNITUDE;

    let mut state = CalibState::new(ext0, traj, Vector3::zeros(), Vector3::zeros());

    // Per-scan motion compensation for the first map: the trajectory
    // fitted to the odometry poses provides rotation and translation
    // within each scan (extrinsic translation still zero).
    let scans_deskewed: Vec<Scan> = scans_ds
        .iter()
        .map(|s| deskew_scan(s, &state.traj, &state.ext, DeskewMode::Full))
        .collect::<Result<_>>()
        .map_err(|e| with_stage(e, "first-map deskew"))?;

    let anchor_time = scans_ds[0].ref_time;
    let lm_opts = config.lm_options();
    let mut records: Vec<IterationRecord> = Vec::with_capacity(config.iterations);
    let mut stabilized_at = None;
    let handeye_rotation: ExtrinsicsParam = ext0.into();

    for round in 0..config.iterations {
        let round_start = Instant::now();
        let stage_label = format!("iteration {}", round + 1);

        // Map-frame positions: odometry poses in round 1, the optimized
        // continuous-time state afterwards.
        let (map_points, assoc_points) = if round == 0 {
            let mut assoc: Vec<(LidarPoint, Vector3<f64>)> = Vec::new();
            for (si, scan) in scans_deskewed.iter().enumerate() {
                let pose = &scan_poses[si];
                for (pi, pt) in scan.points.iter().enumerate() {
                    let map_p = pose.rot * pt.pos + pose.trans;
                    assoc.push((scans_ds[si].points[pi], map_p));
                }
            }
            (assoc.clone(), assoc)
        } else {
            let mut assoc: Vec<(LidarPoint, Vector3<f64>)> = Vec::new();
            for scan in &scans_ds {
                for pt in &scan.points {
                    let map_p = state
                        .traj
                        .lidar_point_to_map(&state.ext, pt.pos, pt.t, anchor_time)
                        .map_err(|e| with_stage(e, &stage_label))?;
                    assoc.push((*pt, map_p));
                }
            }
            (assoc.clone(), assoc)
        };

        let mut map = SurfelMap::new(config.cell_size);
        for (i, (_, p)) in map_points.iter().enumerate() {
            map.insert_point(i as u64, *p);
        }
        map.extract_surfels(
            &config.surfel_params(round == 0),
            mix(config.seed, 0xface + round as u64),
        );
        if let Some(dir) = &config.dump_surfels {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::File::create(dir.join(format!("surfels_iter{}.jsonl", round + 1)))?;
            map.write_surfels_jsonl(std::io::BufWriter::new(f))?;
        }

        let corrs = filter_ambiguous(
            associate(&assoc_points, &map, config.reject_dist),
            &map,
            config.reject_dist,
            0.9,
        );
        if corrs.len() < 100 {
            return Err(with_stage(
                CalibError::InsufficientData(format!(
                    "{} point-to-surfel correspondences (need >= 100); map has {} surfels",
                    corrs.len(),
                    map.surfels().len()
                )),
                &stage_label,
            ));
        }
        let n_surfels = map.surfels().len();

        let problem = Problem::new(imu.to_vec(), corrs, config.noise, grid, anchor_time)
            .map_err(|e| with_stage(e, &stage_label))?;
        let n_corr = problem.correspondences.len();
        let (next, lm_report) = solve_lm(&problem, state, &lm_opts)
            .map_err(|e| with_stage(e, &format!("batch optimization, {stage_label}")))?;
        state = next;

        records.push(IterationRecord {
            extrinsics: state.ext.into(),
            euler_deg: state.ext.euler_deg(),
            surfels: n_surfels,
            correspondences: n_corr,
            lm: lm_report,
            refined: true,
            wall_ms: round_start.elapsed().as_secs_f64() * 1e3,
        });

        // Plateau exit: repeat the stabilized estimate for the remaining
        // rounds instead of rebuilding the map again.
        if records.len() >= 2 {
            let prev: Extrinsics = records[records.len() - 2].extrinsics.into();
            let (d_rot, d_trans) = extrinsic_error(&state.ext, &prev);
            if d_rot < config.plateau_rot_deg && d_trans < config.plateau_trans {
                stabilized_at = Some(round + 1);
                while records.len() < config.iterations {
                    let mut padded = records.last().unwrap().clone();
                    padded.refined = false;
                    padded.wall_ms = 0.0;
                    records.push(padded);
                }
                break;
            }
        }
    }

    let report = CalibReport {
        iterations: records,
        stabilized_at,
        handeye_rotation,
        bias_acc: state.bias_acc.into(),
        bias_gyro: state.bias_gyro.into(),
        gravity: state.traj.gravity.into(),
        excitation,
        truth: None,
        total_wall_ms: t_start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((report, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::{SplineR3, SplineSO3};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn extrinsic_error_cases() {
        let e = Extrinsics::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.1, 0.2, 0.3)),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let (r0, t0) = extrinsic_error(&e, &e);
        assert!(r0 < 1e-12 && t0 == 0.0);

        let yaw1 = Extrinsics::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 1.0f64.to_radians()),
            Vector3::zeros(),
        );
        let (r, t) = extrinsic_error(&yaw1, &Extrinsics::identity());
        assert_relative_eq!(r, 1.0, epsilon = 1e-10);
        assert_eq!(t, 0.0);

        // Random pair against the rotation-matrix trace formula.
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        for _ in 0..30 {
            let qa = UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let qb = UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let (r, _) = extrinsic_error(
                &Extrinsics::new(qa, Vector3::zeros()),
                &Extrinsics::new(qb, Vector3::zeros()),
            );
            let rel = (qa.inverse() * qb).to_rotation_matrix();
            let tr: f64 = rel.matrix().trace();
            let expect = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((r - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn deskew_stationary_scan_is_identity() {
        let grid = KnotGrid::new(0.0, 0.1, 8).unwrap();
        let traj = Trajectory::stationary(grid, Vector3::zeros());
        let ext = Extrinsics::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.2, -0.1, 0.4)),
            Vector3::new(0.1, 0.0, -0.05),
        );
        let scan = Scan::new(
            0.1,
            (0..40)
                .map(|k| LidarPoint {
                    t: 0.1 + k as f64 * 0.002,
                    pos: Vector3::new(1.0 + k as f64 * 0.01, 2.0, -0.5),
                })
                .collect(),
        );
        for mode in [DeskewMode::RotationOnly, DeskewMode::Full] {
            let out = deskew_scan(&scan, &traj, &ext, mode).unwrap();
            for (a, b) in scan.points.iter().zip(&out.points) {
                assert!((a.pos - b.pos).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn deskew_constant_velocity_matches_per_point_oracle() {
        let n = 12;
        let grid = KnotGrid::new(0.0, 0.1, n).unwrap();
        let v = Vector3::new(0.8, -0.3, 0.2);
        let ctrl = (0..n).map(|k| v * (k as f64 * 0.1)).collect();
        let traj = Trajectory::new(
            SplineSO3::constant(grid, UnitQuaternion::identity()),
            SplineR3::new(grid, ctrl).unwrap(),
            Vector3::zeros(),
        )
        .unwrap();
        let ext = Extrinsics::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.5),
            Vector3::new(0.1, 0.05, 0.0),
        );
        let scan = Scan::new(
            0.2,
            (0..30)
                .map(|k| LidarPoint {
                    t: 0.2 + k as f64 * 0.005,
                    pos: Vector3::new(2.0, -1.0, 0.5),
                })
                .collect(),
        );
        let out = deskew_scan(&scan, &traj, &ext, DeskewMode::Full).unwrap();
        for (a, b) in scan.points.iter().zip(&out.points) {
            // Identity rotations throughout: the point moves by the
            // extrinsic-rotated relative translation.
            let dt = a.t - scan.ref_time;
            let expect = a.pos + ext.rot.inverse() * (v * dt);
            assert!((b.pos - expect).norm() < 1e-9, "{:?} vs {expect:?}", b.pos);
        }

        // Rotation-only deskew of pure translation leaves points in place.
        let rot_only = deskew_scan(&scan, &traj, &ext, DeskewMode::RotationOnly).unwrap();
        for (a, b) in scan.points.iter().zip(&rot_only.points) {
            assert!((a.pos - b.pos).norm() < 1e-12);
        }
    }

    #[test]
    fn stationary_dataset_fails_excitation_gate() {
        let grid = KnotGrid::new(0.0, 0.02, 204).unwrap();
        let traj = Trajectory::stationary(grid, Vector3::new(0.0, 0.0, -GRAVITY_MAGNITUDE));
        let model = crate::sim::ImuModel {
            sigma_gyro: 0.0,
            sigma_accel: 0.0,
            ..Default::default()
        };
        let imu = crate::sim::simulate_imu(&traj, &model, 1).unwrap();
        let scans: Vec<Scan> = (0..30)
            .map(|k| {
                Scan::new(
                    k as f64 * 0.1,
                    vec![LidarPoint {
                        t: k as f64 * 0.1,
                        pos: Vector3::new(1.0, 1.0, 1.0),
                    }],
                )
            })
            .collect();
        let mut odom = crate::odometry::OracleOdometry::from_trajectory(
            &traj,
            &Extrinsics::identity(),
            &scans.iter().map(|s| s.ref_time).collect::<Vec<_>>(),
            0.0,
            0.0,
            1,
        )
        .unwrap();
        match calibrate(&imu, &scans, &CalibConfig::default(), &mut odom) {
            Err(CalibError::Observability(msg)) => {
                assert!(msg.contains("excitation"), "{msg}");
            }
            other => panic!("expected excitation error, got {other:?}"),
        }
    }

    #[test]
    fn config_profile_switch() {
        let mut c = CalibConfig::default();
        c.apply_profile("outdoor").unwrap();
        assert_eq!(c.cell_size, 1.0);
        c.apply_profile("indoor").unwrap();
        assert_eq!(c.cell_size, 0.5);
        assert!(c.apply_profile("underwater").is_err());
    }
}
