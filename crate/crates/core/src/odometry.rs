//! LiDAR pose sources for initialization.
//!
//! The pipeline only needs per-scan poses in the first-scan frame plus the
//! relative rotations between consecutive scans, so the front-end is a
//! trait. Two implementations ship: a simulation oracle (ground truth plus
//! seeded noise) and a basic point-to-plane ICP matcher against the surfel
//! map. A scan-to-map NDT front-end could be dropped in behind the same
//! trait.

use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::scan::Scan;
use crate::splines::{quat_exp, SplineSO3};
use crate::surfel::{SurfelMap, SurfelParams};
use crate::trajectory::{Extrinsics, Trajectory};
use crate::{CalibError, Result};

/// Pose of one LiDAR scan in the first-scan frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPose {
    /// Scan reference time, seconds.
    pub t: f64,
    pub rot: UnitQuaternion<f64>,
    pub trans: Vector3<f64>,
}

/// Relative pose `(q_a⁻¹ ⊗ q_b, R(q_a)ᵀ (p_b − p_a))` from `a` to `b`.
pub fn relative_pose(a: &ScanPose, b: &ScanPose) -> (UnitQuaternion<f64>, Vector3<f64>) {
    (
        a.rot.inverse() * b.rot,
        a.rot.inverse() * (b.trans - a.trans),
    )
}

/// Rotational deskew context: once the extrinsic rotation is initialized,
/// the gyro spline predicts the rotation of every point relative to its
/// scan's reference time.
pub struct RotationDeskew<'a> {
    pub gyro: &'a SplineSO3,
    pub ext_rot: UnitQuaternion<f64>,
}

impl RotationDeskew<'_> {
    /// Rotates each point into the scan's reference-time LiDAR frame
    /// (translation frozen).
    pub fn deskew(&self, scan: &Scan) -> Result<Scan> {
        let q_ref = self.gyro.orientation(scan.ref_time)?;
        let points = scan
            .points
            .iter()
            .map(|pt| {
                let q_t = self.gyro.orientation(pt.t)?;
                let rel = self.ext_rot.inverse() * (q_ref.inverse() * q_t) * self.ext_rot;
                Ok(crate::scan::LidarPoint {
                    t: pt.t,
                    pos: rel * pt.pos,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scan::new(scan.ref_time, points))
    }
}

/// A source of per-scan LiDAR poses.
pub trait OdometrySource {
    /// Estimates poses for all scans. `deskew` is available once the
    /// extrinsic rotation has been initialized; the oracle ignores it.
    /// Repeated calls must return identical poses for identical inputs.
    fn scan_poses(
        &mut self,
        scans: &[Scan],
        deskew: Option<&RotationDeskew>,
    ) -> Result<Vec<ScanPose>>;
}

/// Ground-truth LiDAR poses from a trajectory and extrinsics, perturbed by
/// independent rotation (uniform axis, Gaussian angle) and per-axis
/// Gaussian translation noise.
pub fn oracle_odometry(
    truth: &Trajectory,
    ext: &Extrinsics,
    scan_times: &[f64],
    noise: (f64, f64),
    seed: u64,
) -> Result<Vec<ScanPose>> {
    let exact = exact_lidar_poses(truth, ext, scan_times)?;
    Ok(perturb_poses(&exact, noise, seed))
}

/// Noiseless LiDAR poses `T_L0←L(t) = (T_I(t_0)·T_ext)⁻¹ · T_I(t) · T_ext`,
/// anchored at the first scan time.
pub fn exact_lidar_poses(
    truth: &Trajectory,
    ext: &Extrinsics,
    scan_times: &[f64],
) -> Result<Vec<ScanPose>> {
    let t0 = *scan_times.first().ok_or_else(|| {
        CalibError::InsufficientData("oracle odometry needs at least one scan time".into())
    })?;
    let (q0, p0) = truth.pose(t0)?;
    let q_l0 = q0 * ext.rot;
    let p_l0 = q0 * ext.trans + p0;
    scan_times
        .iter()
        .map(|&t| {
            let (q, p) = truth.pose(t)?;
            let q_l = q * ext.rot;
            let p_l = q * ext.trans + p;
            Ok(ScanPose {
                t,
                rot: q_l0.inverse() * q_l,
                trans: q_l0.inverse() * (p_l - p_l0),
            })
        })
        .collect()
}

fn perturb_poses(
    poses: &[ScanPose],
    (sigma_rot, sigma_trans): (f64, f64),
    seed: u64,
) -> Vec<ScanPose> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let rot_n = Normal::new(0.0, sigma_rot.max(0.0)).expect("valid sigma");
    let trans_n = Normal::new(0.0, sigma_trans.max(0.0)).expect("valid sigma");
    poses
        .iter()
        .map(|p| {
            let mut axis = Vector3::new(
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
            );
            while axis.norm() < 1e-6 {
                axis = Vector3::new(
                    rng.random_range(-1.0..1.0f64),
                    rng.random_range(-1.0..1.0f64),
                    rng.random_range(-1.0..1.0f64),
                );
            }
            axis.normalize_mut();
            let angle: f64 = rot_n.sample(&mut rng);
            let dt = Vector3::new(
                trans_n.sample(&mut rng),
                trans_n.sample(&mut rng),
                trans_n.sample(&mut rng),
            );
            ScanPose {
                t: p.t,
                rot: p.rot * quat_exp(axis * angle),
                trans: p.trans + dt,
            }
        })
        .collect()
}

/// Oracle pose source: noiseless truth poses perturbed with a fixed seed.
/// Both calls of the pipeline receive the same poses.
pub struct OracleOdometry {
    poses: Vec<ScanPose>,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub seed: u64,
}

impl OracleOdometry {
    pub fn from_trajectory(
        truth: &Trajectory,
        ext: &Extrinsics,
        scan_times: &[f64],
        sigma_rot: f64,
        sigma_trans: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            poses: exact_lidar_poses(truth, ext, scan_times)?,
            sigma_rot,
            sigma_trans,
            seed,
        })
    }

    /// Wraps pre-computed ground-truth scan poses (e.g. loaded from a
    /// simulated dataset on disk).
    pub fn from_poses(poses: Vec<ScanPose>, sigma_rot: f64, sigma_trans: f64, seed: u64) -> Self {
        Self {
            poses,
            sigma_rot,
            sigma_trans,
            seed,
        }
    }
}

impl OdometrySource for OracleOdometry {
    fn scan_poses(
        &mut self,
        scans: &[Scan],
        _deskew: Option<&RotationDeskew>,
    ) -> Result<Vec<ScanPose>> {
        if scans.len() != self.poses.len() {
            return Err(CalibError::InvalidInput(format!(
                "oracle has {} poses but {} scans were provided",
                self.poses.len(),
                scans.len()
            )));
        }
        Ok(perturb_poses(
            &self.poses,
            (self.sigma_rot, self.sigma_trans),
            self.seed,
        ))
    }
}

/// Point-to-plane ICP parameters.
#[derive(Debug, Clone)]
pub struct IcpParams {
    pub cell_size: f64,
    pub surfel: SurfelParams,
    /// Association gate during registration, meters.
    pub max_corr_dist: f64,
    pub max_iters: usize,
    pub min_correspondences: usize,
    /// Number of leading scans folded into the reference map; later scans
    /// register against this frozen map so registration errors cannot
    /// accumulate (calibration sequences wiggle in place, so coverage
    /// stays adequate).
    pub map_scans: usize,
    pub seed: u64,
}

impl Default for IcpParams {
    fn default() -> Self {
        // Tolerant defaults: the first registration pass runs on raw
        // (motion-distorted) scans, so planes are thick and poses drift.
        Self {
            cell_size: 0.5,
            surfel: SurfelParams {
                planarity_min: 0.35,
                min_cell_points: 10,
                ransac_iters: 50,
                ransac_inlier_tol: 0.05,
            },
            max_corr_dist: 0.5,
            max_iters: 20,
            min_correspondences: 20,
            map_scans: 3,
            seed: 0,
        }
    }
}

/// Per-registration diagnostics.
#[derive(Debug, Clone)]
pub struct IcpReport {
    pub iterations: usize,
    pub correspondences: usize,
    /// Mean absolute point-to-plane residual after the last step, meters.
    pub mean_residual: f64,
    /// (before, after) cost of each accepted step, fixed correspondences.
    pub accepted_steps: Vec<(f64, f64)>,
}

/// Registers one (deskewed) scan against the surfel map by Gauss-Newton on
/// the squared point-to-plane distances, with step halving so accepted
/// steps never increase the cost.
pub fn icp_point_to_plane(
    scan: &Scan,
    map: &SurfelMap,
    initial: &ScanPose,
    params: &IcpParams,
) -> Result<(ScanPose, IcpReport)> {
    let mut pose = *initial;
    let mut report = IcpReport {
        iterations: 0,
        correspondences: 0,
        mean_residual: 0.0,
        accepted_steps: Vec::new(),
    };

    for iter in 0..params.max_iters {
        report.iterations = iter + 1;

        // Associate under the current pose: own cell first, then face
        // neighbors (the guess may sit a cell off early in a sequence).
        let mut matches: Vec<(Vector3<f64>, crate::surfel::Plane)> = Vec::new();
        for pt in &scan.points {
            let p_map = pose.rot * pt.pos + pose.trans;
            let mut best: Option<(f64, crate::surfel::Plane)> = None;
            let own = crate::surfel::cell_index(&p_map, map.cell_size());
            let try_cell =
                |di: i64, dj: i64, dk: i64, best: &mut Option<(f64, crate::surfel::Plane)>| {
                    let idx = [own[0] + di, own[1] + dj, own[2] + dk];
                    if let Some(s) = map.surfel_in_cell(&idx) {
                        let d = s.plane.distance(&p_map).abs();
                        if d <= params.max_corr_dist
                            && best.as_ref().map_or(true, |(bd, _)| d < *bd)
                        {
                            *best = Some((d, s.plane));
                        }
                    }
                };
            try_cell(0, 0, 0, &mut best);
            if best.is_none() {
                for (di, dj, dk) in [
                    (1, 0, 0),
                    (-1, 0, 0),
                    (0, 1, 0),
                    (0, -1, 0),
                    (0, 0, 1),
                    (0, 0, -1),
                ] {
                    try_cell(di, dj, dk, &mut best);
                }
            }
            if let Some((_, plane)) = best {
                matches.push((pt.pos, plane));
            }
        }
        if matches.len() < params.min_correspondences {
            return Err(CalibError::DegenerateRegistration(format!(
                "only {} point-to-plane correspondences (need {})",
                matches.len(),
                params.min_correspondences
            )));
        }
        report.correspondences = matches.len();

        let cost_of = |p: &ScanPose| -> f64 {
            matches
                .iter()
                .map(|(pt, plane)| {
                    let r = plane.distance(&(p.rot * pt + p.trans));
                    r * r
                })
                .sum()
        };
        let cost0 = cost_of(&pose);

        // Normal equations over [δθ, δt].
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (pt, plane) in &matches {
            let r = plane.distance(&(pose.rot * pt + pose.trans));
            let n = plane.normal;
            let jr = pt.cross(&(pose.rot.inverse() * n)); // ∂r/∂δθ = [p]ₓRᵀn
            let mut j = Vector6::zeros();
            j.fixed_rows_mut::<3>(0).copy_from(&jr);
            j.fixed_rows_mut::<3>(3).copy_from(&n);
            h += j * j.transpose();
            g += j * r;
        }

        // Degeneracy check: a single plane leaves in-plane directions free.
        let eig = h.symmetric_eigen();
        let (mut emin, mut emax) = (f64::INFINITY, 0.0f64);
        for &e in eig.eigenvalues.iter() {
            emin = emin.min(e);
            emax = emax.max(e);
        }
        if emin < 1e-9 * emax {
            return Err(CalibError::DegenerateRegistration(format!(
                "registration underconstrained (eigenvalue ratio {:.3e})",
                emin / emax
            )));
        }

        let delta = h
            .cholesky()
            .ok_or_else(|| {
                CalibError::DegenerateRegistration("normal equations not positive definite".into())
            })?
            .solve(&-g);

        // Step halving keeps the cost non-increasing.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let dq = quat_exp(Vector3::new(delta[0], delta[1], delta[2]) * scale);
            let cand = ScanPose {
                t: pose.t,
                rot: pose.rot * dq,
                trans: pose.trans + Vector3::new(delta[3], delta[4], delta[5]) * scale,
            };
            let c = cost_of(&cand);
            if c <= cost0 {
                accepted = Some((cand, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, c)) = accepted else {
            break;
        };
        report.accepted_steps.push((cost0, c));
        pose = cand;
        report.mean_residual = (c / matches.len() as f64).sqrt();

        if delta.norm() * scale < 1e-6 {
            break;
        }
    }
    Ok((pose, report))
}

/// Incremental scan-to-map ICP odometry: registers each scan against the
/// surfel map of all previous scans, then folds it in.
pub struct IcpOdometry {
    pub params: IcpParams,
}

impl IcpOdometry {
    pub fn new(params: IcpParams) -> Self {
        Self { params }
    }
}

impl OdometrySource for IcpOdometry {
    fn scan_poses(
        &mut self,
        scans: &[Scan],
        deskew: Option<&RotationDeskew>,
    ) -> Result<Vec<ScanPose>> {
        if scans.is_empty() {
            return Err(CalibError::InsufficientData("no scans".into()));
        }
        let prepared: Vec<Scan> = match deskew {
            Some(d) => scans.iter().map(|s| d.deskew(s)).collect::<Result<_>>()?,
            None => scans.to_vec(),
        };

        let mut map = SurfelMap::new(self.params.cell_size);
        let mut id = 0u64;
        let mut poses = Vec::with_capacity(scans.len());

        let first = ScanPose {
            t: prepared[0].ref_time,
            rot: UnitQuaternion::identity(),
            trans: Vector3::zeros(),
        };
        for pt in &prepared[0].points {
            map.insert_point(id, pt.pos);
            id += 1;
        }
        map.extract_surfels(&self.params.surfel, self.params.seed);
        poses.push(first);

        for (k, scan) in prepared.iter().enumerate().skip(1) {
            // Constant-velocity guess: repeat the last relative motion.
            let guess = if k >= 2 {
                let (dq, dp) = relative_pose(&poses[k - 2], &poses[k - 1]);
                ScanPose {
                    t: scan.ref_time,
                    rot: poses[k - 1].rot * dq,
                    trans: poses[k - 1].rot * dp + poses[k - 1].trans,
                }
            } else {
                ScanPose {
                    t: scan.ref_time,
                    ..poses[k - 1]
                }
            };
            // Registration attempts: constant-velocity guess, previous
            // pose, then carry the guess forward unrefined (hand-eye
            // weighting suppresses the occasional bad pair downstream).
            let attempts = [guess, poses[k - 1]];
            let mut pose = guess;
            let mut registered = false;
            for init in attempts {
                let init = ScanPose {
                    t: scan.ref_time,
                    ..init
                };
                if let Ok((p, _)) = icp_point_to_plane(scan, &map, &init, &self.params) {
                    pose = p;
                    registered = true;
                    break;
                }
            }
            if !registered {
                log::warn!(
                    "scan {k} at t={:.3}: registration failed, extrapolating pose",
                    scan.ref_time
                );
            }
            // Only the leading scans extend the reference map.
            if k < self.params.map_scans {
                for pt in &scan.points {
                    map.insert_point(id, pose.rot * pt.pos + pose.trans);
                    id += 1;
                }
                map.extract_surfels(&self.params.surfel, self.params.seed);
            }
            poses.push(pose);
        }
        Ok(poses)
    }
}
