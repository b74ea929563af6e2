//! Continuous IMU trajectory and the LiDAR-IMU extrinsic transform.
//!
//! A trajectory is one SO(3) spline (IMU orientation relative to the first
//! IMU frame) plus one R³ spline (IMU position in that frame) over a shared
//! knot grid, together with the gravity vector expressed in the same frame.

use nalgebra::{UnitQuaternion, Vector3};

use crate::linalg::{accumulate_row, ArrowSystem};
use crate::splines::{quat_exp, quat_log, KnotGrid, SplineR3, SplineSO3};
use crate::{CalibError, Result};

/// Standard gravity magnitude used by the fixed-norm gravity
/// parametrization, m/s².
pub const GRAVITY_MAGNITUDE: f64 = 9.81;

/// Rigid transform from the LiDAR frame to the IMU frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    /// LiDAR→IMU rotation.
    pub rot: UnitQuaternion<f64>,
    /// LiDAR origin in the IMU frame, meters.
    pub trans: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rot: UnitQuaternion<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn identity() -> Self {
        Self {
            rot: UnitQuaternion::identity(),
            trans: Vector3::zeros(),
        }
    }

    /// Extrinsic rotation as intrinsic Z-Y-X Euler angles, degrees
    /// (roll, pitch, yaw).
    pub fn euler_deg(&self) -> [f64; 3] {
        let (r, p, y) = self.rot.euler_angles();
        [r.to_degrees(), p.to_degrees(), y.to_degrees()]
    }
}

/// Continuous 6-DOF IMU trajectory with gravity.
#[derive(Debug, Clone)]
pub struct Trajectory {
    rot: SplineSO3,
    pos: SplineR3,
    /// Gravity in the trajectory reference frame, m/s².
    pub gravity: Vector3<f64>,
}

impl Trajectory {
    pub fn new(rot: SplineSO3, pos: SplineR3, gravity: Vector3<f64>) -> Result<Self> {
        if rot.grid() != pos.grid() {
            return Err(CalibError::InvalidInput(
                "rotation and position splines must share one knot grid".into(),
            ));
        }
        Ok(Self { rot, pos, gravity })
    }

    pub fn stationary(grid: KnotGrid, gravity: Vector3<f64>) -> Self {
        Self {
            rot: SplineSO3::constant(grid, UnitQuaternion::identity()),
            pos: SplineR3::constant(grid, Vector3::zeros()),
            gravity,
        }
    }

    pub fn grid(&self) -> &KnotGrid {
        self.rot.grid()
    }

    pub fn rot(&self) -> &SplineSO3 {
        &self.rot
    }

    pub fn pos(&self) -> &SplineR3 {
        &self.pos
    }

    pub fn rot_mut(&mut self) -> &mut SplineSO3 {
        &mut self.rot
    }

    pub fn pos_mut(&mut self) -> &mut SplineR3 {
        &mut self.pos
    }

    /// IMU pose at `t`: orientation and position in the reference frame.
    pub fn pose(&self, t: f64) -> Result<(UnitQuaternion<f64>, Vector3<f64>)> {
        Ok((self.rot.orientation(t)?, self.pos.position(t)?))
    }

    /// Specific force the accelerometer would measure at `t` (bias-free):
    /// `Rᵀ(t)·(p̈(t) − g)`.
    pub fn predict_accel(&self, t: f64) -> Result<Vector3<f64>> {
        let r = self.rot.orientation(t)?;
        let acc = self.pos.acceleration(t)?;
        Ok(r.inverse() * (acc - self.gravity))
    }

    /// Body-frame angular rate the gyroscope would measure at `t`
    /// (bias-free).
    pub fn predict_gyro(&self, t: f64) -> Result<Vector3<f64>> {
        self.rot.angular_velocity_body(t)
    }

    /// Re-expresses a LiDAR point captured at `t_j` in the LiDAR frame at
    /// the reference time `t_0` (the map frame when `t_0` is the first
    /// scan): LiDAR→IMU, IMU pose at `t_j`, inverse pose at `t_0`,
    /// IMU→LiDAR.
    pub fn lidar_point_to_map(
        &self,
        ext: &Extrinsics,
        p: Vector3<f64>,
        t_j: f64,
        t_0: f64,
    ) -> Result<Vector3<f64>> {
        let (qj, pj) = self.pose(t_j)?;
        let (q0, p0) = self.pose(t_0)?;
        let p_imu = ext.rot * p + ext.trans;
        let p_ref = qj * p_imu + pj;
        let p_imu0 = q0.inverse() * (p_ref - p0);
        Ok(ext.rot.inverse() * (p_imu0 - ext.trans))
    }

    /// Left-composes a constant rigid transform into every control point,
    /// e.g. to re-anchor the trajectory so its first control point is the
    /// identity pose. Exact for both splines.
    pub fn apply_left_transform(&mut self, q: UnitQuaternion<f64>, p: Vector3<f64>) {
        for k in 0..self.rot.ctrl().len() {
            let c = self.rot.ctrl()[k];
            self.rot.set_ctrl(k, q * c);
        }
        self.rot.condition_signs();
        for k in 0..self.pos.ctrl().len() {
            let c = self.pos.ctrl()[k];
            self.pos.set_ctrl(k, q * c + p);
        }
    }
}

/// Least-squares spline initialization from discrete timestamped poses.
///
/// Control points minimize the summed squared position error plus squared
/// log-map orientation error at the pose timestamps. A small curvature
/// penalty keeps knots between sparse poses smoothly interpolated. Gravity
/// of the returned trajectory is zero; callers set it.
pub fn fit_to_poses(
    poses: &[(f64, UnitQuaternion<f64>, Vector3<f64>)],
    grid: KnotGrid,
) -> Result<Trajectory> {
    if poses.len() < 4 {
        return Err(CalibError::InsufficientData(format!(
            "need at least 4 poses to fit a cubic spline, got {}",
            poses.len()
        )));
    }
    for w in poses.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(CalibError::InvalidInput(format!(
                "pose timestamps must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
    }
    for &(t, _, _) in poses {
        if !grid.contains(t) {
            let (start, end) = grid.domain();
            return Err(CalibError::OutOfDomain { t, start, end });
        }
    }

    let pos = fit_positions(poses, grid)?;
    let rot = fit_rotations(poses, grid)?;
    Trajectory::new(rot, pos, Vector3::zeros())
}

pub(crate) const CURVATURE_REG: f64 = 1e-10;

fn fit_positions(
    poses: &[(f64, UnitQuaternion<f64>, Vector3<f64>)],
    grid: KnotGrid,
) -> Result<SplineR3> {
    let n = grid.num_ctrl();
    // Interleaved xyz unknowns; supports of four consecutive knots span 11
    // component indices.
    let mut sys = ArrowSystem::new(3 * n, 11, 0);
    let probe = SplineR3::constant(grid, Vector3::zeros());
    for &(t, _, p) in poses {
        let (i, w) = probe.weights(t, 0)?;
        for axis in 0..3 {
            let entries: Vec<(usize, f64)> = (0..4).map(|j| (3 * (i + j) + axis, w[j])).collect();
            accumulate_row(&mut sys, &entries, -p[axis], 1.0);
        }
    }
    let mu = CURVATURE_REG.sqrt();
    for k in 1..n - 1 {
        for axis in 0..3 {
            let entries = [
                (3 * (k - 1) + axis, 1.0),
                (3 * k + axis, -2.0),
                (3 * (k + 1) + axis, 1.0),
            ];
            accumulate_row(&mut sys, &entries, 0.0, mu);
        }
    }
    let x = sys.solve(0.0).map_err(|e| {
        CalibError::InsufficientData(format!(
            "position fit normal equations singular near control point {}",
            e.index / 3
        ))
    })?;
    let ctrl = (0..n)
        .map(|k| Vector3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]))
        .collect();
    SplineR3::new(grid, ctrl)
}

fn fit_rotations(
    poses: &[(f64, UnitQuaternion<f64>, Vector3<f64>)],
    grid: KnotGrid,
) -> Result<SplineSO3> {
    let n = grid.num_ctrl();

    // Initialize control points by interpolating the measured orientations
    // at the knot times.
    let interp = |t: f64| -> UnitQuaternion<f64> {
        if t <= poses[0].0 {
            return poses[0].1;
        }
        if t >= poses[poses.len() - 1].0 {
            return poses[poses.len() - 1].1;
        }
        let k = poses.partition_point(|&(pt, _, _)| pt <= t);
        let (t0, q0, _) = poses[k - 1];
        let (t1, q1, _) = poses[k];
        q0.slerp(&q1, (t - t0) / (t1 - t0))
    };
    let ctrl: Vec<UnitQuaternion<f64>> = (0..n).map(|k| interp(grid.knot_time(k))).collect();
    let mut spline = SplineSO3::new(grid, ctrl)?;

    // Gauss-Newton with mild damping on the log-map residuals.
    let mut lambda = 1e-6;
    let mut cost = rot_fit_cost(&spline, poses)?;
    let h = 1e-6;
    let mu = CURVATURE_REG.sqrt();
    for _ in 0..30 {
        let mut sys = ArrowSystem::new(3 * n, 11, 0);
        for &(t, q_meas, _) in poses {
            let r = rot_residual(&spline.orientation(t)?, &q_meas);
            let (i, _) = spline.grid().segment(t)?;
            let mut entries = Vec::with_capacity(12);
            let mut jac = Vec::with_capacity(12);
            for j in 0..4 {
                let k = i + j;
                let base = spline.ctrl()[k];
                for axis in 0..3 {
                    let mut step = Vector3::zeros();
                    step[axis] = h;
                    let qp = spline.orientation_patched(t, k, base * quat_exp(step))?;
                    let qm = spline.orientation_patched(t, k, base * quat_exp(-step))?;
                    let dr = (rot_residual(&qp, &q_meas) - rot_residual(&qm, &q_meas)) / (2.0 * h);
                    entries.push(3 * k + axis);
                    jac.push(dr);
                }
            }
            for axis in 0..3 {
                let row: Vec<(usize, f64)> = entries
                    .iter()
                    .zip(&jac)
                    .map(|(&e, d)| (e, d[axis]))
                    .collect();
                accumulate_row(&mut sys, &row, r[axis], 1.0);
            }
        }
        // Curvature regularization on relative rotations between knots.
        for k in 1..n - 1 {
            let r = rot_curvature(&spline, k);
            for kk in [k - 1, k, k + 1] {
                let base = spline.ctrl()[kk];
                for axis in 0..3 {
                    let mut step = Vector3::zeros();
                    step[axis] = h;
                    let mut sp = spline.clone();
                    sp.set_ctrl(kk, base * quat_exp(step));
                    let rp = rot_curvature(&sp, k);
                    sp.set_ctrl(kk, base * quat_exp(-step));
                    let rm = rot_curvature(&sp, k);
                    let dr = (rp - rm) / (2.0 * h);
                    for a2 in 0..3 {
                        accumulate_row(&mut sys, &[(3 * kk + axis, dr[a2])], r[a2], mu);
                    }
                }
            }
        }

        let delta = match sys.solve(lambda) {
            Ok(d) => d,
            Err(_) => {
                lambda *= 10.0;
                continue;
            }
        };
        let mut trial = spline.clone();
        for k in 0..n {
            let step = Vector3::new(delta[3 * k], delta[3 * k + 1], delta[3 * k + 2]);
            let q = trial.ctrl()[k];
            trial.set_ctrl(k, q * quat_exp(step));
        }
        trial.condition_signs();
        let new_cost = rot_fit_cost(&trial, poses)?;
        if new_cost < cost {
            let rel = (cost - new_cost) / cost.max(1e-300);
            spline = trial;
            cost = new_cost;
            lambda = (lambda / 10.0).max(1e-12);
            if rel < 1e-12 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e6 {
                break;
            }
        }
    }
    Ok(spline)
}

fn rot_residual(q_spline: &UnitQuaternion<f64>, q_meas: &UnitQuaternion<f64>) -> Vector3<f64> {
    quat_log(&(q_spline.inverse() * q_meas))
}

pub(crate) fn rot_curvature(spline: &SplineSO3, k: usize) -> Vector3<f64> {
    let c = spline.ctrl();
    quat_log(&(c[k].inverse() * c[k + 1])) - quat_log(&(c[k - 1].inverse() * c[k]))
}

fn rot_fit_cost(
    spline: &SplineSO3,
    poses: &[(f64, UnitQuaternion<f64>, Vector3<f64>)],
) -> Result<f64> {
    let mut cost = 0.0;
    for &(t, q, _) in poses {
        cost += rot_residual(&spline.orientation(t)?, &q).norm_squared();
    }
    for k in 1..spline.ctrl().len() - 1 {
        cost += CURVATURE_REG * rot_curvature(spline, k).norm_squared();
    }
    Ok(cost)
}
