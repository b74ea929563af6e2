//! Batch calibration problem and Levenberg-Marquardt solver.
//!
//! The state couples the extrinsics, both spline control-point sets, the
//! IMU biases, and a fixed-magnitude gravity direction. Residuals are the
//! whitened accelerometer/gyroscope prediction errors and the point-to-
//! surfel distances. Spline locality keeps the normal equations banded;
//! the extrinsics, biases, gravity, and the map-anchor segment form a
//! dense border eliminated by a Schur complement.
//!
//! Jacobians are analytic where they are simple (biases, extrinsic
//! translation, everything that is linear in position control points) and
//! central finite differences elsewhere; tests cross-check both against a
//! full finite-difference Jacobian.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{accumulate_row, ArrowSystem};
use crate::rot_init::ImuSample;
use crate::splines::{quat_exp, KnotGrid};
use crate::surfel::Correspondence;
use crate::trajectory::{Extrinsics, Trajectory, GRAVITY_MAGNITUDE};
use crate::{CalibError, Result};

/// Isotropic per-axis measurement noise (1σ).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Accelerometer noise, m/s².
    pub sigma_accel: f64,
    /// Gyroscope noise, rad/s.
    pub sigma_gyro: f64,
    /// Point-to-plane noise, meters.
    pub sigma_lidar: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_accel: 0.02,
            sigma_gyro: 0.005,
            sigma_lidar: 0.01,
        }
    }
}

impl NoiseConfig {
    fn validate(&self) -> Result<()> {
        if self.sigma_accel <= 0.0 || self.sigma_gyro <= 0.0 || self.sigma_lidar <= 0.0 {
            return Err(CalibError::InvalidConfig(
                "noise sigmas must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Gravity vector of fixed magnitude from its two-angle chart
/// `g(θ) = 9.81 · Rx(θ₁) Ry(θ₂) (0,0,−1)`.
pub fn gravity_from_dof(dof: &Vector2<f64>) -> Vector3<f64> {
    let (s1, c1) = dof[0].sin_cos();
    let (s2, c2) = dof[1].sin_cos();
    GRAVITY_MAGNITUDE * Vector3::new(-s2, s1 * c2, -c1 * c2)
}

/// Chart angles of a gravity direction (valid away from the ±x pole).
pub fn dof_from_gravity(g: &Vector3<f64>) -> Vector2<f64> {
    let gn = g.normalize();
    let th2 = (-gn.x).clamp(-1.0, 1.0).asin();
    let th1 = gn.y.atan2(-gn.z);
    Vector2::new(th1, th2)
}

/// The full calibration state.
#[derive(Debug, Clone)]
pub struct CalibState {
    pub ext: Extrinsics,
    pub traj: Trajectory,
    pub bias_acc: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    /// Two-angle gravity direction; `traj.gravity` is kept in sync at the
    /// fixed 9.81 m/s² magnitude.
    pub gravity_dof: Vector2<f64>,
}

impl CalibState {
    pub fn new(
        ext: Extrinsics,
        mut traj: Trajectory,
        bias_acc: Vector3<f64>,
        bias_gyro: Vector3<f64>,
    ) -> Self {
        let gravity_dof = dof_from_gravity(&traj.gravity);
        traj.gravity = gravity_from_dof(&gravity_dof);
        Self {
            ext,
            traj,
            bias_acc,
            bias_gyro,
            gravity_dof,
        }
    }

    pub fn set_gravity_dof(&mut self, dof: Vector2<f64>) {
        self.gravity_dof = dof;
        self.traj.gravity = gravity_from_dof(&dof);
    }
}

/// All measurements of one batch optimization.
#[derive(Debug, Clone)]
pub struct Problem {
    pub imu: Vec<ImuSample>,
    pub correspondences: Vec<Correspondence>,
    pub noise: NoiseConfig,
    pub grid: KnotGrid,
    /// Timestamp anchoring the map frame (the first scan's reference
    /// time); the point-to-surfel residual chains through the trajectory
    /// pose at this instant.
    pub map_anchor_time: f64,
}

impl Problem {
    pub fn new(
        imu: Vec<ImuSample>,
        correspondences: Vec<Correspondence>,
        noise: NoiseConfig,
        grid: KnotGrid,
        map_anchor_time: f64,
    ) -> Result<Self> {
        noise.validate()?;
        let (start, end) = grid.domain();
        let check = |t: f64| -> Result<()> {
            if !grid.contains(t) {
                return Err(CalibError::OutOfDomain { t, start, end });
            }
            Ok(())
        };
        check(map_anchor_time)?;
        for s in &imu {
            check(s.t)?;
        }
        for c in &correspondences {
            check(c.point.t)?;
        }
        Ok(Self {
            imu,
            correspondences,
            noise,
            grid,
            map_anchor_time,
        })
    }
}

/// Accelerometer residual `a_m − â(t) − b_a`.
pub fn residual_accel(state: &CalibState, sample: &ImuSample) -> Result<Vector3<f64>> {
    Ok(sample.accel - state.traj.predict_accel(sample.t)? - state.bias_acc)
}

/// Gyroscope residual `ω_m − ω̂(t) − b_g`.
pub fn residual_gyro(state: &CalibState, sample: &ImuSample) -> Result<Vector3<f64>> {
    Ok(sample.gyro - state.traj.predict_gyro(sample.t)? - state.bias_gyro)
}

/// Point-to-surfel residual `[pᵀ 1]·π` after mapping the point into the
/// map frame with the current state.
pub fn residual_lidar(state: &CalibState, corr: &Correspondence, anchor: f64) -> Result<f64> {
    let p = state
        .traj
        .lidar_point_to_map(&state.ext, corr.point.pos, corr.point.t, anchor)?;
    Ok(corr.plane.distance(&p))
}

/// Levenberg-Marquardt options.
#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iters: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Relative cost-change convergence threshold.
    pub tol: f64,
    /// Huber loss scale for LiDAR residuals, meters; `None` disables.
    pub huber_delta: Option<f64>,
    /// Freeze the gravity direction when false.
    pub estimate_gravity: bool,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            lambda0: 1e-4,
            lambda_up: 10.0,
            lambda_down: 10.0,
            tol: 1e-8,
            huber_delta: None,
            estimate_gravity: true,
        }
    }
}

/// One accepted LM step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmIteration {
    pub cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
    /// Extrinsic rotation estimate, `(w, x, y, z)`.
    pub ext_q: [f64; 4],
    /// Extrinsic translation estimate, meters.
    pub ext_p: [f64; 3],
}

/// Convergence report of one LM run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<LmIteration>,
    pub rejected_steps: usize,
    pub converged: bool,
}

/// Parameter layout: spline knots interleaved (3 rotation + 3 position DOF
/// per knot) in the band block; the map-anchor segment's knots, the
/// extrinsics, the biases, and gravity in the dense border. The first knot
/// is fixed (gauge).
#[derive(Debug, Clone)]
pub struct Layout {
    /// Base global index of each knot's 6-DOF block (`None` = gauge-fixed).
    knot_base: Vec<Option<usize>>,
    n_band: usize,
    n_border: usize,
    ext_rot: usize,
    ext_pos: usize,
    bias_gyro: usize,
    bias_acc: usize,
    gravity: Option<usize>,
}

/// Half-bandwidth of the band block: a residual touches at most four
/// consecutive knots of 6 DOF each.
const HBW: usize = 23;

impl Layout {
    pub fn new(grid: &KnotGrid, anchor: f64, estimate_gravity: bool) -> Result<Self> {
        let (anchor_seg, _) = grid.segment(anchor)?;
        let _ = &anchor_seg;
        let n = grid.num_ctrl();
        let in_anchor = |k: usize| k >= anchor_seg && k < anchor_seg + 4;

        let mut knot_base = vec![None; n];
        let mut next = 0usize;
        for (k, base) in knot_base.iter_mut().enumerate() {
            if k == 0 || in_anchor(k) {
                continue;
            }
            *base = Some(next);
            next += 6;
        }
        let n_band = next;
        for (k, base) in knot_base.iter_mut().enumerate() {
            if k != 0 && in_anchor(k) {
                *base = Some(next);
                next += 6;
            }
        }
        let ext_rot = next;
        let ext_pos = next + 3;
        let bias_gyro = next + 6;
        let bias_acc = next + 9;
        let gravity = estimate_gravity.then_some(next + 12);
        let total = next + if estimate_gravity { 14 } else { 12 };
        Ok(Self {
            knot_base,
            n_band,
            n_border: total - n_band,
            ext_rot,
            ext_pos,
            bias_gyro,
            bias_acc,
            gravity,
        })
    }

    pub fn dim(&self) -> usize {
        self.n_band + self.n_border
    }

    pub fn n_band(&self) -> usize {
        self.n_band
    }

    pub fn n_border(&self) -> usize {
        self.n_border
    }

    fn rot_param(&self, knot: usize, axis: usize) -> Option<usize> {
        self.knot_base[knot].map(|b| b + axis)
    }

    fn pos_param(&self, knot: usize, axis: usize) -> Option<usize> {
        self.knot_base[knot].map(|b| b + 3 + axis)
    }

    /// Global index of a named parameter (`None` for the gauge-fixed
    /// first knot or a frozen gravity).
    pub fn index_of(&self, p: Param) -> Option<usize> {
        match p {
            Param::RotCtrl(k, a) => self.rot_param(k, a),
            Param::PosCtrl(k, a) => self.pos_param(k, a),
            Param::ExtRot(a) => Some(self.ext_rot + a),
            Param::ExtPos(a) => Some(self.ext_pos + a),
            Param::BiasGyro(a) => Some(self.bias_gyro + a),
            Param::BiasAcc(a) => Some(self.bias_acc + a),
            Param::Gravity(a) => self.gravity.map(|g| g + a),
        }
    }

    /// Human-readable name of a global parameter index (observability
    /// diagnostics).
    pub fn describe(&self, idx: usize) -> String {
        if idx >= self.ext_rot && idx < self.ext_rot + 3 {
            return format!("extrinsic rotation axis {}", idx - self.ext_rot);
        }
        if idx >= self.ext_pos && idx < self.ext_pos + 3 {
            return format!("extrinsic translation axis {}", idx - self.ext_pos);
        }
        if idx >= self.bias_gyro && idx < self.bias_gyro + 3 {
            return format!("gyro bias axis {}", idx - self.bias_gyro);
        }
        if idx >= self.bias_acc && idx < self.bias_acc + 3 {
            return format!("accel bias axis {}", idx - self.bias_acc);
        }
        if let Some(g) = self.gravity {
            if idx >= g && idx < g + 2 {
                return format!("gravity angle {}", idx - g);
            }
        }
        for (k, base) in self.knot_base.iter().enumerate() {
            if let Some(b) = *base {
                if idx >= b && idx < b + 6 {
                    let local = idx - b;
                    return if local < 3 {
                        format!("rotation control point {k} axis {local}")
                    } else {
                        format!("position control point {k} axis {}", local - 3)
                    };
                }
            }
        }
        format!("parameter {idx}")
    }
}

/// A named optimization parameter (axis index 0..3, or 0..2 for gravity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    RotCtrl(usize, usize),
    PosCtrl(usize, usize),
    ExtRot(usize),
    ExtPos(usize),
    BiasGyro(usize),
    BiasAcc(usize),
    Gravity(usize),
}

/// One whitened scalar residual row with its sparse Jacobian.
#[derive(Debug, Clone)]
pub struct ResidualRow {
    pub entries: Vec<(usize, f64)>,
    pub residual: f64,
    pub weight: f64,
}

const FD_STEP: f64 = 1e-6;

/// Computes all residual rows (whitened residuals plus sparse Jacobians)
/// at the given state. Row order is deterministic: gyro and accel rows per
/// IMU sample, then one row per correspondence.
pub fn residual_rows(
    problem: &Problem,
    state: &CalibState,
    opts: &LmOptions,
) -> Result<Vec<ResidualRow>> {
    let layout = Layout::new(
        &problem.grid,
        problem.map_anchor_time,
        opts.estimate_gravity,
    )?;
    residual_rows_with(problem, state, opts, &layout)
}

fn residual_rows_with(
    problem: &Problem,
    state: &CalibState,
    opts: &LmOptions,
    layout: &Layout,
) -> Result<Vec<ResidualRow>> {
    let anchor = AnchorContext::new(problem, state, layout)?;

    let imu_rows: Vec<Result<Vec<ResidualRow>>> = problem
        .imu
        .par_iter()
        .map(|s| imu_sample_rows(problem, state, layout, opts, s))
        .collect();
    let lidar_rows: Vec<Result<ResidualRow>> = problem
        .correspondences
        .par_iter()
        .map(|c| lidar_row(problem, state, layout, opts, &anchor, c))
        .collect();

    let mut rows = Vec::with_capacity(6 * problem.imu.len() + problem.correspondences.len());
    for r in imu_rows {
        rows.extend(r?);
    }
    for r in lidar_rows {
        rows.push(r?);
    }
    Ok(rows)
}

fn imu_sample_rows(
    problem: &Problem,
    state: &CalibState,
    layout: &Layout,
    opts: &LmOptions,
    sample: &ImuSample,
) -> Result<Vec<ResidualRow>> {
    let rot = state.traj.rot();
    let (seg, _) = problem.grid.segment(sample.t)?;

    // Gyro rows: rotation control points (FD) and gyro bias (analytic −I).
    let r_gyro = residual_gyro(state, sample)?;
    let mut gyro_entries: Vec<(usize, Vector3<f64>)> = Vec::with_capacity(13);
    for j in 0..4 {
        let k = seg + j;
        let base = rot.ctrl()[k];
        for axis in 0..3 {
            let Some(idx) = layout.rot_param(k, axis) else {
                continue;
            };
            let mut step = Vector3::zeros();
            step[axis] = FD_STEP;
            let wp = rot.angular_velocity_body_patched(sample.t, k, base * quat_exp(step))?;
            let wm = rot.angular_velocity_body_patched(sample.t, k, base * quat_exp(-step))?;
            gyro_entries.push((idx, -(wp - wm) / (2.0 * FD_STEP)));
        }
    }
    for axis in 0..3 {
        gyro_entries.push((
            layout.bias_gyro + axis,
            -Vector3::ith_axis(axis).into_inner(),
        ));
    }

    // Accel rows: rotation (FD), position (analytic, linear), accel bias
    // (analytic −I), gravity chart (FD on the chart only).
    let r_accel = residual_accel(state, sample)?;
    let q_t = rot.orientation(sample.t)?;
    let acc_min_g = state.traj.pos().acceleration(sample.t)? - state.traj.gravity;
    let mut accel_entries: Vec<(usize, Vector3<f64>)> = Vec::with_capacity(28);
    for j in 0..4 {
        let k = seg + j;
        let base = rot.ctrl()[k];
        for axis in 0..3 {
            let Some(idx) = layout.rot_param(k, axis) else {
                continue;
            };
            let mut step = Vector3::zeros();
            step[axis] = FD_STEP;
            let qp = rot.orientation_patched(sample.t, k, base * quat_exp(step))?;
            let qm = rot.orientation_patched(sample.t, k, base * quat_exp(-step))?;
            let d = (qp.inverse() * acc_min_g - qm.inverse() * acc_min_g) / (2.0 * FD_STEP);
            accel_entries.push((idx, -d));
        }
    }
    let (_, w2) = state.traj.pos().weights(sample.t, 2)?;
    let rt: Matrix3<f64> = q_t.inverse().to_rotation_matrix().into_inner();
    for j in 0..4 {
        let k = seg + j;
        for axis in 0..3 {
            let Some(idx) = layout.pos_param(k, axis) else {
                continue;
            };
            // ∂r/∂c = −w·Rᵀ, one column per axis.
            accel_entries.push((idx, -w2[j] * rt.column(axis).into_owned()));
        }
    }
    for axis in 0..3 {
        accel_entries.push((
            layout.bias_acc + axis,
            -Vector3::ith_axis(axis).into_inner(),
        ));
    }
    if let Some(g0) = layout.gravity {
        for d in 0..2 {
            let mut dp = state.gravity_dof;
            dp[d] += FD_STEP;
            let mut dm = state.gravity_dof;
            dm[d] -= FD_STEP;
            let dg = (gravity_from_dof(&dp) - gravity_from_dof(&dm)) / (2.0 * FD_STEP);
            accel_entries.push((g0 + d, q_t.inverse() * dg));
        }
    }

    let _ = opts;
    let mut rows = Vec::with_capacity(6);
    for axis in 0..3 {
        rows.push(ResidualRow {
            entries: gyro_entries.iter().map(|(i, v)| (*i, v[axis])).collect(),
            residual: r_gyro[axis],
            weight: 1.0 / problem.noise.sigma_gyro,
        });
    }
    for axis in 0..3 {
        rows.push(ResidualRow {
            entries: accel_entries.iter().map(|(i, v)| (*i, v[axis])).collect(),
            residual: r_accel[axis],
            weight: 1.0 / problem.noise.sigma_accel,
        });
    }
    Ok(rows)
}

/// Pose and finite-difference snapshots at the map anchor time, shared by
/// every LiDAR row of one linearization.
struct AnchorContext {
    seg: usize,
    q0: UnitQuaternion<f64>,
    p0: Vector3<f64>,
    /// Position blending weights at the anchor time.
    w0: [f64; 4],
    /// Anchor orientation with knot (local j, axis) stepped ±h.
    q0_pert: Vec<[UnitQuaternion<f64>; 2]>,
}

impl AnchorContext {
    fn new(problem: &Problem, state: &CalibState, _layout: &Layout) -> Result<Self> {
        let t0 = problem.map_anchor_time;
        let rot = state.traj.rot();
        let (seg, _) = problem.grid.segment(t0)?;
        let (q0, p0) = state.traj.pose(t0)?;
        let (_, w0) = state.traj.pos().weights(t0, 0)?;
        let mut q0_pert = Vec::with_capacity(12);
        for j in 0..4 {
            let k = seg + j;
            let base = rot.ctrl()[k];
            for axis in 0..3 {
                let mut step = Vector3::zeros();
                step[axis] = FD_STEP;
                let qp = rot.orientation_patched(t0, k, base * quat_exp(step))?;
                let qm = rot.orientation_patched(t0, k, base * quat_exp(-step))?;
                q0_pert.push([qp, qm]);
            }
        }
        Ok(Self {
            seg,
            q0,
            p0,
            w0,
            q0_pert,
        })
    }
}

/// Rigid part of the map-frame transform (all poses resolved).
fn chain_to_map(
    ext_rot: &UnitQuaternion<f64>,
    ext_pos: &Vector3<f64>,
    qj: &UnitQuaternion<f64>,
    pj: &Vector3<f64>,
    q0: &UnitQuaternion<f64>,
    p0: &Vector3<f64>,
    p: &Vector3<f64>,
) -> Vector3<f64> {
    let p_imu = ext_rot * p + ext_pos;
    let p_ref = qj * p_imu + pj;
    let p_imu0 = q0.inverse() * (p_ref - p0);
    ext_rot.inverse() * (p_imu0 - ext_pos)
}

fn lidar_row(
    problem: &Problem,
    state: &CalibState,
    layout: &Layout,
    opts: &LmOptions,
    anchor: &AnchorContext,
    corr: &Correspondence,
) -> Result<ResidualRow> {
    let rot = state.traj.rot();
    let tj = corr.point.t;
    let (seg_j, _) = problem.grid.segment(tj)?;
    let (qj, pj) = state.traj.pose(tj)?;
    let (_, wj) = state.traj.pos().weights(tj, 0)?;
    let n = corr.plane.normal;
    let p = corr.point.pos;
    let er = state.ext.rot;
    let ep = state.ext.trans;

    let value = |ext_rot: &UnitQuaternion<f64>,
                 qj: &UnitQuaternion<f64>,
                 q0: &UnitQuaternion<f64>|
     -> f64 {
        corr.plane
            .distance(&chain_to_map(ext_rot, &ep, qj, &pj, q0, &anchor.p0, &p))
    };
    let r = value(&er, &qj, &anchor.q0);

    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(40);

    // Position control points (analytic): the residual is linear in the
    // pose positions with row vector nᵀ R_extᵀ R₀ᵀ, i.e. gradient
    // R₀ R_ext n.
    let drow = anchor.q0 * (er * n);
    // Net weight per knot: +w(t_j) − w(t_0) where supports overlap.
    let mut pos_coeff: Vec<(usize, f64)> = Vec::with_capacity(8);
    for j in 0..4 {
        pos_coeff.push((seg_j + j, wj[j]));
    }
    for j in 0..4 {
        let k = anchor.seg + j;
        if let Some(e) = pos_coeff.iter_mut().find(|(kk, _)| *kk == k) {
            e.1 -= anchor.w0[j];
        } else {
            pos_coeff.push((k, -anchor.w0[j]));
        }
    }
    for (k, c) in pos_coeff {
        if c == 0.0 {
            continue;
        }
        for axis in 0..3 {
            if let Some(idx) = layout.pos_param(k, axis) {
                entries.push((idx, c * drow[axis]));
            }
        }
    }

    // Rotation control points: finite differences. A knot may influence the
    // pose at t_j, at the anchor, or both.
    let anchor_local = |k: usize| -> Option<usize> {
        (k >= anchor.seg && k < anchor.seg + 4).then(|| k - anchor.seg)
    };
    let mut seen: Vec<usize> = Vec::with_capacity(8);
    for k in (seg_j..seg_j + 4).chain(anchor.seg..anchor.seg + 4) {
        if seen.contains(&k) {
            continue;
        }
        seen.push(k);
        let in_j = k >= seg_j && k < seg_j + 4;
        let a_local = anchor_local(k);
        for axis in 0..3 {
            let Some(idx) = layout.rot_param(k, axis) else {
                continue;
            };
            let mut step = Vector3::zeros();
            step[axis] = FD_STEP;
            let base = rot.ctrl()[k];
            let (qj_p, qj_m) = if in_j {
                (
                    rot.orientation_patched(tj, k, base * quat_exp(step))?,
                    rot.orientation_patched(tj, k, base * quat_exp(-step))?,
                )
            } else {
                (qj, qj)
            };
            let (q0_p, q0_m) = match a_local {
                Some(j) => {
                    let pert = &anchor.q0_pert[3 * j + axis];
                    (pert[0], pert[1])
                }
                None => (anchor.q0, anchor.q0),
            };
            let d = (value(&er, &qj_p, &q0_p) - value(&er, &qj_m, &q0_m)) / (2.0 * FD_STEP);
            entries.push((idx, d));
        }
    }

    // Extrinsic rotation: finite differences (appears in four places).
    for axis in 0..3 {
        let mut step = Vector3::zeros();
        step[axis] = FD_STEP;
        let d = (value(&(er * quat_exp(step)), &qj, &anchor.q0)
            - value(&(er * quat_exp(-step)), &qj, &anchor.q0))
            / (2.0 * FD_STEP);
        entries.push((layout.ext_rot + axis, d));
    }

    // Extrinsic translation (analytic): ∂p_map/∂p_ext = R_extᵀ(R₀ᵀR_j − I).
    let m: Matrix3<f64> = er.inverse().to_rotation_matrix().into_inner()
        * ((anchor.q0.inverse() * qj).to_rotation_matrix().into_inner() - Matrix3::identity());
    let dext = m.transpose() * n;
    for axis in 0..3 {
        entries.push((layout.ext_pos + axis, dext[axis]));
    }

    let mut weight = 1.0 / problem.noise.sigma_lidar;
    if let Some(delta) = opts.huber_delta {
        let a = r.abs();
        if a > delta {
            weight *= (delta / a).sqrt();
        }
    }
    Ok(ResidualRow {
        entries,
        residual: r,
        weight,
    })
}

/// Assembles the banded-plus-border normal equations `JᵀWJ δ = −JᵀWr`
/// from the residual rows. Returns the system and the total cost.
pub fn build_normal_equations(
    problem: &Problem,
    state: &CalibState,
    opts: &LmOptions,
) -> Result<(ArrowSystem, Layout, f64)> {
    let layout = Layout::new(
        &problem.grid,
        problem.map_anchor_time,
        opts.estimate_gravity,
    )?;
    let rows = residual_rows_with(problem, state, opts, &layout)?;
    let mut sys = ArrowSystem::new(layout.n_band(), HBW, layout.n_border());
    let mut cost = 0.0;
    for row in &rows {
        accumulate_row(&mut sys, &row.entries, row.residual, row.weight);
        let wr = row.weight * row.residual;
        cost += wr * wr;
    }
    Ok((sys, layout, cost))
}

/// Total weighted cost at a state (Huber-aware for LiDAR rows).
pub fn total_cost(problem: &Problem, state: &CalibState, opts: &LmOptions) -> Result<f64> {
    let mut cost = 0.0;
    let wg = 1.0 / problem.noise.sigma_gyro;
    let wa = 1.0 / problem.noise.sigma_accel;
    for s in &problem.imu {
        cost += (residual_gyro(state, s)? * wg).norm_squared();
        cost += (residual_accel(state, s)? * wa).norm_squared();
    }
    let wl = 1.0 / problem.noise.sigma_lidar;
    let lidar: Vec<Result<f64>> = problem
        .correspondences
        .par_chunks(4096)
        .map(|chunk| {
            let mut c = 0.0;
            for corr in chunk {
                let r = residual_lidar(state, corr, problem.map_anchor_time)? * wl;
                c += match opts.huber_delta {
                    Some(delta) => {
                        let d = delta * wl;
                        if r.abs() <= d {
                            r * r
                        } else {
                            d * (2.0 * r.abs() - d)
                        }
                    }
                    None => r * r,
                };
            }
            Ok(c)
        })
        .collect();
    for c in lidar {
        cost += c?;
    }
    Ok(cost)
}

fn apply_step(state: &CalibState, layout: &Layout, delta: &[f64], opts: &LmOptions) -> CalibState {
    let mut out = state.clone();
    let n = state.traj.grid().num_ctrl();
    for k in 0..n {
        let Some(base) = layout.knot_base[k] else {
            continue;
        };
        let dr = Vector3::new(delta[base], delta[base + 1], delta[base + 2]);
        let dp = Vector3::new(delta[base + 3], delta[base + 4], delta[base + 5]);
        let q = out.traj.rot().ctrl()[k];
        out.traj.rot_mut().set_ctrl(
            k,
            UnitQuaternion::new_normalize((q * quat_exp(dr)).into_inner()),
        );
        let c = out.traj.pos().ctrl()[k];
        out.traj.pos_mut().set_ctrl(k, c + dp);
    }
    out.traj.rot_mut().condition_signs();

    let dr = Vector3::new(
        delta[layout.ext_rot],
        delta[layout.ext_rot + 1],
        delta[layout.ext_rot + 2],
    );
    out.ext.rot = UnitQuaternion::new_normalize((out.ext.rot * quat_exp(dr)).into_inner());
    out.ext.trans += Vector3::new(
        delta[layout.ext_pos],
        delta[layout.ext_pos + 1],
        delta[layout.ext_pos + 2],
    );
    out.bias_gyro += Vector3::new(
        delta[layout.bias_gyro],
        delta[layout.bias_gyro + 1],
        delta[layout.bias_gyro + 2],
    );
    out.bias_acc += Vector3::new(
        delta[layout.bias_acc],
        delta[layout.bias_acc + 1],
        delta[layout.bias_acc + 2],
    );
    if let Some(g) = layout.gravity {
        let dof = out.gravity_dof + Vector2::new(delta[g], delta[g + 1]);
        out.set_gravity_dof(dof);
    }
    let _ = opts;
    out
}

/// Minimizes the batch objective by Levenberg-Marquardt. The cost is
/// monotone non-increasing over accepted steps; rank deficiencies surface
/// as observability errors naming the unconstrained parameters.
pub fn solve_lm(
    problem: &Problem,
    init: CalibState,
    opts: &LmOptions,
) -> Result<(CalibState, LmReport)> {
    let mut state = init;
    let mut cost = total_cost(problem, &state, opts)?;
    if !cost.is_finite() {
        return Err(CalibError::Diverged("initial cost is not finite".into()));
    }
    let mut report = LmReport {
        initial_cost: cost,
        final_cost: cost,
        iterations: Vec::new(),
        rejected_steps: 0,
        converged: false,
    };
    let mut lambda = opts.lambda0;

    for _ in 0..opts.max_iters {
        let (sys, layout, _) = build_normal_equations(problem, &state, opts)?;

        // Structurally unconstrained parameters have (near-)zero diagonal.
        let mut max_diag = 0.0f64;
        for i in 0..layout.dim() {
            max_diag = max_diag.max(sys.diag(i));
        }
        let dead: Vec<String> = (0..layout.dim())
            .filter(|&i| sys.diag(i) <= 1e-12 * max_diag.max(1e-300))
            .map(|i| layout.describe(i))
            .collect();
        if !dead.is_empty() {
            return Err(CalibError::Observability(format!(
                "unconstrained parameters (insufficient motion excitation?): {}",
                dead.join(", ")
            )));
        }

        let mut accepted = false;
        while lambda <= 1e10 {
            let delta = match sys.solve(lambda) {
                Ok(d) => d,
                Err(e) => {
                    return Err(CalibError::Observability(format!(
                        "normal equations not positive definite near {}",
                        layout.describe(e.index)
                    )));
                }
            };
            let candidate = apply_step(&state, &layout, &delta, opts);
            let new_cost = total_cost(problem, &candidate, opts)?;
            if new_cost.is_finite() && new_cost <= cost {
                let step_norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                let rel = (cost - new_cost) / cost.max(1e-300);
                state = candidate;
                cost = new_cost;
                report.iterations.push(LmIteration {
                    cost,
                    lambda,
                    step_norm,
                    ext_q: [
                        state.ext.rot.w,
                        state.ext.rot.i,
                        state.ext.rot.j,
                        state.ext.rot.k,
                    ],
                    ext_p: [state.ext.trans.x, state.ext.trans.y, state.ext.trans.z],
                });
                lambda = (lambda / opts.lambda_down).max(1e-12);
                accepted = true;
                if rel < opts.tol || step_norm < 1e-12 {
                    report.converged = true;
                }
                break;
            }
            report.rejected_steps += 1;
            lambda *= opts.lambda_up;
        }
        if !accepted {
            // Damping exhausted without an acceptable step.
            report.converged = true;
            break;
        }
        if report.converged {
            break;
        }
    }
    report.final_cost = cost;
    Ok((state, report))
}
