//! Extrinsic rotation initialization.
//!
//! Fits an SO(3) spline to raw gyroscope samples, forms relative-rotation
//! pairs against LiDAR odometry at scan boundaries, and solves the
//! overdetermined hand-eye alignment by SVD of stacked quaternion-product
//! matrices. Extrinsic translation is left at zero here.

use nalgebra::{DMatrix, Matrix4, UnitQuaternion, Vector3, Vector4};

use crate::linalg::{accumulate_row, ArrowSystem};
use crate::splines::{quat_exp, KnotGrid, SplineSO3};
use crate::trajectory::{rot_curvature, CURVATURE_REG};
use crate::{CalibError, Result};

/// One raw IMU sample (time-ordered stream).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Raw gyroscope reading, rad/s.
    pub gyro: Vector3<f64>,
    /// Raw accelerometer reading, m/s².
    pub accel: Vector3<f64>,
}

/// A relative-rotation pair over one scan interval: the IMU rotation from
/// the fitted gyro spline and the LiDAR rotation from odometry, with its
/// outlier weight.
#[derive(Debug, Clone, Copy)]
pub struct RotPair {
    pub dq_imu: UnitQuaternion<f64>,
    pub dq_lidar: UnitQuaternion<f64>,
    pub weight: f64,
}

impl RotPair {
    /// Canonicalizes both rotations to non-negative real part and computes
    /// the heuristic outlier weight.
    pub fn new(dq_imu: UnitQuaternion<f64>, dq_lidar: UnitQuaternion<f64>, threshold: f64) -> Self {
        let dq_imu = canonicalize(dq_imu);
        let dq_lidar = canonicalize(dq_lidar);
        let weight = handeye_weight(&dq_imu, &dq_lidar, threshold);
        Self {
            dq_imu,
            dq_lidar,
            weight,
        }
    }
}

fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Fits an SO(3) spline to raw gyro measurements by minimizing
/// `Σ‖ω_m(t_k) − ω_spline(t_k)‖²`; the first control point is held at the
/// identity.
pub fn fit_gyro_spline(samples: &[ImuSample], grid: KnotGrid) -> Result<SplineSO3> {
    let n = grid.num_ctrl();
    let per_segment = samples.len() as f64 / grid.num_segments() as f64;
    if per_segment < 2.0 {
        return Err(CalibError::InsufficientData(format!(
            "gyro fit under-constrained: {:.2} samples per knot interval (need >= 2)",
            per_segment
        )));
    }
    for s in samples {
        if !grid.contains(s.t) {
            let (start, end) = grid.domain();
            return Err(CalibError::OutOfDomain { t: s.t, start, end });
        }
    }

    // Initialize by dead-reckoning the gyro stream, anchored at identity.
    let mut integrated: Vec<(f64, UnitQuaternion<f64>)> = Vec::with_capacity(samples.len());
    let mut q = UnitQuaternion::identity();
    integrated.push((samples[0].t, q));
    for w in samples.windows(2) {
        let dt = w[1].t - w[0].t;
        q *= quat_exp(w[0].gyro * dt);
        integrated.push((w[1].t, q));
    }
    let ctrl: Vec<UnitQuaternion<f64>> = (0..n)
        .map(|k| {
            let tk = grid.knot_time(k);
            let idx = integrated.partition_point(|&(t, _)| t < tk);
            integrated[idx.min(integrated.len() - 1)].1
        })
        .collect();
    let mut spline = SplineSO3::new(grid, ctrl)?;

    // Damped Gauss-Newton on the angular-velocity residuals with the first
    // control point eliminated from the parameter set.
    let dim = 3 * (n - 1);
    let param = |k: usize, axis: usize| 3 * (k - 1) + axis;
    let h = 1e-6;
    let mu = CURVATURE_REG.sqrt();
    let mut lambda = 1e-6;
    let mut cost = gyro_cost(&spline, samples)?;
    for _ in 0..25 {
        let mut sys = ArrowSystem::new(dim, 11, 0);
        for s in samples {
            let r = s.gyro - spline.angular_velocity_body(s.t)?;
            let (i, _) = spline.grid().segment(s.t)?;
            let mut entries = Vec::with_capacity(12);
            let mut jac = Vec::with_capacity(12);
            for j in 0..4 {
                let k = i + j;
                if k == 0 {
                    continue;
                }
                let base = spline.ctrl()[k];
                for axis in 0..3 {
                    let mut step = Vector3::zeros();
                    step[axis] = h;
                    let wp = spline.angular_velocity_body_patched(s.t, k, base * quat_exp(step))?;
                    let wm =
                        spline.angular_velocity_body_patched(s.t, k, base * quat_exp(-step))?;
                    // d residual = -d omega.
                    jac.push(-(wp - wm) / (2.0 * h));
                    entries.push(param(k, axis));
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

        // Curvature regularization keeps knots beyond the sampled span
        // smoothly extrapolated (and the normal equations positive
        // definite).
        for k in 1..n - 1 {
            let r = rot_curvature(&spline, k);
            for kk in [k - 1, k, k + 1] {
                if kk == 0 {
                    continue;
                }
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
                        accumulate_row(&mut sys, &[(param(kk, axis), dr[a2])], r[a2], mu);
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
        for k in 1..n {
            let step = Vector3::new(delta[param(k, 0)], delta[param(k, 1)], delta[param(k, 2)]);
            let qk = trial.ctrl()[k];
            trial.set_ctrl(k, qk * quat_exp(step));
        }
        trial.condition_signs();
        let new_cost = gyro_cost(&trial, samples)?;
        if new_cost < cost {
            let rel = (cost - new_cost) / cost.max(1e-300);
            spline = trial;
            cost = new_cost;
            lambda = (lambda / 10.0).max(1e-12);
            if rel < 1e-10 {
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

fn gyro_cost(spline: &SplineSO3, samples: &[ImuSample]) -> Result<f64> {
    let mut c = 0.0;
    for s in samples {
        c += (s.gyro - spline.angular_velocity_body(s.t)?).norm_squared();
    }
    for k in 1..spline.ctrl().len() - 1 {
        c += CURVATURE_REG * rot_curvature(spline, k).norm_squared();
    }
    Ok(c)
}

/// Relative rotation of the spline between two instants:
/// `q(t_a)⁻¹ ⊗ q(t_b)`.
pub fn relative_rotation(spline: &SplineSO3, t_a: f64, t_b: f64) -> Result<UnitQuaternion<f64>> {
    Ok(spline.orientation(t_a)?.inverse() * spline.orientation(t_b)?)
}

/// Heuristic outlier weight for one rotation pair: compares the rotation
/// angles of the two relative rotations and down-weights pairs whose
/// angle difference exceeds `threshold` radians. Inputs must be
/// canonicalized to non-negative real part.
pub fn handeye_weight(
    dq_imu: &UnitQuaternion<f64>,
    dq_lidar: &UnitQuaternion<f64>,
    threshold: f64,
) -> f64 {
    debug_assert!(threshold > 0.0);
    debug_assert!(dq_imu.w >= 0.0 && dq_lidar.w >= 0.0);
    let r = 2.0 * (dq_imu.w.clamp(-1.0, 1.0).acos() - dq_lidar.w.clamp(-1.0, 1.0).acos());
    let r = r.abs();
    if r < threshold {
        1.0
    } else {
        threshold / r
    }
}

/// Left quaternion-product matrix: `left_quat_matrix(p) · q = p ⊗ q` with
/// quaternions as `(w, x, y, z)` column vectors.
pub fn left_quat_matrix(p: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (p.w, p.i, p.j, p.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right quaternion-product matrix: `right_quat_matrix(q) · p = p ⊗ q`.
pub fn right_quat_matrix(q: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Solves the stacked hand-eye system for the LiDAR→IMU rotation: the
/// right singular vector of the smallest singular value of
/// `Q_N = [α_k([dq_imu]_L − [dq_lidar]_R); …]`.
///
/// Returns an observability error when the rotation axes of the pairs do
/// not span two independent directions (the null space is then more than
/// one-dimensional).
pub fn solve_handeye(pairs: &[RotPair]) -> Result<UnitQuaternion<f64>> {
    if pairs.len() < 2 {
        return Err(CalibError::InsufficientData(format!(
            "hand-eye alignment needs at least 2 rotation pairs, got {}",
            pairs.len()
        )));
    }
    let mut q_n = DMatrix::<f64>::zeros(4 * pairs.len(), 4);
    for (k, pair) in pairs.iter().enumerate() {
        let block =
            (left_quat_matrix(&pair.dq_imu) - right_quat_matrix(&pair.dq_lidar)) * pair.weight;
        q_n.view_mut((4 * k, 0), (4, 4)).copy_from(&block);
    }
    let svd = q_n.svd(true, true);
    let sv = &svd.singular_values;
    // Singular values come out in descending order; the solution lives in
    // the last right singular vector.
    let smallest = sv[3];
    let second = sv[2];
    if second < 10.0 * smallest + 1e-12 {
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let null2 = v_t.row(2);
        return Err(CalibError::Observability(format!(
            "hand-eye rotation under-determined: rotation axes span fewer than two \
             independent directions (singular values {:.3e}, {:.3e}; spurious null \
             direction [{:.3}, {:.3}, {:.3}, {:.3}])",
            second, smallest, null2[0], null2[1], null2[2], null2[3]
        )));
    }
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let row = v_t.row(3);
    let mut v = Vector4::new(row[0], row[1], row[2], row[3]);
    if v[0] < 0.0 {
        v = -v;
    }
    v.normalize_mut();
    Ok(UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
        v[0], v[1], v[2], v[3],
    )))
}
