//! Uniform cubic B-splines on R³ and SO(3).
//!
//! Position curves support both the matrix form and the equivalent
//! cumulative form; orientation curves use the cumulative form with unit
//! quaternion control points. All time derivatives are analytic.
//!
//! Quaternions are Hamilton `(w, x, y, z)`; `quat_exp` maps a rotation
//! vector (axis times angle, radians) to a unit quaternion and `quat_log`
//! is its inverse on the short arc.

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};

use crate::{CalibError, Result};

/// Uniform knot layout shared by the R³ and SO(3) splines.
///
/// `n` control points at spacing `dt` define `n - 3` cubic segments; the
/// valid evaluation interval is the half-open `[t0, t0 + (n-3)·dt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotGrid {
    t0: f64,
    dt: f64,
    n: usize,
}

impl KnotGrid {
    pub fn new(t0: f64, dt: f64, n: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(CalibError::InvalidConfig(format!(
                "knot spacing must be positive, got {dt}"
            )));
        }
        if n < 4 {
            return Err(CalibError::InvalidConfig(format!(
                "cubic spline needs at least 4 control points, got {n}"
            )));
        }
        Ok(Self { t0, dt, n })
    }

    /// Smallest grid starting at `t_begin` whose domain strictly contains
    /// `t_end`.
    pub fn covering(t_begin: f64, t_end: f64, dt: f64) -> Result<Self> {
        if t_end < t_begin {
            return Err(CalibError::InvalidInput(format!(
                "empty time span [{t_begin}, {t_end}]"
            )));
        }
        let n = ((t_end - t_begin) / dt).floor() as usize + 4;
        Self::new(t_begin, dt, n)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of control points.
    pub fn num_ctrl(&self) -> usize {
        self.n
    }

    pub fn num_segments(&self) -> usize {
        self.n - 3
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Half-open evaluation domain `[start, end)`.
    pub fn domain(&self) -> (f64, f64) {
        (self.t0, self.t0 + (self.n - 3) as f64 * self.dt)
    }

    pub fn contains(&self, t: f64) -> bool {
        let (start, end) = self.domain();
        t >= start && t < end
    }

    /// Maps `t` to its segment index and normalized coordinate `u ∈ [0, 1)`.
    pub fn segment(&self, t: f64) -> Result<(usize, f64)> {
        let (start, end) = self.domain();
        if !(t >= start && t < end) {
            return Err(CalibError::OutOfDomain { t, start, end });
        }
        let s = (t - self.t0) / self.dt;
        let mut i = s.floor() as usize;
        if i > self.n - 4 {
            i = self.n - 4;
        }
        Ok((i, s - i as f64))
    }
}

/// The constant blending matrices of the cubic uniform B-spline: `m4` for
/// the matrix form and `mtilde4` for the cumulative form. Every entry is a
/// multiple of 1/6. Rows index powers of `u`, columns index the four
/// control points of a segment.
#[derive(Debug, Clone, Copy)]
pub struct SplineMatrices {
    pub m4: Matrix4<f64>,
    pub mtilde4: Matrix4<f64>,
}

impl SplineMatrices {
    pub fn cubic() -> Self {
        let m4 = Matrix4::new(
            1.0, 4.0, 1.0, 0.0, //
            -3.0, 0.0, 3.0, 0.0, //
            3.0, -6.0, 3.0, 0.0, //
            -1.0, 3.0, -3.0, 1.0,
        ) / 6.0;
        let mtilde4 = Matrix4::new(
            6.0, 5.0, 1.0, 0.0, //
            0.0, 3.0, 3.0, 0.0, //
            0.0, -3.0, 3.0, 0.0, //
            0.0, 1.0, -2.0, 1.0,
        ) / 6.0;
        Self { m4, mtilde4 }
    }
}

// Blending weights uᵀM per control point j of a segment, with the u-power
// vector u = [1, u, u², u³]. Derivatives are taken in u; callers rescale by
// 1/dt per order.
fn basis(u: f64) -> [f64; 4] {
    let (u2, u3) = (u * u, u * u * u);
    [
        (1.0 - 3.0 * u + 3.0 * u2 - u3) / 6.0,
        (4.0 - 6.0 * u2 + 3.0 * u3) / 6.0,
        (1.0 + 3.0 * u + 3.0 * u2 - 3.0 * u3) / 6.0,
        u3 / 6.0,
    ]
}

fn basis_du(u: f64) -> [f64; 4] {
    let u2 = u * u;
    [
        (-3.0 + 6.0 * u - 3.0 * u2) / 6.0,
        (-12.0 * u + 9.0 * u2) / 6.0,
        (3.0 + 6.0 * u - 9.0 * u2) / 6.0,
        3.0 * u2 / 6.0,
    ]
}

fn basis_ddu(u: f64) -> [f64; 4] {
    [
        (6.0 - 6.0 * u) / 6.0,
        (-12.0 + 18.0 * u) / 6.0,
        (6.0 - 18.0 * u) / 6.0,
        6.0 * u / 6.0,
    ]
}

// The four weights of one segment sum to exactly 1 (order 0) and exactly 0
// (derivatives), so blending is evaluated anchored at the first control
// point: Σ wⱼ pⱼ = p₀ + Σⱼ≥₁ wⱼ (pⱼ − p₀). This keeps constant curves
// exactly constant and constant-curve derivatives exactly zero.
fn blend(w: [f64; 4], p: [&Vector3<f64>; 4], anchor_weight: f64) -> Vector3<f64> {
    anchor_weight * p[0] + w[1] * (p[1] - p[0]) + w[2] * (p[2] - p[0]) + w[3] * (p[3] - p[0])
}

// Cumulative weights uᵀM̃ for j = 1..3 (the j = 0 column is identically 1).
fn cum_basis(u: f64) -> [f64; 3] {
    let (u2, u3) = (u * u, u * u * u);
    [
        (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
        (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
        u3 / 6.0,
    ]
}

fn cum_basis_du(u: f64) -> [f64; 3] {
    let u2 = u * u;
    [
        (3.0 - 6.0 * u + 3.0 * u2) / 6.0,
        (3.0 + 6.0 * u - 6.0 * u2) / 6.0,
        3.0 * u2 / 6.0,
    ]
}

/// Rotation-vector exponential onto the unit quaternions. Below `1e-8` rad
/// a second-order Taylor branch avoids the `sin(θ/2)/θ` cancellation.
pub fn quat_exp(v: Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = v.norm();
    let (w, k) = if theta < 1e-8 {
        let t2 = theta * theta;
        (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
    } else {
        ((theta / 2.0).cos(), (theta / 2.0).sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::from_parts(w, v * k))
}

/// Inverse of [`quat_exp`] on the short arc (`‖result‖ < π`).
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.w;
    let mut vec = q.imag();
    if w < 0.0 {
        w = -w;
        vec = -vec;
    }
    let s = vec.norm();
    if s < 1e-8 {
        vec * (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
    } else {
        vec * (2.0 * s.atan2(w) / s)
    }
}

/// Cubic B-spline curve in R³.
#[derive(Debug, Clone)]
pub struct SplineR3 {
    grid: KnotGrid,
    ctrl: Vec<Vector3<f64>>,
}

impl SplineR3 {
    pub fn new(grid: KnotGrid, ctrl: Vec<Vector3<f64>>) -> Result<Self> {
        if ctrl.len() != grid.num_ctrl() {
            return Err(CalibError::InvalidInput(format!(
                "expected {} control points, got {}",
                grid.num_ctrl(),
                ctrl.len()
            )));
        }
        Ok(Self { grid, ctrl })
    }

    pub fn constant(grid: KnotGrid, p: Vector3<f64>) -> Self {
        let n = grid.num_ctrl();
        Self {
            grid,
            ctrl: vec![p; n],
        }
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn ctrl(&self) -> &[Vector3<f64>] {
        &self.ctrl
    }

    pub fn set_ctrl(&mut self, k: usize, p: Vector3<f64>) {
        self.ctrl[k] = p;
    }

    /// Matrix-form evaluation.
    pub fn position(&self, t: f64) -> Result<Vector3<f64>> {
        let (i, u) = self.grid.segment(t)?;
        Ok(blend(basis(u), self.seg_ctrl(i), 1.0))
    }

    fn seg_ctrl(&self, i: usize) -> [&Vector3<f64>; 4] {
        [
            &self.ctrl[i],
            &self.ctrl[i + 1],
            &self.ctrl[i + 2],
            &self.ctrl[i + 3],
        ]
    }

    /// Cumulative-form evaluation; agrees with [`Self::position`] to
    /// floating-point accuracy.
    pub fn position_cumulative(&self, t: f64) -> Result<Vector3<f64>> {
        let (i, u) = self.grid.segment(t)?;
        let w = cum_basis(u);
        let mut p = self.ctrl[i];
        for j in 1..=3 {
            p += w[j - 1] * (self.ctrl[i + j] - self.ctrl[i + j - 1]);
        }
        Ok(p)
    }

    pub fn velocity(&self, t: f64) -> Result<Vector3<f64>> {
        let (i, u) = self.grid.segment(t)?;
        Ok(blend(basis_du(u), self.seg_ctrl(i), 0.0) / self.grid.dt())
    }

    pub fn acceleration(&self, t: f64) -> Result<Vector3<f64>> {
        let (i, u) = self.grid.segment(t)?;
        let dt = self.grid.dt();
        Ok(blend(basis_ddu(u), self.seg_ctrl(i), 0.0) / (dt * dt))
    }

    /// Blending weights of the four control points of the segment holding
    /// `t`, for the given derivative order (0..=2), scaled to time units.
    pub fn weights(&self, t: f64, order: usize) -> Result<(usize, [f64; 4])> {
        let (i, u) = self.grid.segment(t)?;
        let s = 1.0 / self.grid.dt();
        let w = match order {
            0 => basis(u),
            1 => basis_du(u).map(|x| x * s),
            2 => basis_ddu(u).map(|x| x * s * s),
            _ => panic!("unsupported derivative order {order}"),
        };
        Ok((i, w))
    }
}

/// Cubic B-spline curve on SO(3) with unit-quaternion control points
/// (cumulative form).
#[derive(Debug, Clone)]
pub struct SplineSO3 {
    grid: KnotGrid,
    ctrl: Vec<UnitQuaternion<f64>>,
}

impl SplineSO3 {
    /// Builds the spline after flipping control-point signs so adjacent
    /// quaternions have non-negative dot products (keeps the relative
    /// rotations on the short arc).
    pub fn new(grid: KnotGrid, ctrl: Vec<UnitQuaternion<f64>>) -> Result<Self> {
        if ctrl.len() != grid.num_ctrl() {
            return Err(CalibError::InvalidInput(format!(
                "expected {} control points, got {}",
                grid.num_ctrl(),
                ctrl.len()
            )));
        }
        let mut spline = Self { grid, ctrl };
        spline.condition_signs();
        Ok(spline)
    }

    pub fn constant(grid: KnotGrid, q: UnitQuaternion<f64>) -> Self {
        let n = grid.num_ctrl();
        Self {
            grid,
            ctrl: vec![q; n],
        }
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn ctrl(&self) -> &[UnitQuaternion<f64>] {
        &self.ctrl
    }

    pub fn set_ctrl(&mut self, k: usize, q: UnitQuaternion<f64>) {
        self.ctrl[k] = q;
    }

    /// Re-establishes the adjacent-sign convention after control-point
    /// updates.
    pub fn condition_signs(&mut self) {
        for k in 1..self.ctrl.len() {
            if self.ctrl[k - 1].coords.dot(&self.ctrl[k].coords) < 0.0 {
                let q = self.ctrl[k].into_inner();
                self.ctrl[k] = UnitQuaternion::new_unchecked(-q);
            }
        }
    }

    pub fn orientation(&self, t: f64) -> Result<UnitQuaternion<f64>> {
        let (i, u) = self.grid.segment(t)?;
        Ok(so3_orientation(&|k| self.ctrl[k], i, u))
    }

    /// Body-frame angular velocity (the vee of `RᵀṘ`), rad/s.
    pub fn angular_velocity_body(&self, t: f64) -> Result<Vector3<f64>> {
        let (i, u) = self.grid.segment(t)?;
        Ok(so3_omega_body(&|k| self.ctrl[k], i, u, self.grid.dt()))
    }

    /// Orientation with control point `idx` substituted, without mutating
    /// the spline (finite-difference Jacobian helper).
    pub fn orientation_patched(
        &self,
        t: f64,
        idx: usize,
        q: UnitQuaternion<f64>,
    ) -> Result<UnitQuaternion<f64>> {
        let (i, u) = self.grid.segment(t)?;
        Ok(so3_orientation(
            &|k| if k == idx { q } else { self.ctrl[k] },
            i,
            u,
        ))
    }

    /// Angular velocity with control point `idx` substituted.
    pub fn angular_velocity_body_patched(
        &self,
        t: f64,
        idx: usize,
        q: UnitQuaternion<f64>,
    ) -> Result<Vector3<f64>> {
        let (i, u) = self.grid.segment(t)?;
        Ok(so3_omega_body(
            &|k| if k == idx { q } else { self.ctrl[k] },
            i,
            u,
            self.grid.dt(),
        ))
    }
}

fn so3_orientation(
    ctrl: &dyn Fn(usize) -> UnitQuaternion<f64>,
    i: usize,
    u: f64,
) -> UnitQuaternion<f64> {
    let w = cum_basis(u);
    let mut q = ctrl(i);
    for j in 1..=3 {
        let d = quat_log(&(ctrl(i + j - 1).inverse() * ctrl(i + j)));
        q *= quat_exp(w[j - 1] * d);
    }
    q
}

fn so3_omega_body(
    ctrl: &dyn Fn(usize) -> UnitQuaternion<f64>,
    i: usize,
    u: f64,
    dt: f64,
) -> Vector3<f64> {
    let w_du = cum_basis_du(u);
    let w = cum_basis(u);
    let mut d = [Vector3::zeros(); 3];
    let mut a = [UnitQuaternion::identity(); 3];
    for j in 0..3 {
        d[j] = quat_log(&(ctrl(i + j).inverse() * ctrl(i + j + 1)));
        a[j] = quat_exp(w[j] * d[j]);
    }
    // ω = λ̇₃ d₃ + λ̇₂ R(A₃)ᵀ d₂ + λ̇₁ R(A₂A₃)ᵀ d₁, each λ̇ scaled by 1/dt.
    let a3 = a[2];
    let a23 = a[1] * a[2];
    (w_du[2] * d[2] + w_du[1] * (a3.inverse() * d[1]) + w_du[0] * (a23.inverse() * d[0])) / dt
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn grid(n: usize) -> KnotGrid {
        KnotGrid::new(0.0, 0.1, n).unwrap()
    }

    fn random_r3(rng: &mut impl Rng, n: usize) -> SplineR3 {
        let ctrl = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        SplineR3::new(grid(n), ctrl).unwrap()
    }

    pub(crate) fn random_so3_ctrl(rng: &mut impl Rng, n: usize) -> Vec<UnitQuaternion<f64>> {
        let mut ctrl = vec![UnitQuaternion::from_scaled_axis(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ))];
        for _ in 1..n {
            let step = Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            );
            let prev = *ctrl.last().unwrap();
            ctrl.push(prev * UnitQuaternion::from_scaled_axis(step));
        }
        ctrl
    }

    #[test]
    fn matrices_have_exact_rational_entries() {
        let m = SplineMatrices::cubic();
        let m4_num = [
            [1.0, 4.0, 1.0, 0.0],
            [-3.0, 0.0, 3.0, 0.0],
            [3.0, -6.0, 3.0, 0.0],
            [-1.0, 3.0, -3.0, 1.0],
        ];
        let mt_num = [
            [6.0, 5.0, 1.0, 0.0],
            [0.0, 3.0, 3.0, 0.0],
            [0.0, -3.0, 3.0, 0.0],
            [0.0, 1.0, -2.0, 1.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.m4[(r, c)], m4_num[r][c] / 6.0);
                assert_eq!(m.mtilde4[(r, c)], mt_num[r][c] / 6.0);
            }
        }
        // The basis helpers must agree with the matrices.
        for &u in &[0.0, 0.3, 0.77, 0.999] {
            let uvec = nalgebra::Vector4::new(1.0, u, u * u, u * u * u);
            let b = basis(u);
            let cb = cum_basis(u);
            for j in 0..4 {
                assert_relative_eq!(
                    b[j],
                    uvec.dot(&m.m4.column(j).into_owned()),
                    epsilon = 1e-15
                );
            }
            for j in 1..4 {
                assert_relative_eq!(
                    cb[j - 1],
                    uvec.dot(&m.mtilde4.column(j).into_owned()),
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn constant_ctrl_is_partition_of_unity() {
        let s = SplineR3::constant(grid(6), Vector3::new(1.0, 2.0, 3.0));
        for &t in &[0.0, 0.05, 0.1, 0.25, 0.2999] {
            assert_eq!(s.position(t).unwrap(), Vector3::new(1.0, 2.0, 3.0));
        }
    }

    #[test]
    fn segment_start_weights() {
        // At u = 0 the blend is (p0 + 4 p1 + p2)/6.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let s = random_r3(&mut rng, 6);
        let p = s.position(0.0).unwrap();
        let expect = (s.ctrl()[0] + 4.0 * s.ctrl()[1] + s.ctrl()[2]) / 6.0;
        assert_relative_eq!(p, expect, epsilon = 1e-14);
    }

    #[test]
    fn matrix_and_cumulative_forms_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = random_r3(&mut rng, 9);
            let (lo, hi) = s.grid().domain();
            for _ in 0..100 {
                let t = rng.random_range(lo..hi);
                let a = s.position(t).unwrap();
                let b = s.position_cumulative(t).unwrap();
                assert!((a - b).amax() <= 1e-12, "t={t}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn out_of_domain_is_rejected_with_interval() {
        let s = random_r3(&mut ChaCha12Rng::seed_from_u64(3), 6);
        let (lo, hi) = s.grid().domain();
        for t in [lo - 1e-9, hi, hi + 5.0] {
            match s.position(t) {
                Err(CalibError::OutOfDomain { start, end, .. }) => {
                    assert_eq!((start, end), (lo, hi));
                }
                other => panic!("expected domain error, got {other:?}"),
            }
        }
        // The right endpoint is excluded, but points just below it work.
        assert!(s.position(hi - 1e-9).is_ok());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..10 {
            let s = random_r3(&mut rng, 10);
            let (lo, hi) = s.grid().domain();
            for _ in 0..20 {
                let t = rng.random_range(lo + 2.0 * h..hi - 2.0 * h);
                let v = s.velocity(t).unwrap();
                let a = s.acceleration(t).unwrap();
                let v_fd = (s.position(t + h).unwrap() - s.position(t - h).unwrap()) / (2.0 * h);
                let a_fd = (s.velocity(t + h).unwrap() - s.velocity(t - h).unwrap()) / (2.0 * h);
                assert!((v - v_fd).norm() <= 1e-6 * v.norm().max(1.0));
                assert!((a - a_fd).norm() <= 1e-6 * a.norm().max(1.0));
            }
        }
    }

    #[test]
    fn constant_ctrl_has_zero_derivatives() {
        let s = SplineR3::constant(grid(7), Vector3::new(-4.0, 0.5, 2.0));
        assert_eq!(s.velocity(0.17).unwrap(), Vector3::zeros());
        assert_eq!(s.acceleration(0.17).unwrap(), Vector3::zeros());
    }

    #[test]
    fn linear_ctrl_gives_unit_velocity() {
        // B-splines reproduce linear polynomials exactly.
        let g = KnotGrid::new(0.0, 1.0, 8).unwrap();
        let ctrl = (0..8).map(|j| Vector3::new(j as f64, 0.0, 0.0)).collect();
        let s = SplineR3::new(g, ctrl).unwrap();
        for &t in &[0.0, 1.3, 2.9, 4.999] {
            assert_relative_eq!(
                s.velocity(t).unwrap(),
                Vector3::new(1.0, 0.0, 0.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn quat_exp_log_closed_forms() {
        let q = quat_exp(Vector3::zeros());
        assert_eq!(q, UnitQuaternion::identity());

        let q = quat_exp(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_relative_eq!(q.w, (std::f64::consts::FRAC_PI_4).cos(), epsilon = 1e-15);
        assert_relative_eq!(q.k, (std::f64::consts::FRAC_PI_4).sin(), epsilon = 1e-15);

        let v = Vector3::new(0.6, -0.64, 0.48); // norm 1.0
        assert!((quat_log(&quat_exp(v)) - v).norm() <= 1e-12);
    }

    #[test]
    fn quat_exp_log_small_angle_branch() {
        for &scale in &[1e-12, 1e-9, 5e-9] {
            let v = Vector3::new(scale, -scale, 0.5 * scale);
            let rt = quat_log(&quat_exp(v));
            assert!((rt - v).norm() <= 1e-20 + 1e-12 * v.norm());
        }
    }

    #[test]
    fn orientation_constant_ctrl() {
        let q = UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.2, 0.9));
        let s = SplineSO3::constant(grid(6), q);
        let out = s.orientation(0.12).unwrap();
        assert!(out.angle_to(&q) <= 1e-12);

        let id = SplineSO3::constant(grid(6), UnitQuaternion::identity());
        assert!(
            id.orientation(0.2)
                .unwrap()
                .angle_to(&UnitQuaternion::identity())
                <= 1e-15
        );
        assert!(id.angular_velocity_body(0.2).unwrap().norm() <= 1e-15);
    }

    #[test]
    fn orientation_matches_independent_oracle() {
        // Oracle: the same cumulative product coded against nalgebra's own
        // scaled-axis exp/log instead of quat_exp/quat_log.
        fn oracle(ctrl: &[UnitQuaternion<f64>], i: usize, u: f64) -> UnitQuaternion<f64> {
            let w = cum_basis(u);
            let mut q = ctrl[i];
            for j in 1..=3 {
                let mut rel = (ctrl[i + j - 1].inverse() * ctrl[i + j]).into_inner();
                if rel.w < 0.0 {
                    rel = -rel;
                }
                let d = UnitQuaternion::new_unchecked(rel).scaled_axis();
                q *= UnitQuaternion::from_scaled_axis(w[j - 1] * d);
            }
            q
        }

        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let ctrl = random_so3_ctrl(&mut rng, 8);
            let s = SplineSO3::new(grid(8), ctrl.clone()).unwrap();
            let (lo, hi) = s.grid().domain();
            for _ in 0..25 {
                let t = rng.random_range(lo..hi);
                let (i, u) = s.grid().segment(t).unwrap();
                let got = s.orientation(t).unwrap();
                let want = oracle(s.ctrl(), i, u);
                assert!(got.angle_to(&want) <= 1e-10);
                assert!((got.norm() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn angular_velocity_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let h = 1e-5;
        for _ in 0..10 {
            let ctrl = random_so3_ctrl(&mut rng, 9);
            let s = SplineSO3::new(grid(9), ctrl).unwrap();
            let (lo, hi) = s.grid().domain();
            for _ in 0..20 {
                let t = rng.random_range(lo + 2.0 * h..hi - 2.0 * h);
                let w = s.angular_velocity_body(t).unwrap();
                // vee(RᵀṘ) with Ṙ from central differences.
                let r = s.orientation(t).unwrap().to_rotation_matrix();
                let rp = s.orientation(t + h).unwrap().to_rotation_matrix();
                let rm = s.orientation(t - h).unwrap().to_rotation_matrix();
                let rdot = (rp.matrix() - rm.matrix()) / (2.0 * h);
                let skew = r.matrix().transpose() * rdot;
                let w_fd = Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]);
                assert!((w - w_fd).norm() <= 1e-5, "{w:?} vs {w_fd:?}");
            }
        }
    }

    #[test]
    fn constant_rate_rotation_has_constant_body_rate() {
        let rate = 0.5;
        let g = KnotGrid::new(0.0, 0.1, 24).unwrap();
        let ctrl = (0..24)
            .map(|i| quat_exp(Vector3::new(0.0, 0.0, rate * g.knot_time(i))))
            .collect();
        let s = SplineSO3::new(g, ctrl).unwrap();
        for &t in &[0.5, 0.9, 1.3, 1.7] {
            let w = s.angular_velocity_body(t).unwrap();
            assert!((w - Vector3::new(0.0, 0.0, rate)).norm() <= 1e-3, "{w:?}");
        }
    }

    #[test]
    fn local_support_window() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let s = random_r3(&mut rng, 12);
        let k = 5;
        let mut s2 = s.clone();
        s2.set_ctrl(k, s.ctrl()[k] + Vector3::new(0.5, 0.0, 0.0));
        let (lo, hi) = s.grid().domain();
        let dt = s.grid().dt();
        let win_lo = s.grid().t0() + (k as f64 - 3.0) * dt;
        let win_hi = s.grid().t0() + (k as f64 + 1.0) * dt;
        for step in 0..400 {
            let t = lo + (hi - lo) * (step as f64 / 400.0);
            let delta = (s.position(t).unwrap() - s2.position(t).unwrap()).norm();
            let inside = t >= win_lo.max(lo) && t < win_hi.min(hi);
            if inside {
                // The weight can vanish at the window edge but not inside.
                continue;
            }
            assert!(
                delta <= 1e-15,
                "t={t} outside [{win_lo},{win_hi}) but moved {delta}"
            );
        }
    }
}
