//! Shared generators for crate-internal tests.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;

use crate::splines::{KnotGrid, SplineR3, SplineSO3};
use crate::trajectory::{Trajectory, GRAVITY_MAGNITUDE};

pub(crate) fn random_quat(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::new(
        rng.random_range(-1.5..1.5),
        rng.random_range(-1.5..1.5),
        rng.random_range(-1.5..1.5),
    ))
}

/// Smooth random orientation control points (small adjacent steps).
pub(crate) fn random_so3_ctrl(rng: &mut impl Rng, n: usize) -> Vec<UnitQuaternion<f64>> {
    let mut ctrl = vec![random_quat(rng)];
    for _ in 1..n {
        let step = Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        let prev = *ctrl.last().unwrap();
        ctrl.push(prev * UnitQuaternion::from_scaled_axis(step));
    }
    ctrl
}

pub(crate) fn random_trajectory(rng: &mut impl Rng, n: usize, dt: f64) -> Trajectory {
    let grid = KnotGrid::new(0.0, dt, n).unwrap();
    let ctrl_q = random_so3_ctrl(rng, n);
    let ctrl_p = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    Trajectory::new(
        SplineSO3::new(grid, ctrl_q).unwrap(),
        SplineR3::new(grid, ctrl_p).unwrap(),
        Vector3::new(0.0, 0.0, -GRAVITY_MAGNITUDE),
    )
    .unwrap()
}
