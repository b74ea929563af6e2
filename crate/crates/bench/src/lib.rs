//! Shared fixtures for the criterion benchmarks.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use calib_core::splines::{quat_exp, KnotGrid, SplineR3, SplineSO3};
use calib_core::trajectory::Trajectory;

pub fn bench_trajectory(n: usize, dt: f64) -> Trajectory {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let grid = KnotGrid::new(0.0, dt, n).unwrap();
    let mut rot = vec![UnitQuaternion::identity()];
    for _ in 1..n {
        let step = Vector3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        );
        let prev = *rot.last().unwrap();
        rot.push(prev * quat_exp(step));
    }
    let pos = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    Trajectory::new(
        SplineSO3::new(grid, rot).unwrap(),
        SplineR3::new(grid, pos).unwrap(),
        Vector3::new(0.0, 0.0, -9.81),
    )
    .unwrap()
}
