use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use calib_bench::bench_trajectory;
use calib_core::linalg::{accumulate_row, ArrowSystem};
use calib_core::optimizer::{build_normal_equations, CalibState, LmOptions, NoiseConfig, Problem};
use calib_core::rot_init::ImuSample;
use calib_core::scan::LidarPoint;
use calib_core::surfel::{fit_plane_ransac, Correspondence, Plane, SurfelMap};
use calib_core::trajectory::Extrinsics;
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn spline_eval(c: &mut Criterion) {
    let traj = bench_trajectory(503, 0.02);
    let (lo, hi) = traj.grid().domain();
    let mut t = lo;
    c.bench_function("orientation_eval", |b| {
        b.iter(|| {
            t += 0.00371;
            if t >= hi {
                t = lo;
            }
            black_box(traj.rot().orientation(t).unwrap())
        })
    });
    c.bench_function("angular_velocity_eval", |b| {
        b.iter(|| {
            t += 0.00371;
            if t >= hi {
                t = lo;
            }
            black_box(traj.rot().angular_velocity_body(t).unwrap())
        })
    });
    c.bench_function("point_to_map", |b| {
        let ext = Extrinsics::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.1, 0.2, 0.3)),
            Vector3::new(0.1, -0.05, 0.15),
        );
        let p = Vector3::new(2.0, -1.0, 0.5);
        b.iter(|| {
            t += 0.00371;
            if t >= hi {
                t = lo;
            }
            black_box(traj.lidar_point_to_map(&ext, p, t, lo).unwrap())
        })
    });
}

fn normal_equations(c: &mut Criterion) {
    let traj = bench_trajectory(103, 0.02);
    let grid = *traj.grid();
    let (lo, hi) = grid.domain();
    let state = CalibState::new(
        Extrinsics::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.1, 0.2, 0.3)),
            Vector3::new(0.1, -0.05, 0.15),
        ),
        traj,
        Vector3::zeros(),
        Vector3::zeros(),
    );
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let plane = Plane::canonical(Vector3::new(0.0, 0.0, 1.0), 1.5);
    let corrs: Vec<Correspondence> = (0..2000)
        .map(|_| {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            Correspondence {
                point: LidarPoint {
                    t: rng.random_range(lo..hi),
                    pos: p,
                },
                surfel: 0,
                plane,
                map_point: p,
            }
        })
        .collect();
    let imu: Vec<ImuSample> = (0..)
        .map(|k| lo + k as f64 * 0.0025)
        .take_while(|&t| t < hi)
        .map(|t| ImuSample {
            t,
            gyro: state.traj.predict_gyro(t).unwrap(),
            accel: state.traj.predict_accel(t).unwrap(),
        })
        .collect();
    let problem = Problem::new(imu, corrs, NoiseConfig::default(), grid, lo).unwrap();
    let opts = LmOptions::default();
    c.bench_function("build_normal_equations_2800_rows", |b| {
        b.iter(|| black_box(build_normal_equations(&problem, &state, &opts).unwrap()))
    });
}

fn banded_solve(c: &mut Criterion) {
    let n_band = 3000;
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let mut sys = ArrowSystem::new(n_band, 23, 14);
    for i in 0..n_band {
        let width = 23.min(n_band - i - 1).max(1);
        let mut entries: Vec<(usize, f64)> = (i..i + width)
            .map(|j| (j, rng.random_range(-1.0..1.0)))
            .collect();
        entries.push((n_band + (i % 14), rng.random_range(-1.0..1.0)));
        accumulate_row(&mut sys, &entries, rng.random_range(-1.0..1.0), 1.0);
    }
    for i in 0..n_band + 14 {
        sys.add(i, i, 10.0);
    }
    c.bench_function("arrow_solve_3000", |b| {
        b.iter(|| black_box(sys.solve(1e-4).unwrap()))
    });
}

fn plane_fit(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let mut map = SurfelMap::new(0.5);
    for i in 0..120 {
        map.insert_point(
            i,
            Vector3::new(
                rng.random_range(0.0..0.5),
                rng.random_range(0.0..0.5),
                0.25 + rng.random_range(-0.01..0.01),
            ),
        );
    }
    let cell = map.cells().next().unwrap().clone();
    c.bench_function("ransac_plane_fit_120pts", |b| {
        b.iter(|| {
            let mut r = ChaCha12Rng::seed_from_u64(3);
            black_box(fit_plane_ransac(&cell, 0.02, 50, &mut r))
        })
    });
}

criterion_group!(
    benches,
    spline_eval,
    normal_equations,
    banded_solve,
    plane_fit
);
criterion_main!(benches);
