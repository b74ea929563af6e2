//! End-to-end pipeline tests on simulated data.

use calib_core::odometry::{IcpOdometry, IcpParams, OracleOdometry};
use calib_core::pipeline::{self, CalibConfig};
use calib_core::sim::{self, SimConfig, SinusoidParams};

fn noiseless_sim() -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.lidar.range_noise = 0.0;
    cfg.imu.sigma_accel = 0.0;
    cfg.imu.sigma_gyro = 0.0;
    cfg.odometry_noise = (0.0, 0.0);
    cfg
}

fn oracle_for(data: &sim::SimulatedDataset, noise: (f64, f64), seed: u64) -> OracleOdometry {
    let times: Vec<f64> = data.scans.iter().map(|s| s.ref_time).collect();
    OracleOdometry::from_trajectory(
        &data.truth_trajectory,
        &data.truth_extrinsics,
        &times,
        noise.0,
        noise.1,
        seed,
    )
    .unwrap()
}

#[test]
fn noiseless_pipeline_converges() {
    let data = sim::simulate_dataset(&noiseless_sim(), 42).unwrap();
    let mut odom = oracle_for(&data, (0.0, 0.0), 7);
    let config = CalibConfig {
        seed: 9,
        ..Default::default()
    };
    let mut report = pipeline::calibrate(&data.imu, &data.scans, &config, &mut odom).unwrap();
    report.set_truth(data.truth_extrinsics);
    let truth = report.truth.as_ref().unwrap();

    // Hand-eye alignment on noiseless pairs is essentially exact.
    let he: calib_core::Extrinsics = report.handeye_rotation.into();
    assert!(
        he.rot.angle_to(&data.truth_extrinsics.rot).to_degrees() < 1e-3,
        "hand-eye error {}",
        he.rot.angle_to(&data.truth_extrinsics.rot).to_degrees()
    );

    // Iterative refinement reaches the architecture's accuracy floor.
    assert!(
        truth.rot_err_deg < 0.05,
        "rotation error {} deg",
        truth.rot_err_deg
    );
    assert!(
        truth.trans_err_m < 0.005,
        "translation error {} m",
        truth.trans_err_m
    );

    // The error after the second round improves on the first.
    let per_iter = &truth.per_iteration;
    assert!(per_iter[1].0 < per_iter[0].0);
    assert!(per_iter[1].1 < per_iter[0].1);

    // Report shape invariant: one entry per configured round.
    assert_eq!(report.iterations.len(), config.iterations);

    // Estimated biases stay near zero on unbiased data.
    let ba = nalgebra::Vector3::from(report.bias_acc).norm();
    let bg = nalgebra::Vector3::from(report.bias_gyro).norm();
    assert!(ba < 0.02, "accel bias {ba}");
    assert!(bg < 0.001, "gyro bias {bg}");
}

#[test]
fn noisy_trial_within_coarse_envelope() {
    let sim_cfg = SimConfig::default();
    let calib = CalibConfig::default();
    let (report, rot_err, trans_err) = sim::run_trial(&sim_cfg, &calib, 20260810).unwrap();
    assert!(rot_err < 0.2, "rotation error {rot_err} deg");
    assert!(trans_err < 0.02, "translation error {trans_err} m");
    assert_eq!(report.iterations.len(), calib.iterations);
    // Plateau behaviour: the estimate stops moving long before round 8.
    let errs = report.iteration_errors();
    let d_rot = (errs[7].0 - errs[3].0).abs();
    let d_trans = (errs[7].1 - errs[3].1).abs();
    assert!(d_rot < 0.05, "rot change between rounds 4 and 8: {d_rot}");
    assert!(
        d_trans < 1e-3,
        "trans change between rounds 4 and 8: {d_trans}"
    );
}

#[test]
fn calibrate_is_deterministic() {
    let mut sim_cfg = SimConfig::default();
    sim_cfg.trajectory = SinusoidParams {
        duration: 5.0,
        ..Default::default()
    };
    let data = sim::simulate_dataset(&sim_cfg, 3).unwrap();
    let config = CalibConfig {
        seed: 77,
        iterations: 3,
        ..Default::default()
    };
    let mut odom1 = oracle_for(&data, (0.2f64.to_radians(), 0.01), 5);
    let r1 = pipeline::calibrate(&data.imu, &data.scans, &config, &mut odom1).unwrap();
    let mut odom2 = oracle_for(&data, (0.2f64.to_radians(), 0.01), 5);
    let r2 = pipeline::calibrate(&data.imu, &data.scans, &config, &mut odom2).unwrap();
    let j1 = serde_json::to_string(&r1).unwrap();
    let j2 = serde_json::to_string(&r2).unwrap();
    assert_eq!(j1, j2);
}

#[test]
fn icp_odometry_pipeline_smoke() {
    // Gentler, shorter motion and denser scans so incremental scan-to-map
    // ICP stays locked without any oracle.
    let mut sim_cfg = noiseless_sim();
    sim_cfg.trajectory = SinusoidParams {
        duration: 4.0,
        pos_amp: [0.10, 0.10, 0.06],
        pos_freq_hz: [0.30, 0.35, 0.40],
        rot_amp: [0.15, 0.15, 0.15],
        rot_freq_hz: [0.25, 0.20, 0.30],
        ..Default::default()
    };
    sim_cfg.lidar.azimuth_steps = 720;
    let data = sim::simulate_dataset(&sim_cfg, 8).unwrap();
    let mut odom = IcpOdometry::new(IcpParams {
        cell_size: 1.0,
        ..Default::default()
    });
    let config = CalibConfig {
        seed: 4,
        odometry: pipeline::OdometryKind::Icp,
        downsample_ratio: 0.3,
        iterations: 8,
        handeye_stride: 10,
        ..Default::default()
    };
    let mut report = pipeline::calibrate(&data.imu, &data.scans, &config, &mut odom).unwrap();
    report.set_truth(data.truth_extrinsics);
    let truth = report.truth.as_ref().unwrap();
    for (i, (r, t)) in truth.per_iteration.iter().enumerate() {
        eprintln!("icp iter {}: rot {:.4} deg trans {:.4} m", i + 1, r, t);
    }
    // Raw-scan ICP odometry is the weak link: rotation initializes well,
    // but with this gentle excitation (needed to keep raw-scan ICP locked)
    // the extrinsic translation is only loosely observable.
    assert!(
        truth.rot_err_deg < 1.0,
        "rotation error {} deg",
        truth.rot_err_deg
    );
    assert!(
        truth.trans_err_m < 0.15,
        "translation error {} m",
        truth.trans_err_m
    );
}
