//! Command implementations behind the `lidar-imu-calib` binary.
//!
//! Kept as a library so integration tests drive the exact code paths the
//! binary runs.

use std::fs;
use std::io::Write;
use std::path::Path;

use calib_core::io::{self, Dataset, ToolConfig};
use calib_core::odometry::{IcpOdometry, IcpParams, OracleOdometry, ScanPose};
use calib_core::pipeline::{self, CalibReport, OdometryKind};
use calib_core::sim::{self, MonteCarloStats, Stats};
use calib_core::{CalibError, Result};

/// Process exit code for an error: 2 for invalid inputs/configuration, 3
/// for numerical or observability failures.
pub fn exit_code_for(err: &CalibError) -> i32 {
    if err.is_validation() {
        2
    } else {
        3
    }
}

/// Simulates a dataset and writes it in the toolkit's on-disk layout:
/// `imu.csv`, `scans/scan_*.bin(+json)`, ground-truth files, and
/// `manifest.json`.
pub fn cmd_simulate(config: &ToolConfig, out: &Path, seed: u64) -> Result<()> {
    let data = sim::simulate_dataset(&config.sim, seed)?;
    fs::create_dir_all(out)?;
    let scan_dir = out.join("scans");
    fs::create_dir_all(&scan_dir)?;
    let truth_dir = out.join("truth");
    fs::create_dir_all(&truth_dir)?;

    io::write_imu_csv(&out.join("imu.csv"), &data.imu)?;
    for (k, scan) in data.scans.iter().enumerate() {
        io::write_scan(&scan_dir, k, scan)?;
    }

    // Ground truth: extrinsics, per-scan LiDAR poses (first-scan frame),
    // and IMU poses in the world frame at 100 Hz.
    io::write_extrinsics_json(&truth_dir.join("extrinsics.json"), &data.truth_extrinsics)?;
    let scan_times: Vec<f64> = data.scans.iter().map(|s| s.ref_time).collect();
    let scan_poses = calib_core::odometry::exact_lidar_poses(
        &data.truth_trajectory,
        &data.truth_extrinsics,
        &scan_times,
    )?;
    io::write_scan_poses_csv(&truth_dir.join("scan_poses.csv"), &scan_poses)?;
    let (lo, hi) = data.truth_trajectory.grid().domain();
    let imu_poses: Vec<ScanPose> = (0..)
        .map(|k| lo + k as f64 * 0.01)
        .take_while(|&t| t < hi)
        .map(|t| {
            let (rot, trans) = data.truth_trajectory.pose(t)?;
            Ok(ScanPose { t, rot, trans })
        })
        .collect::<Result<_>>()?;
    io::write_scan_poses_csv(&truth_dir.join("imu_poses.csv"), &imu_poses)?;

    let manifest = io::DatasetManifest {
        imu_file: "imu.csv".into(),
        scan_directory: "scans".into(),
        time_unit: "seconds".into(),
        imu_rate_hz: Some(config.sim.imu.rate_hz),
        lidar_rate_hz: Some(config.sim.lidar.rate_hz),
        noise: Some(config.calib.noise),
        truth: Some(io::TruthPaths {
            extrinsics: "truth/extrinsics.json".into(),
            scan_poses: "truth/scan_poses.csv".into(),
            imu_poses: "truth/imu_poses.csv".into(),
        }),
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    println!(
        "wrote {} IMU samples and {} scans ({} points) to {}",
        data.imu.len(),
        data.scans.len(),
        data.scans.iter().map(|s| s.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

/// Runs calibration on a dataset directory; writes the JSON report (byte
/// stable across reruns) plus a human-readable text summary next to it.
pub fn cmd_calibrate(
    manifest_path: &Path,
    config: &ToolConfig,
    report_path: &Path,
) -> Result<CalibReport> {
    let dataset = io::read_dataset(manifest_path)?;
    let mut report = run_calibration(&dataset, config)?;
    if let Some(truth) = dataset.truth_extrinsics {
        report.set_truth(truth);
    }

    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    let summary = render_summary(&report);
    fs::write(report_path.with_extension("txt"), &summary)?;
    print!("{summary}");
    Ok(report)
}

fn run_calibration(dataset: &Dataset, config: &ToolConfig) -> Result<CalibReport> {
    let calib = &config.calib;
    match calib.odometry {
        OdometryKind::Oracle => {
            let poses = dataset.truth_scan_poses.clone().ok_or_else(|| {
                CalibError::InvalidConfig(
                    "oracle odometry needs ground-truth scan poses in the dataset \
                     (simulated datasets only); use --odometry icp for recorded data"
                        .into(),
                )
            })?;
            if poses.len() != dataset.scans.len() {
                return Err(CalibError::InvalidInput(format!(
                    "{} truth scan poses for {} scans",
                    poses.len(),
                    dataset.scans.len()
                )));
            }
            let mut odom = OracleOdometry::from_poses(
                poses,
                calib.oracle_noise.0.to_radians(),
                calib.oracle_noise.1,
                calib.seed.wrapping_add(0x0d0),
            );
            pipeline::calibrate(&dataset.imu, &dataset.scans, calib, &mut odom)
        }
        OdometryKind::Icp => {
            let mut odom = IcpOdometry::new(IcpParams {
                cell_size: calib.cell_size.max(0.5),
                seed: calib.seed,
                ..Default::default()
            });
            pipeline::calibrate(&dataset.imu, &dataset.scans, calib, &mut odom)
        }
    }
}

/// Plain-text result block: extrinsics as quaternion, Euler angles
/// (degrees) and meters, biases, gravity, and the truth comparison when
/// available.
pub fn render_summary(report: &CalibReport) -> String {
    let mut s = String::new();
    let e = &report
        .iterations
        .last()
        .expect("report has at least one iteration")
        .extrinsics;
    let euler = report.iterations.last().unwrap().euler_deg;
    s.push_str("LiDAR-IMU extrinsic calibration result\n");
    s.push_str("--------------------------------------\n");
    s.push_str(&format!(
        "rotation  q (w,x,y,z): {:+.6} {:+.6} {:+.6} {:+.6}\n",
        e.qw, e.qx, e.qy, e.qz
    ));
    s.push_str(&format!(
        "rotation  roll/pitch/yaw: {:+.4} {:+.4} {:+.4} deg\n",
        euler[0], euler[1], euler[2]
    ));
    s.push_str(&format!(
        "translation x/y/z: {:+.5} {:+.5} {:+.5} m\n",
        e.px, e.py, e.pz
    ));
    s.push_str(&format!(
        "gyro bias: [{:+.6}, {:+.6}, {:+.6}] rad/s\n",
        report.bias_gyro[0], report.bias_gyro[1], report.bias_gyro[2]
    ));
    s.push_str(&format!(
        "accel bias: [{:+.5}, {:+.5}, {:+.5}] m/s^2\n",
        report.bias_acc[0], report.bias_acc[1], report.bias_acc[2]
    ));
    s.push_str(&format!(
        "gravity: [{:+.5}, {:+.5}, {:+.5}] m/s^2\n",
        report.gravity[0], report.gravity[1], report.gravity[2]
    ));
    s.push_str(&format!(
        "refinement rounds: {} (stabilized at {})\n",
        report.iterations.len(),
        report
            .stabilized_at
            .map(|k| k.to_string())
            .unwrap_or_else(|| "-".into())
    ));
    if let Some(truth) = &report.truth {
        s.push_str("truth comparison:\n");
        s.push_str(&format!(
            "  rotation error: {:.5} deg\n  translation error: {:.5} m\n",
            truth.rot_err_deg, truth.trans_err_m
        ));
    }
    s
}

/// Monte Carlo evaluation: aggregate statistics JSON plus a per-iteration
/// convergence CSV (`trial,iteration,rot_err_deg,trans_err_m`).
pub fn cmd_montecarlo(
    config: &ToolConfig,
    trials: usize,
    out: &Path,
    seed: u64,
) -> Result<MonteCarloStats> {
    let stats = if trials == 1 {
        // Single trial: same path, standard deviation not applicable.
        let (report, rot, trans) =
            sim::run_trial(&config.sim, &config.calib, sim::trial_seed(seed, 0))?;
        MonteCarloStats {
            trials: 1,
            rot_err_deg: Stats {
                mean: rot,
                sd: None,
                per_trial: vec![rot],
            },
            trans_err_m: Stats {
                mean: trans,
                sd: None,
                per_trial: vec![trans],
            },
            failures: Vec::new(),
            per_iteration_errors: vec![report.iteration_errors()],
            reports: vec![report],
            trial_wall_s: Vec::new(),
        }
    } else {
        sim::monte_carlo(trials, &config.sim, &config.calib, seed)?
    };

    fs::create_dir_all(out)?;
    fs::write(
        out.join("stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;

    let mut csv = Vec::new();
    writeln!(csv, "# trial,iteration,rot_err_deg,trans_err_m")?;
    for (trial, iters) in stats.per_iteration_errors.iter().enumerate() {
        for (i, (rot, trans)) in iters.iter().enumerate() {
            writeln!(csv, "{},{},{},{}", trial, i + 1, rot, trans)?;
        }
    }
    fs::write(out.join("convergence.csv"), csv)?;

    let fmt_sd = |sd: Option<f64>| {
        sd.map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "n/a".into())
    };
    println!(
        "{} trials: rotation error {:.6} +/- {} deg, translation error {:.6} +/- {} m ({} failures)",
        stats.trials,
        stats.rot_err_deg.mean,
        fmt_sd(stats.rot_err_deg.sd),
        stats.trans_err_m.mean,
        fmt_sd(stats.trans_err_m.sd),
        stats.failures.len()
    );
    Ok(stats)
}
