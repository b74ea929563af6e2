//! Dataset round trips, validation failures, and exit codes through the
//! command layer.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use calib_core::io::{self, ToolConfig};
use calib_core::sim::{self, SinusoidParams};

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("calib_cli_{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn short_config() -> ToolConfig {
    let mut cfg = ToolConfig::default();
    cfg.sim.trajectory = SinusoidParams {
        duration: 4.0,
        ..Default::default()
    };
    cfg.calib.iterations = 3;
    cfg
}

#[test]
fn simulate_then_ingest_round_trip() {
    let dir = tmp_dir("roundtrip");
    let cfg = short_config();
    calib_cli::cmd_simulate(&cfg, &dir, 5).unwrap();

    // Expected row count: duration * rate.
    let data = sim::simulate_dataset(&cfg.sim, 5).unwrap();
    assert_eq!(data.imu.len(), (4.0 * cfg.sim.imu.rate_hz) as usize);

    let dataset = io::read_dataset(&dir.join("manifest.json")).unwrap();
    assert_eq!(dataset.imu.len(), data.imu.len());
    assert_eq!(dataset.scans.len(), data.scans.len());
    // IMU CSV is exact; scan coordinates round-trip at the binary format's
    // f32 width.
    for (a, b) in data.imu.iter().zip(&dataset.imu) {
        assert_eq!(a, b);
    }
    for (a, b) in data.scans[3].points.iter().zip(&dataset.scans[3].points) {
        assert_eq!(a.t, b.t);
        assert_eq!(a.pos.x as f32, b.pos.x as f32);
        assert_eq!((a.pos.x as f32) as f64, b.pos.x);
    }
    assert!(dataset.truth_extrinsics.is_some());
    assert_eq!(
        dataset.truth_scan_poses.as_ref().map(|p| p.len()),
        Some(data.scans.len())
    );
}

#[test]
fn calibrate_report_is_byte_identical_across_runs() {
    let dir = tmp_dir("determinism");
    let cfg = short_config();
    calib_cli::cmd_simulate(&cfg, &dir, 11).unwrap();
    let manifest = dir.join("manifest.json");
    calib_cli::cmd_calibrate(&manifest, &cfg, &dir.join("r1.json")).unwrap();
    calib_cli::cmd_calibrate(&manifest, &cfg, &dir.join("r2.json")).unwrap();
    let a = fs::read(dir.join("r1.json")).unwrap();
    let b = fs::read(dir.join("r2.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupt_imu_row_names_file_and_line() {
    let dir = tmp_dir("corrupt");
    let cfg = short_config();
    calib_cli::cmd_simulate(&cfg, &dir, 3).unwrap();
    // Damage one row.
    let imu_path = dir.join("imu.csv");
    let mut content = fs::read_to_string(&imu_path).unwrap();
    let lines: Vec<&str> = content.lines().collect();
    let damaged = lines
        .iter()
        .enumerate()
        .map(|(i, l)| if i == 5 { "0.01,bogus,0,0,0,0,0" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    content = damaged;
    fs::write(&imu_path, content).unwrap();

    let err = calib_cli::cmd_calibrate(&dir.join("manifest.json"), &cfg, &dir.join("r.json"))
        .unwrap_err();
    match &err {
        calib_core::CalibError::Parse { path, line, .. } => {
            assert!(path.ends_with("imu.csv"));
            assert_eq!(*line, 6);
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    assert_eq!(calib_cli::exit_code_for(&err), 2);
}

#[test]
fn unwritable_output_path_errors() {
    let dir = tmp_dir("unwritable");
    let blocker = dir.join("blocker");
    fs::write(&blocker, b"file, not a directory").unwrap();
    let out = blocker.join("nested");
    let err = calib_cli::cmd_simulate(&short_config(), &out, 1).unwrap_err();
    assert_eq!(calib_cli::exit_code_for(&err), 2);
}

#[test]
fn montecarlo_single_trial_reports_sd_not_applicable() {
    let dir = tmp_dir("mc1");
    let cfg = short_config();
    let stats = calib_cli::cmd_montecarlo(&cfg, 1, &dir, 9).unwrap();
    assert_eq!(stats.trials, 1);
    assert!(stats.rot_err_deg.sd.is_none());
    let json = fs::read_to_string(dir.join("stats.json")).unwrap();
    assert!(json.contains("\"sd\": null"));
}

#[test]
fn montecarlo_convergence_csv_row_count() {
    let dir = tmp_dir("mc2");
    let cfg = short_config();
    let stats = calib_cli::cmd_montecarlo(&cfg, 2, &dir, 4).unwrap();
    assert!(stats.failures.is_empty());
    let csv = fs::read_to_string(dir.join("convergence.csv")).unwrap();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 2 * cfg.calib.iterations);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_lidar-imu-calib");

    // Validation failure: manifest does not exist.
    let out = Command::new(bin)
        .args(["calibrate", "/nonexistent/manifest.json"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Numerical/observability failure: stationary dataset.
    let dir = tmp_dir("exit3");
    let mut cfg = short_config();
    cfg.sim.trajectory.pos_amp = [0.0; 3];
    cfg.sim.trajectory.rot_amp = [0.0; 3];
    calib_cli::cmd_simulate(&cfg, &dir, 2).unwrap();
    let cfg_path = dir.join("cfg.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = Command::new(bin)
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "calibrate",
            dir.join("manifest.json").to_str().unwrap(),
            "--report",
            dir.join("r.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("excitation"), "stderr: {stderr}");
}
