//! Dataset and configuration file formats.
//!
//! - IMU: CSV `t,wx,wy,wz,ax,ay,az`, seconds and SI units, `#` comments.
//! - Scans: one binary file per revolution with little-endian records
//!   `(t: f64, x: f32, y: f32, z: f32)` plus a JSON sidecar carrying the
//!   scan reference time and record count; a CSV fallback with the same
//!   columns exists for debugging.
//! - Poses: CSV `t,qw,qx,qy,qz,px,py,pz` (Hamilton quaternions).
//! - Manifest and configuration: JSON.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::odometry::ScanPose;
use crate::pipeline::CalibConfig;
use crate::rot_init::ImuSample;
use crate::scan::{LidarPoint, Scan};
use crate::sim::SimConfig;
use crate::trajectory::Extrinsics;
use crate::{CalibError, Result};

/// Serializable extrinsics: quaternion `(w, x, y, z)` plus translation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExtrinsicsParam {
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl From<Extrinsics> for ExtrinsicsParam {
    fn from(e: Extrinsics) -> Self {
        Self {
            qw: e.rot.w,
            qx: e.rot.i,
            qy: e.rot.j,
            qz: e.rot.k,
            px: e.trans.x,
            py: e.trans.y,
            pz: e.trans.z,
        }
    }
}

impl From<ExtrinsicsParam> for Extrinsics {
    fn from(p: ExtrinsicsParam) -> Self {
        Extrinsics::new(
            UnitQuaternion::new_normalize(Quaternion::new(p.qw, p.qx, p.qy, p.qz)),
            Vector3::new(p.px, p.py, p.pz),
        )
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CalibError {
    CalibError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Writes the IMU stream; full `f64` precision survives the round trip.
pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# t,wx,wy,wz,ax,ay,az (seconds, rad/s, m/s^2)")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )?;
    }
    Ok(())
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 7 comma-separated fields, got {}", fields.len()),
            ));
        }
        let mut v = [0.0f64; 7];
        for (k, f_str) in fields.iter().enumerate() {
            v[k] = f_str
                .trim()
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("field {}: {e}", k + 1)))?;
        }
        out.push(ImuSample {
            t: v[0],
            gyro: Vector3::new(v[1], v[2], v[3]),
            accel: Vector3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanSidecar {
    ref_time: f64,
    count: usize,
}

fn scan_stem(index: usize) -> String {
    format!("scan_{index:05}")
}

/// Writes one scan as binary records plus its JSON sidecar.
pub fn write_scan(dir: &Path, index: usize, scan: &Scan) -> Result<()> {
    let stem = scan_stem(index);
    let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.bin")))?);
    for p in &scan.points {
        w.write_f64::<LittleEndian>(p.t)?;
        w.write_f32::<LittleEndian>(p.pos.x as f32)?;
        w.write_f32::<LittleEndian>(p.pos.y as f32)?;
        w.write_f32::<LittleEndian>(p.pos.z as f32)?;
    }
    w.flush()?;
    let sidecar = ScanSidecar {
        ref_time: scan.ref_time,
        count: scan.points.len(),
    };
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Debugging fallback: the same scan as CSV.
pub fn write_scan_csv(dir: &Path, index: usize, scan: &Scan) -> Result<()> {
    let stem = scan_stem(index);
    let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?);
    writeln!(w, "# t,x,y,z")?;
    for p in &scan.points {
        writeln!(w, "{},{},{},{}", p.t, p.pos.x, p.pos.y, p.pos.z)?;
    }
    Ok(())
}

fn read_scan_binary(path: &Path, ref_time: f64, count: usize) -> Result<Scan> {
    let mut r = BufReader::new(File::open(path)?);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let t = r.read_f64::<LittleEndian>()?;
        let x = r.read_f32::<LittleEndian>()? as f64;
        let y = r.read_f32::<LittleEndian>()? as f64;
        let z = r.read_f32::<LittleEndian>()? as f64;
        points.push(LidarPoint {
            t,
            pos: Vector3::new(x, y, z),
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CalibError::InvalidInput(format!(
            "{}: {} trailing bytes after {count} records",
            path.display(),
            rest.len()
        )));
    }
    Ok(Scan::new(ref_time, points))
}

fn read_scan_csv(path: &Path, ref_time: f64) -> Result<Scan> {
    let f = File::open(path)?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, i + 1, "expected t,x,y,z"));
        }
        let mut v = [0.0f64; 4];
        for (k, s) in fields.iter().enumerate() {
            v[k] = s
                .trim()
                .parse()
                .map_err(|e| parse_err(path, i + 1, format!("field {}: {e}", k + 1)))?;
        }
        points.push(LidarPoint {
            t: v[0],
            pos: Vector3::new(v[1], v[2], v[3]),
        });
    }
    Ok(Scan::new(ref_time, points))
}

/// Reads all scans in a directory (every `scan_*.json` sidecar, sorted by
/// name; binary preferred, CSV fallback).
pub fn read_scans(dir: &Path) -> Result<Vec<Scan>> {
    let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.starts_with("scan_"))
        })
        .collect();
    sidecars.sort();
    if sidecars.is_empty() {
        return Err(CalibError::InvalidInput(format!(
            "no scan sidecars (scan_*.json) in {}",
            dir.display()
        )));
    }
    let mut scans = Vec::with_capacity(sidecars.len());
    for sc_path in sidecars {
        let sidecar: ScanSidecar = serde_json::from_str(&fs::read_to_string(&sc_path)?)?;
        let bin = sc_path.with_extension("bin");
        let csv = sc_path.with_extension("csv");
        let scan = if bin.exists() {
            read_scan_binary(&bin, sidecar.ref_time, sidecar.count)?
        } else if csv.exists() {
            read_scan_csv(&csv, sidecar.ref_time)?
        } else {
            return Err(CalibError::InvalidInput(format!(
                "{}: neither .bin nor .csv data file found",
                sc_path.display()
            )));
        };
        if scan.points.len() != sidecar.count {
            return Err(CalibError::InvalidInput(format!(
                "{}: sidecar promises {} points, file holds {}",
                sc_path.display(),
                sidecar.count,
                scan.points.len()
            )));
        }
        scans.push(scan);
    }
    Ok(scans)
}

/// Writes a pose sequence as CSV `t,qw,qx,qy,qz,px,py,pz`.
pub fn write_scan_poses_csv(path: &Path, poses: &[ScanPose]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# t,qw,qx,qy,qz,px,py,pz")?;
    for p in poses {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            p.t, p.rot.w, p.rot.i, p.rot.j, p.rot.k, p.trans.x, p.trans.y, p.trans.z
        )?;
    }
    Ok(())
}

pub fn read_scan_poses_csv(path: &Path) -> Result<Vec<ScanPose>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 8 {
            return Err(parse_err(path, i + 1, "expected t,qw,qx,qy,qz,px,py,pz"));
        }
        let mut v = [0.0f64; 8];
        for (k, s) in fields.iter().enumerate() {
            v[k] = s
                .trim()
                .parse()
                .map_err(|e| parse_err(path, i + 1, format!("field {}: {e}", k + 1)))?;
        }
        out.push(ScanPose {
            t: v[0],
            rot: UnitQuaternion::new_normalize(Quaternion::new(v[1], v[2], v[3], v[4])),
            trans: Vector3::new(v[5], v[6], v[7]),
        });
    }
    Ok(out)
}

pub fn write_extrinsics_json(path: &Path, ext: &Extrinsics) -> Result<()> {
    let p: ExtrinsicsParam = (*ext).into();
    fs::write(path, serde_json::to_string_pretty(&p)?)?;
    Ok(())
}

pub fn read_extrinsics_json(path: &Path) -> Result<Extrinsics> {
    let p: ExtrinsicsParam = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(p.into())
}

/// Paths of optional ground-truth files (written by the simulator).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthPaths {
    pub extrinsics: PathBuf,
    pub scan_poses: PathBuf,
    pub imu_poses: PathBuf,
}

/// Dataset manifest: where the sensor files live plus sensor metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub imu_file: PathBuf,
    pub scan_directory: PathBuf,
    /// Always `"seconds"`; rejected otherwise.
    pub time_unit: String,
    #[serde(default)]
    pub imu_rate_hz: Option<f64>,
    #[serde(default)]
    pub lidar_rate_hz: Option<f64>,
    #[serde(default)]
    pub noise: Option<crate::optimizer::NoiseConfig>,
    #[serde(default)]
    pub truth: Option<TruthPaths>,
}

/// A dataset loaded from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<Scan>,
    pub truth_extrinsics: Option<Extrinsics>,
    pub truth_scan_poses: Option<Vec<ScanPose>>,
    pub manifest: DatasetManifest,
}

/// Loads and validates a dataset: referenced files must exist and parse,
/// timestamps must be monotone.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.time_unit != "seconds" {
        return Err(CalibError::InvalidConfig(format!(
            "unsupported time unit {:?} (only \"seconds\")",
            manifest.time_unit
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let imu_path = base.join(&manifest.imu_file);
    let imu = read_imu_csv(&imu_path)?;
    if imu.is_empty() {
        return Err(CalibError::InvalidInput(format!(
            "{}: no IMU samples",
            imu_path.display()
        )));
    }
    for w in imu.windows(2) {
        if w[1].t <= w[0].t {
            return Err(CalibError::InvalidInput(format!(
                "{}: IMU timestamps not strictly increasing near t={}",
                imu_path.display(),
                w[0].t
            )));
        }
    }
    let scans = read_scans(&base.join(&manifest.scan_directory))?;
    for w in scans.windows(2) {
        if w[1].ref_time <= w[0].ref_time {
            return Err(CalibError::InvalidInput(
                "scan reference times not strictly increasing".into(),
            ));
        }
    }
    let (truth_extrinsics, truth_scan_poses) = match &manifest.truth {
        Some(t) => (
            Some(read_extrinsics_json(&base.join(&t.extrinsics))?),
            Some(read_scan_poses_csv(&base.join(&t.scan_poses))?),
        ),
        None => (None, None),
    };
    Ok(Dataset {
        imu,
        scans,
        truth_extrinsics,
        truth_scan_poses,
        manifest,
    })
}

/// Top-level tool configuration: simulation and calibration sections, all
/// fields defaulted so `{}` is a valid config.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ToolConfig {
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub calib: CalibConfig,
}

pub fn read_config(path: &Path) -> Result<ToolConfig> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn imu_csv_roundtrip_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let samples: Vec<ImuSample> = (0..200)
            .map(|k| ImuSample {
                t: k as f64 * 0.0025 + rng.random_range(0.0..1e-6),
                gyro: Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                accel: Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                ),
            })
            .collect();
        let dir = std::env::temp_dir().join("calib_io_test_imu");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("imu.csv");
        write_imu_csv(&path, &samples).unwrap();
        let back = read_imu_csv(&path).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn imu_csv_parse_error_names_line() {
        let dir = std::env::temp_dir().join("calib_io_test_bad");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("imu.csv");
        fs::write(&path, "# header\n0,0,0,0,0,0,0\nnot-a-number,0,0,0,0,0,0\n").unwrap();
        match read_imu_csv(&path) {
            Err(CalibError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn scan_binary_roundtrip_at_format_precision() {
        let mut rng = ChaCha12Rng::seed_from_u64(62);
        let scan = Scan::new(
            1.5,
            (0..500)
                .map(|k| LidarPoint {
                    t: 1.5 + k as f64 * 1e-4,
                    pos: Vector3::new(
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                    ),
                })
                .collect(),
        );
        let dir = std::env::temp_dir().join("calib_io_test_scan");
        fs::create_dir_all(&dir).unwrap();
        write_scan(&dir, 0, &scan).unwrap();
        let back = read_scans(&dir).unwrap().remove(0);
        assert_eq!(back.ref_time, scan.ref_time);
        assert_eq!(back.points.len(), scan.points.len());
        for (a, b) in scan.points.iter().zip(&back.points) {
            // Timestamps are f64 and exact; coordinates carry f32 width.
            assert_eq!(a.t, b.t);
            assert_eq!(a.pos.x as f32, b.pos.x as f32);
            assert_eq!(b.pos.x, (a.pos.x as f32) as f64);
        }
        // Reading twice is bit-identical.
        let again = read_scans(&dir).unwrap().remove(0);
        assert_eq!(back, again);
    }

    #[test]
    fn pose_csv_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(63);
        let poses: Vec<ScanPose> = (0..50)
            .map(|k| ScanPose {
                t: k as f64 * 0.1,
                rot: UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                trans: Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ),
            })
            .collect();
        let dir = std::env::temp_dir().join("calib_io_test_poses");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("poses.csv");
        write_scan_poses_csv(&path, &poses).unwrap();
        let back = read_scan_poses_csv(&path).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert_eq!(a.t, b.t);
            assert!(a.rot.angle_to(&b.rot) < 1e-15);
            assert_eq!(a.trans, b.trans);
        }
    }

    #[test]
    fn empty_config_parses_with_defaults() {
        let cfg: ToolConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.calib.knot_dt, 0.02);
        assert_eq!(cfg.calib.iterations, 8);
        assert_eq!(cfg.sim.lidar.beams, 16);
    }
}
