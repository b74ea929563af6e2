//! Simulation of a spinning LiDAR and an IMU moving through a scene of
//! bounded planes, plus the Monte Carlo evaluation harness.
//!
//! The sensor rig follows a sinusoidal trajectory in front of three
//! mutually orthogonal walls. Rays are cast from the LiDAR pose at each
//! point's own capture time, so motion distortion arises naturally; IMU
//! samples are the spline predictions plus bias and seeded Gaussian noise.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::ExtrinsicsParam;
use crate::odometry::OracleOdometry;
use crate::pipeline::{self, CalibConfig, CalibReport};
use crate::rot_init::ImuSample;
use crate::scan::{LidarPoint, Scan};
use crate::splines::KnotGrid;
use crate::trajectory::{fit_to_poses, Extrinsics, Trajectory, GRAVITY_MAGNITUDE};
use crate::{CalibError, Result};

/// A rectangular planar patch: plane `n·p + d = 0` bounded by half-extents
/// along two in-plane axes around a center point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundedPlane {
    pub normal: [f64; 3],
    pub center: [f64; 3],
    /// In-plane half extents, meters.
    pub half_extent: [f64; 2],
}

impl BoundedPlane {
    pub fn new(normal: Vector3<f64>, center: Vector3<f64>, half_extent: [f64; 2]) -> Self {
        let n = normal.normalize();
        Self {
            normal: [n.x, n.y, n.z],
            center: [center.x, center.y, center.z],
            half_extent,
        }
    }

    fn normal_v(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }

    fn center_v(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// In-plane orthonormal axes.
    fn axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal_v();
        let pick = if n.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u = n.cross(&pick).normalize();
        let v = n.cross(&u);
        (u, v)
    }

    /// Distance along the ray to the in-extent hit, if any.
    fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal_v();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let c = self.center_v();
        let t = n.dot(&(c - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let hit = origin + dir * t;
        let (u, v) = self.axes();
        let rel = hit - c;
        if rel.dot(&u).abs() > self.half_extent[0] || rel.dot(&v).abs() > self.half_extent[1] {
            return None;
        }
        Some(t)
    }
}

/// The simulated environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneScene {
    pub planes: Vec<BoundedPlane>,
}

impl Default for PlaneScene {
    fn default() -> Self {
        Self::corner()
    }
}

impl PlaneScene {
    /// Three mutually orthogonal walls around the rig: a floor below and
    /// two walls ahead, all within the LiDAR's vertical field of view.
    pub fn corner() -> Self {
        Self {
            planes: vec![
                BoundedPlane::new(
                    Vector3::new(0.0, 0.0, 1.0),
                    Vector3::new(0.0, 0.0, -1.5),
                    [5.0, 5.0],
                ),
                BoundedPlane::new(
                    Vector3::new(-1.0, 0.0, 0.0),
                    Vector3::new(4.0, 0.0, 0.0),
                    [5.0, 5.0],
                ),
                BoundedPlane::new(
                    Vector3::new(0.0, -1.0, 0.0),
                    Vector3::new(0.0, 4.0, 0.0),
                    [5.0, 5.0],
                ),
            ],
        }
    }

    /// Nearest in-extent hit over all planes.
    fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
        let mut best = None;
        for p in &self.planes {
            if let Some(t) = p.raycast(origin, dir) {
                if t <= max_range && best.map_or(true, |b| t < b) {
                    best = Some(t);
                }
            }
        }
        best
    }
}

/// Spinning multi-beam LiDAR model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarModel {
    pub beams: usize,
    /// Vertical field of view half-angle, degrees (beams span ±this).
    pub vertical_fov_deg: f64,
    /// Revolutions per second.
    pub rate_hz: f64,
    pub azimuth_steps: usize,
    /// 1σ range noise along the ray, meters.
    pub range_noise: f64,
    pub max_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            beams: 16,
            vertical_fov_deg: 15.0,
            rate_hz: 10.0,
            azimuth_steps: 200,
            range_noise: 0.01,
            max_range: 20.0,
        }
    }
}

/// IMU sampling model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuModel {
    pub rate_hz: f64,
    pub sigma_gyro: f64,
    pub sigma_accel: f64,
    pub bias_gyro: [f64; 3],
    pub bias_accel: [f64; 3],
}

impl Default for ImuModel {
    fn default() -> Self {
        Self {
            rate_hz: 400.0,
            sigma_gyro: 0.005,
            sigma_accel: 0.02,
            bias_gyro: [0.0; 3],
            bias_accel: [0.0; 3],
        }
    }
}

/// Sinusoidal excitation parameters (per-axis position and orientation
/// oscillation).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SinusoidParams {
    pub duration: f64,
    pub pos_amp: [f64; 3],
    pub pos_freq_hz: [f64; 3],
    pub pos_phase: [f64; 3],
    /// Euler-angle amplitudes, radians.
    pub rot_amp: [f64; 3],
    pub rot_freq_hz: [f64; 3],
    pub rot_phase: [f64; 3],
    pub knot_dt: f64,
}

impl Default for SinusoidParams {
    fn default() -> Self {
        Self {
            duration: 10.0,
            pos_amp: [0.30, 0.30, 0.15],
            pos_freq_hz: [0.45, 0.55, 0.70],
            pos_phase: [0.0, 1.3, 2.4],
            rot_amp: [0.30, 0.30, 0.30],
            rot_freq_hz: [0.50, 0.40, 0.60],
            rot_phase: [0.0, 2.1, 4.2],
            knot_dt: 0.02,
        }
    }
}

impl SinusoidParams {
    fn pose_at(&self, t: f64) -> (UnitQuaternion<f64>, Vector3<f64>) {
        let tau = std::f64::consts::TAU;
        let p = Vector3::new(
            self.pos_amp[0] * (tau * self.pos_freq_hz[0] * t + self.pos_phase[0]).sin(),
            self.pos_amp[1] * (tau * self.pos_freq_hz[1] * t + self.pos_phase[1]).sin(),
            self.pos_amp[2] * (tau * self.pos_freq_hz[2] * t + self.pos_phase[2]).sin(),
        );
        let e = [
            self.rot_amp[0] * (tau * self.rot_freq_hz[0] * t + self.rot_phase[0]).sin(),
            self.rot_amp[1] * (tau * self.rot_freq_hz[1] * t + self.rot_phase[1]).sin(),
            self.rot_amp[2] * (tau * self.rot_freq_hz[2] * t + self.rot_phase[2]).sin(),
        ];
        (UnitQuaternion::from_euler_angles(e[0], e[1], e[2]), p)
    }

    fn max_freq(&self) -> f64 {
        self.pos_freq_hz
            .iter()
            .chain(self.rot_freq_hz.iter())
            .fold(0.0f64, |a, &b| a.max(b))
    }
}

/// Spline-fit quality of the generated trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryFit {
    pub max_pos_residual: f64,
    pub max_rot_residual: f64,
    /// False when the sinusoid frequencies get close to the knot rate.
    pub bandwidth_ok: bool,
}

/// Fits a spline trajectory to dense samples of the analytic sinusoid.
/// Gravity is `(0,0,−9.81)` in the world frame.
pub fn make_sinusoid_trajectory(params: &SinusoidParams) -> Result<(Trajectory, TrajectoryFit)> {
    let grid = KnotGrid::new(
        0.0,
        params.knot_dt,
        (params.duration / params.knot_dt).round() as usize + 3,
    )?;
    let bandwidth_ok = params.max_freq() < 0.1 / params.knot_dt;
    if !bandwidth_ok {
        log::warn!(
            "sinusoid frequency {:.2} Hz is high for knot spacing {} s; spline fit will lag",
            params.max_freq(),
            params.knot_dt
        );
    }
    let (lo, hi) = grid.domain();
    let sample_dt = params.knot_dt / 4.0;
    let poses: Vec<(f64, UnitQuaternion<f64>, Vector3<f64>)> = (0..)
        .map(|k| lo + k as f64 * sample_dt)
        .take_while(|&t| t < hi)
        .map(|t| {
            let (q, p) = params.pose_at(t);
            (t, q, p)
        })
        .collect();
    let mut traj = fit_to_poses(&poses, grid)?;
    traj.gravity = Vector3::new(0.0, 0.0, -GRAVITY_MAGNITUDE);

    let mut fit = TrajectoryFit {
        max_pos_residual: 0.0,
        max_rot_residual: 0.0,
        bandwidth_ok,
    };
    for &(t, q, p) in poses.iter().step_by(5) {
        let (fq, fp) = traj.pose(t)?;
        fit.max_pos_residual = fit.max_pos_residual.max((fp - p).norm());
        fit.max_rot_residual = fit.max_rot_residual.max(fq.angle_to(&q));
    }
    Ok((traj, fit))
}

/// Samples the IMU along the trajectory: predictions plus bias plus seeded
/// Gaussian noise. Sampling covers the spline domain.
pub fn simulate_imu(traj: &Trajectory, model: &ImuModel, seed: u64) -> Result<Vec<ImuSample>> {
    let (lo, hi) = traj.grid().domain();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gyro_n = Normal::new(0.0, model.sigma_gyro.max(0.0))
        .map_err(|e| CalibError::InvalidConfig(e.to_string()))?;
    let accel_n = Normal::new(0.0, model.sigma_accel.max(0.0))
        .map_err(|e| CalibError::InvalidConfig(e.to_string()))?;
    let dt = 1.0 / model.rate_hz;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t = lo + k as f64 * dt;
        if t >= hi {
            break;
        }
        let gyro = traj.predict_gyro(t)?
            + Vector3::from(model.bias_gyro)
            + Vector3::new(
                gyro_n.sample(&mut rng),
                gyro_n.sample(&mut rng),
                gyro_n.sample(&mut rng),
            );
        let accel = traj.predict_accel(t)?
            + Vector3::from(model.bias_accel)
            + Vector3::new(
                accel_n.sample(&mut rng),
                accel_n.sample(&mut rng),
                accel_n.sample(&mut rng),
            );
        out.push(ImuSample { t, gyro, accel });
        k += 1;
    }
    Ok(out)
}

/// Simulates one revolution starting at `scan_start`. Rays are cast from
/// the LiDAR pose at each firing's own timestamp; hits are expressed in
/// the LiDAR frame at that timestamp with range noise along the ray.
/// Misses are dropped.
pub fn simulate_scan(
    traj: &Trajectory,
    ext: &Extrinsics,
    scene: &PlaneScene,
    model: &LidarModel,
    scan_start: f64,
    seed: u64,
) -> Result<Scan> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let range_n = Normal::new(0.0, model.range_noise.max(0.0))
        .map_err(|e| CalibError::InvalidConfig(e.to_string()))?;
    let period = 1.0 / model.rate_hz;
    let n_fires = model.azimuth_steps * model.beams;
    let fire_dt = period / n_fires as f64;
    let fov = model.vertical_fov_deg.to_radians();
    let (_, domain_end) = traj.grid().domain();

    let mut points = Vec::with_capacity(n_fires / 2);
    for az_step in 0..model.azimuth_steps {
        let azimuth = std::f64::consts::TAU * az_step as f64 / model.azimuth_steps as f64;
        for beam in 0..model.beams {
            let t = scan_start + (az_step * model.beams + beam) as f64 * fire_dt;
            if t >= domain_end {
                break;
            }
            let elevation = if model.beams > 1 {
                -fov + 2.0 * fov * beam as f64 / (model.beams - 1) as f64
            } else {
                0.0
            };
            let dir_local = Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            let (q_i, p_i) = traj.pose(t)?;
            let q_l = q_i * ext.rot;
            let origin = q_i * ext.trans + p_i;
            let dir_world = q_l * dir_local;
            if let Some(range) = scene.raycast(&origin, &dir_world, model.max_range) {
                let noisy = range + range_n.sample(&mut rng);
                points.push(LidarPoint {
                    t,
                    pos: dir_local * noisy,
                });
            }
        }
    }
    Ok(Scan::new(scan_start, points))
}

/// One complete simulated dataset.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<Scan>,
    pub truth_trajectory: Trajectory,
    pub truth_extrinsics: Extrinsics,
    pub trajectory_fit: TrajectoryFit,
}

/// Ground-truth extrinsics used by default: 10° about each axis and a
/// decimeter-scale offset, so calibration errors are meaningful.
pub fn default_truth_extrinsics() -> Extrinsics {
    let d = 10.0f64.to_radians();
    Extrinsics::new(
        UnitQuaternion::from_euler_angles(d, d, d),
        Vector3::new(0.1, -0.05, 0.15),
    )
}

/// Full simulation configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SimConfig {
    #[serde(default)]
    pub trajectory: SinusoidParams,
    #[serde(default)]
    pub lidar: LidarModel,
    #[serde(default)]
    pub imu: ImuModel,
    #[serde(default)]
    pub scene: PlaneScene,
    /// Ground-truth extrinsics; `None` selects the default.
    #[serde(default)]
    pub truth_extrinsics: Option<ExtrinsicsParam>,
    /// Oracle odometry noise: rotation sigma (degrees) and translation
    /// sigma (meters).
    #[serde(default = "default_odom_noise")]
    pub odometry_noise: (f64, f64),
}

fn default_odom_noise() -> (f64, f64) {
    (0.2, 0.01)
}

impl SimConfig {
    pub fn truth_ext(&self) -> Extrinsics {
        self.truth_extrinsics
            .map(Extrinsics::from)
            .unwrap_or_else(default_truth_extrinsics)
    }
}

/// Simulates IMU and LiDAR streams for one sequence.
pub fn simulate_dataset(config: &SimConfig, seed: u64) -> Result<SimulatedDataset> {
    let (traj, fit) = make_sinusoid_trajectory(&config.trajectory)?;
    let ext = config.truth_ext();
    let imu = simulate_imu(&traj, &config.imu, seed.wrapping_add(0x11))?;
    let n_scans = (config.trajectory.duration * config.lidar.rate_hz).floor() as usize;
    let mut scans = Vec::with_capacity(n_scans);
    for k in 0..n_scans {
        let start = k as f64 / config.lidar.rate_hz;
        scans.push(simulate_scan(
            &traj,
            &ext,
            &config.scene,
            &config.lidar,
            start,
            seed.wrapping_add(0x1000 + k as u64),
        )?);
    }
    Ok(SimulatedDataset {
        imu,
        scans,
        truth_trajectory: traj,
        truth_extrinsics: ext,
        trajectory_fit: fit,
    })
}

/// Mean and standard deviation of a sample (SD undefined for n < 2).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub sd: Option<f64>,
    pub per_trial: Vec<f64>,
}

impl Stats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let sd = if samples.len() >= 2 {
            let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            Some(var.sqrt())
        } else {
            None
        };
        Self {
            mean,
            sd,
            per_trial: samples.to_vec(),
        }
    }
}

/// Aggregate result of a Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloStats {
    pub trials: usize,
    pub rot_err_deg: Stats,
    pub trans_err_m: Stats,
    pub failures: Vec<(usize, String)>,
    /// Per trial, per refinement iteration: (rotation error deg,
    /// translation error m) against ground truth.
    pub per_iteration_errors: Vec<Vec<(f64, f64)>>,
    /// Full per-trial reports; not serialized (reports carry no wall-clock
    /// data either, so `stats.json` stays byte-stable).
    #[serde(skip)]
    pub reports: Vec<CalibReport>,
    /// Wall-clock seconds per successful trial (not serialized).
    #[serde(skip)]
    pub trial_wall_s: Vec<f64>,
}

/// Runs `n_trials` independently seeded simulated calibrations and
/// aggregates the extrinsic errors. Each trial randomizes the sinusoid
/// phases and every noise stream from `(master_seed, trial)`; failures are
/// recorded, not fatal.
pub fn monte_carlo(
    n_trials: usize,
    sim: &SimConfig,
    calib: &CalibConfig,
    master_seed: u64,
) -> Result<MonteCarloStats> {
    if n_trials < 2 {
        return Err(CalibError::InvalidConfig(
            "monte carlo needs at least 2 trials".into(),
        ));
    }
    let outcomes: Vec<(usize, f64, Result<(CalibReport, f64, f64)>)> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(master_seed, trial);
            let start = std::time::Instant::now();
            let outcome = run_trial(sim, calib, seed);
            (trial, start.elapsed().as_secs_f64(), outcome)
        })
        .collect();

    let mut rot = Vec::new();
    let mut trans = Vec::new();
    let mut failures = Vec::new();
    let mut per_iter = Vec::new();
    let mut reports = Vec::new();
    let mut walls = Vec::new();
    for (trial, wall, outcome) in outcomes {
        match outcome {
            Ok((report, rot_err, trans_err)) => {
                rot.push(rot_err);
                trans.push(trans_err);
                per_iter.push(report.iteration_errors());
                reports.push(report);
                walls.push(wall);
            }
            Err(e) => failures.push((trial, e.to_string())),
        }
    }
    if rot.is_empty() {
        return Err(CalibError::Diverged(format!(
            "every monte carlo trial failed; first: {}",
            failures
                .first()
                .map(|(_, e)| e.as_str())
                .unwrap_or("unknown")
        )));
    }
    Ok(MonteCarloStats {
        trials: n_trials,
        rot_err_deg: Stats::from_samples(&rot),
        trans_err_m: Stats::from_samples(&trans),
        failures,
        per_iteration_errors: per_iter,
        reports,
        trial_wall_s: walls,
    })
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    master ^ (trial as u64).wrapping_mul(0x9e3779b97f4a7c15)
}

/// One simulated calibration trial (phases and noise re-seeded).
pub fn run_trial(
    sim: &SimConfig,
    calib: &CalibConfig,
    seed: u64,
) -> Result<(CalibReport, f64, f64)> {
    let mut sim = sim.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for k in 0..3 {
        sim.trajectory.pos_phase[k] = rng.random_range(0.0..std::f64::consts::TAU);
        sim.trajectory.rot_phase[k] = rng.random_range(0.0..std::f64::consts::TAU);
    }
    let data = simulate_dataset(&sim, seed)?;
    let scan_times: Vec<f64> = data.scans.iter().map(|s| s.ref_time).collect();
    let mut odom = OracleOdometry::from_trajectory(
        &data.truth_trajectory,
        &data.truth_extrinsics,
        &scan_times,
        sim.odometry_noise.0.to_radians(),
        sim.odometry_noise.1,
        seed.wrapping_add(0x0d0),
    )?;
    let mut calib = calib.clone();
    calib.seed = seed;
    let report = pipeline::calibrate(&data.imu, &data.scans, &calib, &mut odom)?;
    let (rot_err, trans_err) =
        pipeline::extrinsic_error(&report.final_extrinsics(), &data.truth_extrinsics);
    let mut report = report;
    report.set_truth(data.truth_extrinsics);
    Ok((report, rot_err, trans_err))
}
