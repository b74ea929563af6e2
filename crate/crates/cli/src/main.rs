use std::path::PathBuf;
use std::process::ExitCode;

use calib_core::io::{read_config, ToolConfig};
use calib_core::pipeline::OdometryKind;
use clap::{Parser, Subcommand, ValueEnum};

/// Continuous-time LiDAR-IMU extrinsic calibration toolkit.
#[derive(Parser)]
#[command(name = "lidar-imu-calib", version, about)]
struct Cli {
    /// JSON configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master random seed (overrides the configured seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Refinement iteration count override.
    #[arg(long, global = true)]
    iterations: Option<usize>,

    /// Environment profile: voxel size 0.5 m (indoor) or 1.0 m (outdoor).
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,

    /// Pose source for initialization.
    #[arg(long, global = true, value_enum)]
    odometry: Option<OdometryArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum Profile {
    Indoor,
    Outdoor,
}

#[derive(Copy, Clone, ValueEnum)]
enum OdometryArg {
    Oracle,
    Icp,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a calibration dataset and write it to disk.
    Simulate {
        /// Output dataset directory.
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Calibrate from a dataset manifest.
    Calibrate {
        /// Path to the dataset's manifest.json.
        manifest: PathBuf,
        /// Output report path (a .txt summary lands next to it).
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
    /// Run seeded Monte Carlo trials of the full pipeline.
    Montecarlo {
        /// Number of trials.
        #[arg(short = 'n', long = "trials", default_value_t = 10)]
        trials: usize,
        /// Output directory for stats.json and convergence.csv.
        #[arg(long, default_value = "mc_out")]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> calib_core::Result<ToolConfig> {
    let mut cfg = match &cli.config {
        Some(path) => read_config(path)?,
        None => ToolConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.calib.seed = seed;
    }
    if let Some(iters) = cli.iterations {
        cfg.calib.iterations = iters;
    }
    if let Some(profile) = cli.profile {
        let name = match profile {
            Profile::Indoor => "indoor",
            Profile::Outdoor => "outdoor",
        };
        cfg.calib.apply_profile(name)?;
    }
    if let Some(odom) = cli.odometry {
        cfg.calib.odometry = match odom {
            OdometryArg::Oracle => OdometryKind::Oracle,
            OdometryArg::Icp => OdometryKind::Icp,
        };
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> calib_core::Result<()> {
    let cfg = load_config(cli)?;
    let seed = cli.seed.unwrap_or(cfg.calib.seed);
    match &cli.command {
        Command::Simulate { out } => calib_cli::cmd_simulate(&cfg, out, seed),
        Command::Calibrate { manifest, report } => {
            calib_cli::cmd_calibrate(manifest, &cfg, report).map(|_| ())
        }
        Command::Montecarlo { trials, out } => {
            calib_cli::cmd_montecarlo(&cfg, *trials, out, seed).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(calib_cli::exit_code_for(&e) as u8)
        }
    }
}
