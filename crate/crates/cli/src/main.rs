use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use odom_core::dataset_io::{read_trajectory, write_trajectory, DatasetDir};
use odom_core::eval::evaluate;
use odom_core::factors::Extrinsic;
use odom_core::pipeline::{run, PipelineConfig};
use odom_core::sim::{SceneKind, Scenario, SensorModel};
use odom_core::solver::Mode;

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "odom", version, about = "Continuous-time Doppler/ICP lidar odometry")]
struct Cli {
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate a trajectory over a dataset directory.
    Run(RunArgs),
    /// Compare an estimated trajectory with ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic dataset with ground truth.
    Sim(SimArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Icp,
    Doppler,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Icp => Mode::IcpOnly,
            ModeArg::Doppler => Mode::Doppler,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SceneArg {
    Tunnel,
    Corridor,
    Box,
}

impl From<SceneArg> for SceneKind {
    fn from(s: SceneArg) -> Self {
        match s {
            SceneArg::Tunnel => SceneKind::Tunnel,
            SceneArg::Corridor => SceneKind::Corridor,
            SceneArg::Box => SceneKind::Box,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Overrides the mode in the configuration.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Drop points farther than this from the sensor (m).
    #[arg(long, value_name = "M")]
    range_limit: Option<f64>,
    /// Output directory; defaults to the dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a per-stage timing report next to the trajectory.
    #[arg(long)]
    timing: bool,
    /// Count dataset reading in the timing report.
    #[arg(long, requires = "timing")]
    timing_include_io: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Leading frames left out of every metric.
    #[arg(long, default_value_t = 0)]
    exclude_first: usize,
    /// Also write segment and frame error tables into this directory.
    #[arg(long)]
    plots: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long, value_enum)]
    scene: SceneArg,
    /// Cruise speed (m/s).
    #[arg(long, value_name = "M/S")]
    speed: f64,
    #[arg(long, value_name = "N")]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "K", default_value_t = 0)]
    moving_objects: usize,
    /// Ramp from rest to cruise speed (s).
    #[arg(long, default_value_t = 2.0)]
    accel_time: f64,
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if args.range_limit.is_some() {
        cfg.range_limit = args.range_limit;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let out = args.out.clone().unwrap_or_else(|| args.dataset.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let reader = DatasetDir::open(&args.dataset).with_context(|| format!("opening {}", args.dataset.display()))?;
    let result = run(&cfg, reader)?;
    let traj_path = out.join(TRAJECTORY_FILE);
    write_trajectory(&traj_path, &result.pose_records())?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    let report = result.timing_report(args.timing_include_io);
    if args.timing {
        fs::write(out.join(TIMING_FILE), format!("{}\n{}", report.to_text(), report.to_key_values()))?;
    }
    println!(
        "{} frames ({} skipped, {} diverged) in {:.2} s; trajectory written to {}",
        result.frames_processed,
        result.frames_skipped,
        result.frames_diverged,
        result.wall_time.as_secs_f64(),
        traj_path.display()
    );
    if args.timing {
        print!("{}", report.to_text());
    }
    if result.frames_diverged > 0 {
        bail!("{} frames failed to align", result.frames_diverged);
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let est = read_trajectory(&args.est).with_context(|| format!("reading {}", args.est.display()))?;
    let gt = read_trajectory(&args.gt).with_context(|| format!("reading {}", args.gt.display()))?;
    let report = evaluate(&est, &gt, args.exclude_first)?;
    print!("{}", report.to_text());
    println!();
    print!("{}", report.to_key_values());
    if let Some(dir) = &args.plots {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("segments.txt"), report.segment_plot_data())?;
        fs::write(dir.join("frames.txt"), report.frame_plot_data())?;
    }
    Ok(())
}

fn cmd_sim(args: &SimArgs) -> Result<()> {
    let scenario = Scenario {
        moving_objects: args.moving_objects,
        accel_time: args.accel_time,
        ..Scenario::new(args.scene.into(), args.speed, args.frames, args.seed)
    };
    let sensor = SensorModel::default();
    scenario.export(&sensor, &Extrinsic::default(), &args.out)?;
    info!("scenario {scenario:?}");
    println!("{} frames written to {}", args.frames, args.out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.dump_config {
        print!("{}", PipelineConfig::default().to_toml_string()?);
        return Ok(());
    }
    match &cli.command {
        Some(Command::Run(a)) => cmd_run(a),
        Some(Command::Eval(a)) => cmd_eval(a),
        Some(Command::Sim(a)) => cmd_sim(a),
        None => bail!("no command given; see --help"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
