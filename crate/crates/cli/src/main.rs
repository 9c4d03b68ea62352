//! `dsim`: command-line front end for the depth sensor simulator.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsim_core::{Error, SensorConfig};

#[derive(Debug, Parser)]
#[command(
    name = "dsim",
    version,
    about = "Differentiable structured-light depth sensor simulator"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Sensor configuration file (TOML).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in device: kinect_v1 or matterport_pro2.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed for patterns and noise.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for rendering and matching.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

impl Global {
    fn sensor(&self) -> dsim_core::Result<SensorConfig> {
        match &self.config {
            Some(path) => SensorConfig::load(path),
            None => dsim_core::preset(self.preset.as_deref().unwrap_or("kinect_v1")),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a scene and simulate its depth map.
    Render(commands::RenderArgs),
    /// Soft block matching of a rectified image pair.
    Match(commands::MatchArgs),
    /// Depth error of tilted planes binned by radius.
    NoiseStudy(commands::NoiseStudyArgs),
    /// Fit sensor parameters to reference scans.
    Calibrate(commands::CalibrateArgs),
    /// Recover the tilt of a plane from a frontal target.
    OptimizePose(commands::PoseArgs),
    /// Optimize pattern values for a red-only scene.
    OptimizePattern(commands::PatternArgs),
    /// Compare tape gradients with central differences.
    Gradcheck(commands::GradcheckArgs),
}

/// A failed command: its exit code and what to report.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// The command ran but its outcome is a numerical failure.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(Error::Numerical(_) | Error::Contract(_)) | Failure::Check(_) => 2,
            Failure::Core(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.kind(),
            Failure::Check(_) => "numerical",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Check(m) => m.clone(),
        }
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let cfg = g.sensor()?;
    std::fs::create_dir_all(&g.out)?;
    std::fs::write(g.out.join("config.toml"), cfg.to_toml_string())?;
    let work = || match &cli.command {
        Command::Render(a) => commands::render(g, &cfg, a),
        Command::Match(a) => commands::match_images(g, &cfg, a),
        Command::NoiseStudy(a) => commands::noise_study(g, &cfg, a),
        Command::Calibrate(a) => commands::calibrate(g, &cfg, a),
        Command::OptimizePose(a) => commands::optimize_pose(g, &cfg, a),
        Command::OptimizePattern(a) => commands::optimize_pattern(g, &cfg, a),
        Command::Gradcheck(a) => commands::gradcheck(g, &cfg, a),
    };
    match g.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
            pool.install(work)
        }
        None => work(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            return report("usage", first, 1);
        }
    };
    if cli.global.threads == Some(0) {
        return report("usage", "--threads must be at least 1", 1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f.kind(), &f.message(), f.code()),
    }
}
