//! `usm`: synthesize scenes, fit shape and pose with uncertainty, and export
//! renders, meshes and metrics.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical abort: {m}"),
        }
    }
}

impl From<usm_core::Error> for CliError {
    fn from(e: usm_core::Error) -> Self {
        match e {
            usm_core::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "usm", version, about = "Shape and 9-DoF pose reconstruction with uncertainty from depth views")]
struct Cli {
    /// Upper bound on worker threads; results do not depend on it.
    #[arg(long, global = true, env = "USM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-view scene with a ground-truth block.
    Synth(SynthArgs),
    /// Fit latent shape and pose Gaussians to a scene.
    Fit(FitArgs),
    /// Render expected depth and its standard deviation for one view.
    Render(RenderArgs),
    /// Extract the fitted mean shape as an OBJ mesh.
    Mesh(MeshArgs),
    /// Score a fit against the scene's ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `sphere`, or `ellipsoid:<z0>,<z1>,<z2>` for the first three latent entries.
    #[arg(long, default_value = "sphere")]
    pub shape: String,
    #[arg(long, default_value_t = 3)]
    pub views: usize,
    /// Depth noise standard deviation, meters.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
    pub translation: Vector3<f64>,
    /// Axis-angle, radians.
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
    pub rotation: Vector3<f64>,
    #[arg(long, value_parser = parse_vec3, default_value = "1,1,1")]
    pub scale: Vector3<f64>,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Scene directory or manifest file.
    #[arg(long)]
    pub scene: PathBuf,
    /// TOML file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `analytic` or `mlp:<path>`.
    #[arg(long)]
    pub decoder: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub surface_weight: Option<f64>,
    #[arg(long)]
    pub render_weight: Option<f64>,
    #[arg(long)]
    pub latent_weight: Option<f64>,
    /// Object-to-world 3x4 text file used instead of ICP initialization.
    #[arg(long)]
    pub init_pose: Option<PathBuf>,
    #[arg(long, default_value = "result.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "history.csv")]
    pub history: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// Defaults to the seed stored in the result.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "depth.pfm")]
    pub depth: PathBuf,
    #[arg(long, default_value = "uncertainty.pfm")]
    pub uncertainty: PathBuf,
}

#[derive(Args, Debug)]
pub struct MeshArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Place the mesh with the fitted pose instead of the canonical frame.
    #[arg(long)]
    pub world: bool,
    #[arg(long, default_value = "mesh.obj")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub result: PathBuf,
    /// Marching-cubes and IoU grid resolution.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Surface points per shape for Chamfer and the uncertainty table.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    #[arg(long, default_value = "uncertainty.csv")]
    pub uncertainty: PathBuf,
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] => Ok(Vector3::new(x, y, z)),
        _ => Err(format!("expected three comma-separated numbers, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, cli.threads),
        Command::Fit(a) => commands::fit(&a, cli.threads),
        Command::Render(a) => commands::render(&a, cli.threads),
        Command::Mesh(a) => commands::mesh(&a, cli.threads),
        Command::Eval(a) => commands::eval(&a, cli.threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("usm: {e}");
            ExitCode::from(e.code())
        }
    }
}
