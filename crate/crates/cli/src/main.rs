mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit 1: bad input the user can fix. Exit 2: the program failed.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tririg", version, about = "Record, replay, evaluate and serve the trimanual rig")]
struct Cli {
    /// JSON file with defaults for any flag; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scripted demonstrations into a dataset directory.
    Record(RecordArgs),
    /// Re-simulate episodes and report the first divergence.
    Replay(ReplayArgs),
    /// Re-render an episode's frames for another camera set.
    Rerender(RerenderArgs),
    /// Keep only some cameras of an episode or dataset.
    Slice(SliceArgs),
    /// Train the nearest-neighbor baseline and roll it out.
    Eval(EvalArgs),
    /// Serve the live teleoperation endpoint.
    Serve(ServeArgs),
    /// Write one camera frame as PNG (or PGM for a .pgm path).
    RenderExport(RenderExportArgs),
}

#[derive(Args, Debug)]
pub struct RecordArgs {
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// `7`, `1,2,3` or `0..50`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub cameras: Option<String>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Episode file or dataset directory.
    pub path: PathBuf,
    /// Skip re-rendering frames.
    #[arg(long)]
    pub no_frames: bool,
}

#[derive(Args, Debug)]
pub struct RerenderArgs {
    pub episode: PathBuf,
    #[arg(long)]
    pub cameras: Option<String>,
    /// Leave the camera arm out of the rendered scene.
    #[arg(long)]
    pub no_av_arm: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SliceArgs {
    /// Episode file or dataset directory.
    pub input: PathBuf,
    #[arg(long)]
    pub cameras: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Nn,
    Oracle,
    Random,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub dataset: PathBuf,
    /// One camera set; all seven group combinations when absent.
    #[arg(long)]
    pub cameras: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub query_period: Option<usize>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    /// Held-out queries for the neighbor ablation probe; 0 skips it.
    #[arg(long)]
    pub probe: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub task: Option<String>,
    /// Scene seed for new sessions.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, env = "TRIRIG_PORT")]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    /// Cameras stored in recorded episodes.
    #[arg(long)]
    pub cameras: Option<String>,
    /// Directory for recorded episodes; recording is refused without one.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop after this many seconds and print session statistics.
    #[arg(long)]
    pub duration_secs: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RenderExportArgs {
    /// Take the frame from this episode instead of a fresh demonstration.
    #[arg(long)]
    pub episode: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub camera: String,
    #[arg(long, default_value_t = 0)]
    pub step: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Record(a) => commands::record(a, &cfg),
        Command::Replay(a) => commands::replay(a),
        Command::Rerender(a) => commands::rerender(a, &cfg),
        Command::Slice(a) => commands::slice(a, &cfg),
        Command::Eval(a) => commands::eval(a, &cfg),
        Command::Serve(a) => commands::serve(a, &cfg),
        Command::RenderExport(a) => commands::render_export(a, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
