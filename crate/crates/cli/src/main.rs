//! `gsdyn`: learned particle dynamics over tracked Gaussian clouds, end to
//! end. Subcommands cover dataset synthesis, model training, action-
//! conditioned prediction, splat rendering, sampling-based planning against
//! the simulated world, and trajectory scoring.
//!
//! Every command takes an optional `--config` TOML file; flags override file
//! values and unset values fall back to library defaults. Log verbosity
//! comes from `RUST_LOG` (default `warn`).

mod cmds;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gsdyn", version, about = "Particle dynamics: simulate, learn, predict, render, plan")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
pub struct GenDataArgs {
    /// TOML config; [world] and [data] sections apply
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory to create
    #[arg(long)]
    pub out: PathBuf,
    /// Number of episodes (overrides [data].episodes)
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Dataset seed (overrides [data].seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Object kind: rope, cloth, or blob (overrides [world].object)
    #[arg(long)]
    pub object: Option<String>,
    /// Frames per episode (overrides [world].frames)
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// TOML config; the [train] section applies
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory from gen-data
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for model.gdyn and report.txt
    #[arg(long)]
    pub out: PathBuf,
    /// Warm-start from an existing checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Epochs (overrides [train].epochs)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed (overrides [train].seed)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(clap::Args)]
pub struct PredictArgs {
    /// TOML config; [train] (d_v, d_e) and [predict] sections apply
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the episode to predict on
    #[arg(long)]
    pub dataset: PathBuf,
    /// Episode index within the dataset
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    /// Start frame; defaults to the model's history length
    #[arg(long)]
    pub start: Option<usize>,
    /// Prediction steps past the start frame
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct RenderArgs {
    /// TOML config; the [camera] section applies
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A .gcloud file or a directory of them
    #[arg(long)]
    pub frames: PathBuf,
    /// Output directory for PNGs
    #[arg(long)]
    pub out: PathBuf,
    /// Also write silhouette (alpha) PNGs
    #[arg(long)]
    pub alpha: bool,
}

#[derive(clap::Args)]
pub struct PlanArgs {
    /// TOML config; [world], [plan], [target], and [prep] sections apply
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// MPC steps to execute (overrides [plan].steps)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Independent planner seeds to aggregate (overrides [plan].seeds)
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Base planner seed (overrides [plan].seed)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    /// Predicted trajectory (.trk or .csv)
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth trajectory (.trk or .csv)
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for eval.txt and eval.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate scripted episodes into a dataset
    GenData(GenDataArgs),
    /// Fit the dynamics model to a dataset
    Train(TrainArgs),
    /// Roll the model forward and densify onto the Gaussian cloud
    Predict(PredictArgs),
    /// Rasterize Gaussian cloud frames to PNG
    Render(RenderArgs),
    /// Run sampling-based MPC in the simulated world
    Plan(PlanArgs),
    /// Score a trajectory against ground truth
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(args) => cmds::gen_data(args),
        Cmd::Train(args) => cmds::train(args),
        Cmd::Predict(args) => cmds::predict(args),
        Cmd::Render(args) => cmds::render_frames(args),
        Cmd::Plan(args) => cmds::plan(args),
        Cmd::Eval(args) => cmds::eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
