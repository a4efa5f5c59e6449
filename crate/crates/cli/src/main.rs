use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod files;

use commands::*;

#[derive(Debug, Parser)]
#[command(name = "face3d", version, about = "3D keypoint face model fitting, detection and evaluation")]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a pose to every annotated face.
    FitPose(FitPoseArgs),
    /// Learn a 3D shape from 2D annotations.
    LearnShape(LearnShapeArgs),
    /// Generate synthetic scenes with keypoint detections.
    Synth(SynthArgs),
    /// Train one pose regressor per detection type.
    TrainPosereg(TrainPoseregArgs),
    /// Train the candidate scorer.
    TrainPsm(TrainPsmArgs),
    /// Detect faces in synthetic scenes.
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Sweep support thresholds and classifier kinds.
    Ablate(AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Context { seed: cli.seed, config: cli.config, out: cli.out };
    let result = match cli.command {
        Command::FitPose(a) => fit_pose(&ctx, a),
        Command::LearnShape(a) => learn_shape(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::TrainPosereg(a) => train_posereg(&ctx, a),
        Command::TrainPsm(a) => train_psm(&ctx, a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", files::error_json(&e));
            ExitCode::FAILURE
        }
    }
}
