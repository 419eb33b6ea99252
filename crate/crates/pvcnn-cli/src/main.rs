//! `pvcnn` command line: train/eval the toy segmentation network, run the
//! gradient battery, sweep distinguishable points, and benchmark locality.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 numerical failure.

mod commands;

use clap::{Parser, Subcommand};
use pvcnn::Error;

#[derive(Parser)]
#[command(name = "pvcnn", version, about = "Point-voxel convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy segmentation network and write a checkpoint.
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint: prints the part-averaged IoU report as JSON.
    Eval(commands::eval::EvalArgs),
    /// Run the finite-difference battery over every backward pass.
    Gradcheck(commands::gradcheck::GradcheckArgs),
    /// Sweep distinguishable-point counts and voxel memory across resolutions.
    VoxelAnalyze(commands::voxel_analyze::VoxelAnalyzeArgs),
    /// Count indexed accesses of the KNN and voxel pipelines.
    Bench(commands::bench::BenchArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
        Command::VoxelAnalyze(args) => commands::voxel_analyze::run(args),
        Command::Bench(args) => commands::bench::run(args),
    };
    let code = match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => 3,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}
