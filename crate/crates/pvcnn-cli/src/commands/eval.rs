use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pvcnn::cloud::Generator;
use pvcnn::error::{Error, Result};
use pvcnn::net::load_checkpoint;
use pvcnn::train::evaluate_model;

use super::{echo_config, load_cloud_dir, overlay, read_config_file};

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint directory (model.params + model.config.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Synthetic dataset generator to evaluate on.
    #[arg(long)]
    synthetic: Option<Generator>,
    /// Directory of labeled .pvc files (alternative to --synthetic).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    clouds: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalFileConfig {
    checkpoint: Option<PathBuf>,
    synthetic: Option<Generator>,
    data: Option<PathBuf>,
    n: Option<usize>,
    clouds: Option<usize>,
    num_classes: Option<usize>,
    seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
struct ResolvedEval {
    checkpoint: PathBuf,
    synthetic: Option<Generator>,
    data: Option<PathBuf>,
    n: usize,
    clouds: usize,
    num_classes: usize,
    seed: u64,
}

pub fn run(args: EvalArgs) -> Result<i32> {
    let file: EvalFileConfig = read_config_file(&args.config)?;
    let checkpoint = args
        .checkpoint
        .or(file.checkpoint)
        .ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
    let cfg = ResolvedEval {
        checkpoint,
        synthetic: args.synthetic.or(file.synthetic),
        data: args.data.or(file.data),
        n: overlay(512, file.n, args.n),
        clouds: overlay(16, file.clouds, args.clouds),
        num_classes: overlay(2, file.num_classes, args.num_classes),
        seed: overlay(1, file.seed, args.seed),
    };
    echo_config("eval", &cfg)?;

    let clouds = match (&cfg.synthetic, &cfg.data) {
        (Some(generator), None) => {
            // The validation half of the canonical split for this seed.
            let (_, val) = pvcnn::cloud::synthetic_split::<f32>(
                *generator,
                cfg.n,
                0,
                cfg.clouds,
                cfg.num_classes,
                cfg.seed,
            )?;
            val
        }
        (None, Some(dir)) => load_cloud_dir(dir)?,
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --synthetic or --data is required".into(),
            ))
        }
    };

    let (_, mut model) = load_checkpoint::<f32>(&cfg.checkpoint)?;
    let (report, accuracy) = evaluate_model(&mut model, &clouds)?;
    let line = serde_json::json!({
        "mean_miou": report.mean_miou,
        "point_accuracy": accuracy,
        "per_shape_miou": report.per_shape_miou,
        "per_class_iou": report.per_class_iou,
    });
    println!("{line}");
    Ok(0)
}
