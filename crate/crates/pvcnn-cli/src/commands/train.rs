use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pvcnn::cloud::Generator;
use pvcnn::error::{Error, Result};
use pvcnn::net::{DevoxMode, PVCNNConfig};
use pvcnn::train::{train, TrainConfig};

use super::{echo_config, load_cloud_dir, overlay, overlay_clone, read_config_file};

#[derive(Args)]
pub struct TrainArgs {
    /// Synthetic dataset generator (two_part_shape | multi_primitive).
    #[arg(long)]
    synthetic: Option<Generator>,
    /// Directory of training .pvc files (alternative to --synthetic).
    #[arg(long)]
    data_train: Option<PathBuf>,
    /// Directory of validation .pvc files.
    #[arg(long)]
    data_val: Option<PathBuf>,
    /// Points per synthetic cloud.
    #[arg(long)]
    n: Option<usize>,
    /// Synthetic training clouds.
    #[arg(long)]
    train_clouds: Option<usize>,
    /// Synthetic validation clouds.
    #[arg(long)]
    val_clouds: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Devoxelization mode (trilinear | nearest).
    #[arg(long)]
    devox: Option<DevoxMode>,
    /// Volumetric convolutions per block (1..=3).
    #[arg(long)]
    voxel_convs: Option<usize>,
    #[arg(long)]
    width_mult: Option<f64>,
    #[arg(long)]
    res_mult: Option<f64>,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    synthetic: Option<Generator>,
    data_train: Option<PathBuf>,
    data_val: Option<PathBuf>,
    n: Option<usize>,
    train_clouds: Option<usize>,
    val_clouds: Option<usize>,
    num_classes: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    devox: Option<DevoxMode>,
    voxel_convs: Option<usize>,
    width_mult: Option<f64>,
    res_mult: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
struct ResolvedTrain {
    synthetic: Option<Generator>,
    data_train: Option<PathBuf>,
    data_val: Option<PathBuf>,
    n: usize,
    train_clouds: usize,
    val_clouds: usize,
    num_classes: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    devox: DevoxMode,
    voxel_convs: usize,
    width_mult: f64,
    res_mult: f64,
    out: PathBuf,
}

pub fn run(args: TrainArgs) -> Result<i32> {
    let file: TrainFileConfig = read_config_file(&args.config)?;
    let cfg = ResolvedTrain {
        synthetic: args.synthetic.or(file.synthetic),
        data_train: args.data_train.or(file.data_train),
        data_val: args.data_val.or(file.data_val),
        n: overlay(512, file.n, args.n),
        train_clouds: overlay(64, file.train_clouds, args.train_clouds),
        val_clouds: overlay(16, file.val_clouds, args.val_clouds),
        num_classes: overlay(2, file.num_classes, args.num_classes),
        epochs: overlay(30, file.epochs, args.epochs),
        batch_size: overlay(4, file.batch_size, args.batch_size),
        lr: overlay(5e-3, file.lr, args.lr),
        seed: overlay(1, file.seed, args.seed),
        devox: overlay(DevoxMode::Trilinear, file.devox, args.devox),
        voxel_convs: overlay(2, file.voxel_convs, args.voxel_convs),
        width_mult: overlay(1.0, file.width_mult, args.width_mult),
        res_mult: overlay(1.0, file.res_mult, args.res_mult),
        out: overlay_clone(PathBuf::from("pvcnn-out"), file.out, args.out),
    };
    echo_config("train", &cfg)?;

    let (train_set, val_set) = match (&cfg.synthetic, &cfg.data_train) {
        (Some(generator), None) => pvcnn::cloud::synthetic_split::<f32>(
            *generator,
            cfg.n,
            cfg.train_clouds,
            cfg.val_clouds,
            cfg.num_classes,
            cfg.seed,
        )?,
        (None, Some(dir)) => {
            let train_set = load_cloud_dir(dir)?;
            let val_set = match &cfg.data_val {
                Some(v) => load_cloud_dir(v)?,
                None => Vec::new(),
            };
            (train_set, val_set)
        }
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument(
                "--synthetic and --data-train are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "either --synthetic or --data-train is required".into(),
            ))
        }
    };

    let num_classes = cfg.num_classes.max(
        train_set
            .iter()
            .chain(val_set.iter())
            .filter_map(|pc| pc.labels.as_ref())
            .flat_map(|l| l.iter().copied())
            .max()
            .map_or(0, |m| m + 1),
    );
    let mut model_cfg = PVCNNConfig::toy_train(num_classes);
    model_cfg.width_multiplier = cfg.width_mult;
    model_cfg.resolution_multiplier = cfg.res_mult;

    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
        devox_mode: cfg.devox,
        voxel_convs_per_block: cfg.voxel_convs,
    };
    let outcome = train::<f32>(&model_cfg, &train_set, &val_set, &tc)?;

    std::fs::create_dir_all(&cfg.out)?;
    outcome.model.save_checkpoint(&outcome.config, &cfg.out)?;
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("metrics.jsonl"))?);
    for record in &outcome.log {
        writeln!(metrics, "{}", serde_json::to_string(record)?)?;
    }
    metrics.flush()?;

    if let Some(last) = outcome.log.last() {
        eprintln!(
            "trained {} epochs: loss {:.4}, train acc {:.4}, val mIoU {:.4}",
            outcome.log.len(),
            last.loss,
            last.train_acc,
            last.val_miou
        );
    }
    Ok(0)
}
