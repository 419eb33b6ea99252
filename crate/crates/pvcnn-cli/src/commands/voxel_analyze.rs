use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pvcnn::bench::sweep_distinguishable;
use pvcnn::cloud::{generate_synthetic, load_cloud, normalize, Generator, SyntheticSpec};
use pvcnn::error::{Error, Result};

use super::{echo_config, overlay, overlay_clone, read_config_file};

#[derive(Args)]
pub struct VoxelAnalyzeArgs {
    /// Synthetic generator for the analyzed cloud.
    #[arg(long)]
    synthetic: Option<Generator>,
    /// Cloud file to analyze (alternative to --synthetic).
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated resolutions, e.g. 2,4,8,16.
    #[arg(long)]
    resolutions: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the CSV plot data.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelAnalyzeFileConfig {
    synthetic: Option<Generator>,
    cloud: Option<PathBuf>,
    n: Option<usize>,
    seed: Option<u64>,
    resolutions: Option<String>,
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
struct ResolvedVoxelAnalyze {
    synthetic: Option<Generator>,
    cloud: Option<PathBuf>,
    n: usize,
    seed: u64,
    resolutions: Vec<usize>,
    out: PathBuf,
}

fn parse_resolutions(text: &str) -> Result<Vec<usize>> {
    let rs: std::result::Result<Vec<usize>, _> =
        text.split(',').map(|s| s.trim().parse::<usize>()).collect();
    let rs = rs.map_err(|e| Error::InvalidArgument(format!("bad resolution list '{text}': {e}")))?;
    if rs.is_empty() || rs.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "resolutions must be nonempty positive integers, got '{text}'"
        )));
    }
    Ok(rs)
}

pub fn run(args: VoxelAnalyzeArgs) -> Result<i32> {
    let file: VoxelAnalyzeFileConfig = read_config_file(&args.config)?;
    let resolutions_text = overlay_clone(
        "2,4,8,16,32,64,128,256".to_string(),
        file.resolutions,
        args.resolutions,
    );
    let cfg = ResolvedVoxelAnalyze {
        synthetic: args.synthetic.or(file.synthetic),
        cloud: args.cloud.or(file.cloud),
        n: overlay(2048, file.n, args.n),
        seed: overlay(42, file.seed, args.seed),
        resolutions: parse_resolutions(&resolutions_text)?,
        out: overlay_clone(PathBuf::from("pvcnn-out"), file.out, args.out),
    };
    echo_config("voxel-analyze", &cfg)?;

    let pc = match (&cfg.synthetic, &cfg.cloud) {
        (Some(generator), None) => {
            generate_synthetic::<f64>(&SyntheticSpec::new(*generator, cfg.n, cfg.seed, 0))?
        }
        (None, Some(path)) => load_cloud::<f64>(path)?,
        (None, None) => generate_synthetic::<f64>(&SyntheticSpec::new(
            Generator::UniformCube,
            cfg.n,
            cfg.seed,
            0,
        ))?,
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument(
                "--synthetic and --cloud are mutually exclusive".into(),
            ))
        }
    };
    let nc = normalize(&pc)?;
    let report = sweep_distinguishable::<f64>(&nc.coords_hat, nc.num_features(), &cfg.resolutions)?;

    std::fs::create_dir_all(&cfg.out)?;
    let csv_path = cfg.out.join("distinguishable.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    for row in &report.rows {
        println!(
            "r={:<4} distinguishable={:<6} fraction={:.4} bytes={}",
            row.r, row.distinguishable, row.fraction, row.bytes_estimated
        );
    }
    eprintln!("wrote {}", csv_path.display());
    Ok(0)
}
