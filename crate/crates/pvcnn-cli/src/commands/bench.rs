use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pvcnn::bench::bench_compare;
use pvcnn::error::Result;

use super::{echo_config, overlay, overlay_clone, read_config_file};

#[derive(Args)]
pub struct BenchArgs {
    /// Point count.
    #[arg(long)]
    n: Option<usize>,
    /// Neighbors per point for the KNN pipeline.
    #[arg(long)]
    k: Option<usize>,
    /// Feature channels.
    #[arg(long)]
    c: Option<usize>,
    /// Voxel resolution for the voxel pipeline.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for bench.csv and bench.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchFileConfig {
    n: Option<usize>,
    k: Option<usize>,
    c: Option<usize>,
    r: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
struct ResolvedBench {
    n: usize,
    k: usize,
    c: usize,
    r: usize,
    seed: u64,
    out: PathBuf,
}

pub fn run(args: BenchArgs) -> Result<i32> {
    let file: BenchFileConfig = read_config_file(&args.config)?;
    let cfg = ResolvedBench {
        n: overlay(2048, file.n, args.n),
        k: overlay(16, file.k, args.k),
        c: overlay(32, file.c, args.c),
        r: overlay(8, file.r, args.r),
        seed: overlay(42, file.seed, args.seed),
        out: overlay_clone(PathBuf::from("pvcnn-out"), file.out, args.out),
    };
    echo_config("bench", &cfg)?;

    let report = bench_compare::<f32>(cfg.n, cfg.k, cfg.c, cfg.r, cfg.seed)?;

    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("bench.csv"), report.to_csv())?;
    std::fs::write(
        cfg.out.join("bench.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "rows": report.rows,
            "gather_ratio": report.gather_ratio(),
        }))?,
    )?;

    for row in &report.rows {
        println!(
            "{:<6} gathers={:<9} scatters={:<6} seq_reads={:<9} wall_ms={:.3} bytes={}",
            row.config,
            row.random_gathers,
            row.random_scatters,
            row.sequential_reads,
            row.wall_time_ms,
            row.bytes_estimated
        );
    }
    if let Some(ratio) = report.gather_ratio() {
        println!("knn/voxel indexed-access ratio: {ratio:.3}");
    }
    Ok(0)
}
