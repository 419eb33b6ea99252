use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pvcnn::battery::{run_battery, OP_GROUPS};
use pvcnn::error::{Error, Result};

use super::{echo_config, overlay, read_config_file};

#[derive(Args)]
pub struct GradcheckArgs {
    /// Relative-error tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Central-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Run a single op group (see --help for the list).
    #[arg(long)]
    op: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckFileConfig {
    tol: Option<f64>,
    eps: Option<f64>,
    op: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
struct ResolvedGradcheck {
    tol: f64,
    eps: f64,
    op: Option<String>,
}

pub fn run(args: GradcheckArgs) -> Result<i32> {
    let file: GradcheckFileConfig = read_config_file(&args.config)?;
    let cfg = ResolvedGradcheck {
        tol: overlay(1e-4, file.tol, args.tol),
        eps: overlay(1e-5, file.eps, args.eps),
        op: args.op.or(file.op),
    };
    if let Some(op) = &cfg.op {
        if !OP_GROUPS.contains(&op.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown op group '{op}'; expected one of {OP_GROUPS:?}"
            )));
        }
    }
    echo_config("gradcheck", &cfg)?;

    let reports = run_battery(cfg.eps, cfg.tol, cfg.op.as_deref());
    let mut failing = Vec::new();
    for report in &reports {
        println!("{report}");
        if !report.passed {
            failing.push(report.op_name.clone());
        }
    }
    if failing.is_empty() {
        println!("gradcheck: {} checks passed at tol {}", reports.len(), cfg.tol);
        Ok(0)
    } else {
        println!(
            "gradcheck: {} of {} checks FAILED at tol {}: {}",
            failing.len(),
            reports.len(),
            cfg.tol,
            failing.join(", ")
        );
        Ok(1)
    }
}
