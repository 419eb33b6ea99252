pub mod bench;
pub mod eval;
pub mod gradcheck;
pub mod train;
pub mod voxel_analyze;

use std::path::{Path, PathBuf};

use pvcnn::cloud::{load_cloud, PointCloud};
use pvcnn::error::{Error, Result};

/// Merge precedence shared by every command: defaults ← config file ← flags.
pub fn overlay<T: Copy>(default: T, file: Option<T>, flag: Option<T>) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn overlay_clone<T: Clone>(default: T, file: Option<T>, flag: Option<T>) -> T {
    flag.or(file).unwrap_or(default)
}

/// Echo the fully-resolved configuration as one JSON line on stdout.
pub fn echo_config<C: serde::Serialize>(command: &str, cfg: &C) -> Result<()> {
    let line = serde_json::json!({ "command": command, "config": cfg });
    println!("{line}");
    Ok(())
}

pub fn read_config_file<C: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        }
    }
}

/// Load every `*.pvc` file under a directory, sorted by file name.
pub fn load_cloud_dir(dir: &Path) -> Result<Vec<PointCloud<f32>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pvc"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .pvc files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_cloud::<f32>(p)).collect()
}
