//! Instrumented locality benchmarks: indexed-access counting for the
//! KNN-gather pipeline versus the voxel scatter/gather pipeline,
//! voxel-memory scaling sweeps, and report emission.
//!
//! An "indexed access" is any read or write at a data-dependent index,
//! counted once per feature row touched. Distance computations stream the
//! cloud sequentially and are tallied separately. Wall times are reported
//! but never asserted — only the count ratios are contracts.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{generate_synthetic, Generator, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::voxel::{count_distinguishable, devoxelize_trilinear_values_counted, voxelize_counted};

/// Tally of indexed gathers/scatters and streaming reads for one pipeline.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounter {
    pub random_gathers: u64,
    pub random_scatters: u64,
    pub sequential_reads: u64,
    pub label: String,
}

impl AccessCounter {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Self::default()
        }
    }

    pub fn total_indexed(&self) -> u64 {
        self.random_gathers + self.random_scatters
    }
}

/// Exact k-nearest-neighbor table; row i holds the indices of point i's
/// neighbors ordered by (distance, index), so the point itself leads its row
/// for duplicate-free clouds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnIndex {
    pub k: usize,
    /// Row-major n×k index table.
    pub neighbors: Vec<usize>,
}

impl KnnIndex {
    pub fn num_points(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn neighbor(&self, i: usize, j: usize) -> usize {
        self.neighbors[i * self.k + j]
    }
}

/// Exact KNN by full pairwise distances; every point-pair distance is one
/// sequential read. Ties break toward the lower index.
pub fn knn_bruteforce<T: Scalar>(
    coords: &Tensor<T>,
    k: usize,
    counter: &mut AccessCounter,
) -> Result<KnnIndex> {
    if coords.rank() != 2 || coords.shape()[1] != 3 {
        return Err(Error::invalid(format!(
            "coords must be n×3, got {:?}",
            coords.shape()
        )));
    }
    let n = coords.shape()[0];
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must be in [1, {n}], got {k}")));
    }
    let cd = coords.data();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        scratch.clear();
        let (xi, yi, zi) = (
            cd[i * 3].to_f64(),
            cd[i * 3 + 1].to_f64(),
            cd[i * 3 + 2].to_f64(),
        );
        for j in 0..n {
            let dx = cd[j * 3].to_f64() - xi;
            let dy = cd[j * 3 + 1].to_f64() - yi;
            let dz = cd[j * 3 + 2].to_f64() - zi;
            counter.sequential_reads += 1;
            scratch.push((dx * dx + dy * dy + dz * dz, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        scratch.select_nth_unstable_by(k - 1, cmp);
        scratch[..k].sort_unstable_by(cmp);
        neighbors.extend(scratch[..k].iter().map(|&(_, j)| j));
    }
    Ok(KnnIndex { k, neighbors })
}

/// Materialize every point's neighbor features: one random gather per
/// (point, neighbor) pair, n·k in total.
pub fn gather_neighbors<T: Scalar>(
    features: &Tensor<T>,
    idx: &KnnIndex,
    counter: &mut AccessCounter,
) -> Result<Tensor<T>> {
    let n = idx.num_points();
    if features.rank() != 2 || features.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "gather_neighbors",
            lhs: features.shape().to_vec(),
            rhs: vec![n, 0],
        });
    }
    let c = features.shape()[1];
    let k = idx.k;
    let mut out = Tensor::zeros([n, k, c]);
    for i in 0..n {
        for j in 0..k {
            let src = idx.neighbor(i, j);
            counter.random_gathers += 1;
            for ch in 0..c {
                out.data_mut()[(i * k + j) * c + ch] = features.data()[src * c + ch];
            }
        }
    }
    Ok(out)
}

/// One measured pipeline configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: String,
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub r: usize,
    pub random_gathers: u64,
    pub random_scatters: u64,
    pub sequential_reads: u64,
    pub wall_time_ms: f64,
    pub bytes_estimated: u64,
}

impl BenchRow {
    pub fn total_indexed(&self) -> u64 {
        self.random_gathers + self.random_scatters
    }
}

/// Collection of bench rows with CSV and JSON emission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const BENCH_CSV_HEADER: &str =
    "config,n,k,c,r,random_gathers,random_scatters,sequential_reads,wall_time_ms,bytes_estimated";

impl BenchReport {
    /// KNN gathers per voxel-path indexed access, when both pipelines are
    /// present: k·n / 9n.
    pub fn gather_ratio(&self) -> Option<f64> {
        let knn = self.rows.iter().find(|r| r.config == "knn")?;
        let voxel = self.rows.iter().find(|r| r.config == "voxel")?;
        Some(knn.random_gathers as f64 / voxel.total_indexed() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.config,
                r.n,
                r.k,
                r.c,
                r.r,
                r.random_gathers,
                r.random_scatters,
                r.sequential_reads,
                r.wall_time_ms,
                r.bytes_estimated
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == BENCH_CSV_HEADER => {}
            other => {
                return Err(Error::invalid(format!("bad bench CSV header: {other:?}")));
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::invalid(format!(
                    "bench CSV line {}: expected 10 fields, got {}",
                    i + 2,
                    f.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<u64> {
                s.parse()
                    .map_err(|e| Error::invalid(format!("bench CSV {what}: {e}")))
            };
            rows.push(BenchRow {
                config: f[0].to_string(),
                n: parse(f[1], "n")? as usize,
                k: parse(f[2], "k")? as usize,
                c: parse(f[3], "c")? as usize,
                r: parse(f[4], "r")? as usize,
                random_gathers: parse(f[5], "random_gathers")?,
                random_scatters: parse(f[6], "random_scatters")?,
                sequential_reads: parse(f[7], "sequential_reads")?,
                wall_time_ms: f[8]
                    .parse()
                    .map_err(|e| Error::invalid(format!("bench CSV wall_time: {e}")))?,
                bytes_estimated: parse(f[9], "bytes_estimated")?,
            });
        }
        Ok(Self { rows })
    }
}

/// Run voxelize + trilinear devoxelize over given features, tallying the
/// accesses in-loop: n scatters, then 8n corner gathers (r ≥ 2).
pub fn count_voxel_path<T: Scalar>(
    coords: &Tensor<T>,
    features: &Tensor<T>,
    r: usize,
    counter: &mut AccessCounter,
) -> Result<BenchRow> {
    let n = coords.shape()[0];
    let c = features.shape()[1];
    let start = Instant::now();
    let (grid, scatters) = voxelize_counted(coords, features, r)?;
    let (_, gathers) = devoxelize_trilinear_values_counted(grid.values(), coords)?;
    let wall = start.elapsed().as_secs_f64() * 1e3;
    counter.random_scatters += scatters;
    counter.random_gathers += gathers;
    Ok(BenchRow {
        config: "voxel".to_string(),
        n,
        k: 0,
        c,
        r,
        random_gathers: gathers,
        random_scatters: scatters,
        sequential_reads: 0,
        wall_time_ms: wall,
        bytes_estimated: (r * r * r * c) as u64 * T::DTYPE.size_bytes() as u64,
    })
}

/// Run the KNN pipeline (neighbor search + feature gather) with counting.
pub fn count_knn_path<T: Scalar>(
    coords: &Tensor<T>,
    features: &Tensor<T>,
    k: usize,
    counter: &mut AccessCounter,
) -> Result<BenchRow> {
    let n = coords.shape()[0];
    let c = features.shape()[1];
    let start = Instant::now();
    let before_gathers = counter.random_gathers;
    let before_reads = counter.sequential_reads;
    let idx = knn_bruteforce(coords, k, counter)?;
    gather_neighbors(features, &idx, counter)?;
    let wall = start.elapsed().as_secs_f64() * 1e3;
    Ok(BenchRow {
        config: "knn".to_string(),
        n,
        k,
        c,
        r: 0,
        random_gathers: counter.random_gathers - before_gathers,
        random_scatters: 0,
        sequential_reads: counter.sequential_reads - before_reads,
        wall_time_ms: wall,
        bytes_estimated: (n * k * c) as u64 * T::DTYPE.size_bytes() as u64,
    })
}

/// Head-to-head instrumented comparison of both pipelines on one seeded
/// uniform cloud.
pub fn bench_compare<T: Scalar>(
    n: usize,
    k: usize,
    c: usize,
    r: usize,
    seed: u64,
) -> Result<BenchReport> {
    if k > n {
        return Err(Error::invalid(format!("k={k} exceeds n={n}")));
    }
    let spec = SyntheticSpec::new(Generator::UniformCube, n, seed, 0);
    let pc = generate_synthetic::<T>(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xfea7));
    let features = Tensor::<T>::random_uniform([n, c], -1.0, 1.0, &mut rng);

    let mut knn_counter = AccessCounter::new("knn");
    let knn_row = count_knn_path(&pc.coords, &features, k, &mut knn_counter)?;
    let mut voxel_counter = AccessCounter::new("voxel");
    let voxel_row = count_voxel_path(&pc.coords, &features, r, &mut voxel_counter)?;

    Ok(BenchReport {
        rows: vec![knn_row, voxel_row],
    })
}

/// Distinguishable-point and memory figures across voxel resolutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinguishableReport {
    pub n: usize,
    pub c: usize,
    pub rows: Vec<DistinguishableRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinguishableRow {
    pub r: usize,
    pub distinguishable: usize,
    pub fraction: f64,
    pub bytes_estimated: u64,
}

pub const SWEEP_CSV_HEADER: &str = "n,c,r,distinguishable,fraction,bytes_estimated";

impl DistinguishableReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.n, self.c, row.r, row.distinguishable, row.fraction, row.bytes_estimated
            ));
        }
        out
    }
}

/// Per resolution: exclusive-occupancy count, fraction, and the analytic
/// dense-grid memory estimate r³·c·bytes_per_scalar.
pub fn sweep_distinguishable<T: Scalar>(
    coords: &Tensor<T>,
    c: usize,
    resolutions: &[usize],
) -> Result<DistinguishableReport> {
    if resolutions.is_empty() {
        return Err(Error::invalid("resolution list must be nonempty"));
    }
    let n = coords.shape()[0];
    let mut rows = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let distinguishable = count_distinguishable(coords, r)?;
        rows.push(DistinguishableRow {
            r,
            distinguishable,
            fraction: distinguishable as f64 / n as f64,
            bytes_estimated: (r * r * r * c) as u64 * T::DTYPE.size_bytes() as u64,
        });
    }
    Ok(DistinguishableReport { n, c, rows })
}
