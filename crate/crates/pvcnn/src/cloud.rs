//! Point-cloud data model, coordinate normalization into the unit cube,
//! text-file ingestion, and synthetic dataset generation for desk-scale
//! training runs.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sparse input representation: per-point coordinates, features and optional
/// class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub coords: Tensor<T>,
    pub features: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(coords: Tensor<T>, features: Tensor<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        if coords.rank() != 2 || coords.shape()[1] != 3 {
            return Err(Error::invalid(format!(
                "coords must be n×3, got {:?}",
                coords.shape()
            )));
        }
        let n = coords.shape()[0];
        if features.rank() != 2 || features.shape()[0] != n {
            return Err(Error::ShapeMismatch {
                op: "PointCloud::new",
                lhs: coords.shape().to_vec(),
                rhs: features.shape().to_vec(),
            });
        }
        if coords.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::invalid(format!(
                    "labels length {} != point count {n}",
                    l.len()
                )));
            }
        }
        Ok(Self {
            coords,
            features,
            labels,
        })
    }

    pub fn num_points(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn num_features(&self) -> usize {
        self.features.shape()[1]
    }

    /// Reorder points by `perm` (row i of the result is row perm[i] of self).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_points();
        if perm.len() != n {
            return Err(Error::invalid("permutation length mismatch"));
        }
        let c = self.num_features();
        let mut coords = Tensor::zeros([n, 3]);
        let mut features = Tensor::zeros([n, c]);
        for (i, &src) in perm.iter().enumerate() {
            for d in 0..3 {
                coords.data_mut()[i * 3 + d] = self.coords.data()[src * 3 + d];
            }
            for j in 0..c {
                features.data_mut()[i * c + j] = self.features.data()[src * c + j];
            }
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| perm.iter().map(|&src| l[src]).collect());
        PointCloud::new(coords, features, labels)
    }
}

/// Cloud with coordinates mapped into [0,1]³: translated to the gravity
/// center, scaled into the unit sphere, then affinely packed into the cube.
/// The recorded center and scale invert the map.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCloud<T> {
    pub coords_hat: Tensor<T>,
    pub features: Tensor<T>,
    pub gravity_center: Tensor<T>,
    pub scale: T,
}

impl<T: Scalar> NormalizedCloud<T> {
    pub fn num_points(&self) -> usize {
        self.coords_hat.shape()[0]
    }

    pub fn num_features(&self) -> usize {
        self.features.shape()[1]
    }

    /// Inverse map q → (2q−1)·s + center, recovering the raw coordinates.
    pub fn denormalize_coords(&self) -> Tensor<T> {
        let n = self.num_points();
        let mut out = Tensor::zeros([n, 3]);
        let two = T::from_f64(2.0);
        let one = T::one();
        for i in 0..n {
            for d in 0..3 {
                let q = self.coords_hat.data()[i * 3 + d];
                out.data_mut()[i * 3 + d] =
                    (two * q - one) * self.scale + self.gravity_center.data()[d];
            }
        }
        out
    }
}

/// Threshold below which a cloud is treated as a single degenerate blob.
const DEGENERATE_SCALE: f64 = 1e-12;

/// Map raw coordinates into [0,1]³.
///
/// Steps: translate so the arithmetic-mean gravity center is the origin,
/// divide by the max point norm s (unit sphere), then q → q/2 + 0.5. Features
/// are carried over untouched. When s < 1e−12 the cloud is degenerate: the
/// division is skipped (s := 1) and every point lands on the cube center.
pub fn normalize<T: Scalar>(pc: &PointCloud<T>) -> Result<NormalizedCloud<T>> {
    let n = pc.num_points();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let cd = pc.coords.data();
    let mut center = [T::zero(); 3];
    for i in 0..n {
        for d in 0..3 {
            center[d] = center[d] + cd[i * 3 + d];
        }
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    for c in center.iter_mut() {
        *c = *c * inv_n;
    }

    let mut s = T::zero();
    for i in 0..n {
        let mut norm_sq = T::zero();
        for d in 0..3 {
            let q = cd[i * 3 + d] - center[d];
            norm_sq = norm_sq + q * q;
        }
        let norm = norm_sq.sqrt();
        if norm > s {
            s = norm;
        }
    }

    let half = T::from_f64(0.5);
    let mut coords_hat = Tensor::zeros([n, 3]);
    if s.to_f64() < DEGENERATE_SCALE {
        s = T::one();
        coords_hat.data_mut().fill(half);
    } else {
        for i in 0..n {
            for d in 0..3 {
                let q = (cd[i * 3 + d] - center[d]) / s;
                let mapped = q * half + half;
                // Guard against the max-norm division rounding a hair past 1.
                coords_hat.data_mut()[i * 3 + d] = mapped.max(T::zero()).min(T::one());
            }
        }
    }

    Ok(NormalizedCloud {
        coords_hat,
        features: pc.features.clone(),
        gravity_center: Tensor::new([3], center.to_vec())?,
        scale: s,
    })
}

/// Synthetic cloud family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    UniformCube,
    TwoPartShape,
    MultiPrimitive,
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_cube" => Ok(Generator::UniformCube),
            "two_part_shape" => Ok(Generator::TwoPartShape),
            "multi_primitive" => Ok(Generator::MultiPrimitive),
            other => Err(Error::invalid(format!("unknown generator '{other}'"))),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Generator::UniformCube => "uniform_cube",
            Generator::TwoPartShape => "two_part_shape",
            Generator::MultiPrimitive => "multi_primitive",
        };
        write!(f, "{s}")
    }
}

/// Recipe for a deterministic synthetic cloud.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    pub seed: u64,
    pub num_classes: usize,
}

impl SyntheticSpec {
    pub fn new(generator: Generator, n: usize, seed: u64, num_classes: usize) -> Self {
        Self {
            generator,
            n,
            seed,
            num_classes,
        }
    }
}

/// Produce a deterministic synthetic cloud; features are the raw coordinates
/// (c = 3), labels are primitive membership for the labeled generators.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<PointCloud<T>> {
    if spec.n == 0 {
        return Err(Error::EmptyCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.generator {
        Generator::UniformCube => {
            let n = spec.n;
            let mut coords = Tensor::zeros([n, 3]);
            for v in coords.data_mut().iter_mut() {
                *v = T::from_f64(rng.gen::<f64>());
            }
            let features = coords.clone();
            PointCloud::new(coords, features, None)
        }
        Generator::TwoPartShape => {
            let n = spec.n;
            let n_box = n / 2;
            let mut coords = Vec::with_capacity(n * 3);
            let mut labels = Vec::with_capacity(n);
            // Box and cylinder share the x = 0 plane so the part boundary is
            // not resolvable from a single coordinate threshold alone.
            for _ in 0..n_box {
                let p = sample_box_surface(&mut rng, [-0.35, 0.0, 0.0], [0.35, 0.35, 0.35]);
                coords.extend_from_slice(&p);
                labels.push(0);
            }
            for _ in n_box..n {
                let p = sample_cylinder_surface(&mut rng, [0.3, 0.0, 0.0], 0.3, 0.35);
                coords.extend_from_slice(&p);
                labels.push(1);
            }
            let coords = Tensor::new([n, 3], coords.iter().map(|&v| T::from_f64(v)).collect())?;
            let features = coords.clone();
            PointCloud::new(coords, features, Some(labels))
        }
        Generator::MultiPrimitive => {
            let k = spec.num_classes;
            if k == 0 {
                return Err(Error::invalid("multi_primitive needs num_classes >= 1"));
            }
            let n = spec.n;
            let mut coords = Vec::with_capacity(n * 3);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i * k / n; // contiguous, roughly equal split
                let angle = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
                let center = [angle.cos(), angle.sin(), 0.0];
                let p = match class % 3 {
                    0 => sample_sphere_surface(&mut rng, center, 0.35),
                    1 => sample_box_surface(&mut rng, center, [0.3, 0.3, 0.3]),
                    _ => sample_cylinder_surface(&mut rng, center, 0.25, 0.35),
                };
                coords.extend_from_slice(&p);
                labels.push(class);
            }
            let coords = Tensor::new([n, 3], coords.iter().map(|&v| T::from_f64(v)).collect())?;
            let features = coords.clone();
            PointCloud::new(coords, features, Some(labels))
        }
    }
}

fn sample_box_surface(rng: &mut ChaCha8Rng, center: [f64; 3], half: [f64; 3]) -> [f64; 3] {
    // Faces of equal-ish area: pick axis and sign, then two in-face coords.
    let axis = rng.gen_range(0..3usize);
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for d in 0..3 {
        p[d] = if d == axis {
            sign * half[d]
        } else {
            rng.gen_range(-half[d]..half[d])
        };
    }
    [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
}

fn sample_cylinder_surface(rng: &mut ChaCha8Rng, center: [f64; 3], radius: f64, half_h: f64) -> [f64; 3] {
    let lateral = 2.0 * std::f64::consts::PI * radius * (2.0 * half_h);
    let cap = std::f64::consts::PI * radius * radius;
    let u = rng.gen::<f64>() * (lateral + 2.0 * cap);
    let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
    if u < lateral {
        let z = rng.gen_range(-half_h..half_h);
        [
            center[0] + radius * theta.cos(),
            center[1] + radius * theta.sin(),
            center[2] + z,
        ]
    } else {
        let r = radius * rng.gen::<f64>().sqrt();
        let z = if u < lateral + cap { half_h } else { -half_h };
        [
            center[0] + r * theta.cos(),
            center[1] + r * theta.sin(),
            center[2] + z,
        ]
    }
}

fn sample_sphere_surface(rng: &mut ChaCha8Rng, center: [f64; 3], radius: f64) -> [f64; 3] {
    let z = rng.gen_range(-1.0..1.0f64);
    let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
    let rho = (1.0 - z * z).max(0.0).sqrt();
    [
        center[0] + radius * rho * theta.cos(),
        center[1] + radius * rho * theta.sin(),
        center[2] + radius * z,
    ]
}

/// A family of independent draws of one synthetic spec: seeds
/// `seed0 .. seed0 + count`.
pub fn synthetic_family<T: Scalar>(
    generator: Generator,
    count: usize,
    n: usize,
    num_classes: usize,
    seed0: u64,
) -> Result<Vec<PointCloud<T>>> {
    (0..count)
        .map(|i| generate_synthetic(&SyntheticSpec::new(generator, n, seed0 + i as u64, num_classes)))
        .collect()
}

/// Canonical train/val split of a synthetic task: the run seed spreads into
/// disjoint per-cloud seed ranges for the two sets.
#[allow(clippy::type_complexity)]
pub fn synthetic_split<T: Scalar>(
    generator: Generator,
    n: usize,
    train_clouds: usize,
    val_clouds: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(Vec<PointCloud<T>>, Vec<PointCloud<T>>)> {
    let train_seed0 = seed.wrapping_mul(1000);
    let val_seed0 = train_seed0.wrapping_add(500_000);
    Ok((
        synthetic_family(generator, train_clouds, n, num_classes, train_seed0)?,
        synthetic_family(generator, val_clouds, n, num_classes, val_seed0)?,
    ))
}

/// Write a cloud as UTF-8 text: header `#pvc n=<n> c=<c> labeled=<0|1>`, then
/// one `x y z f1 … fc [label]` line per point. Floats use the shortest
/// round-trip decimal form, so save→load is bit-exact.
pub fn save_cloud<T: Scalar>(pc: &PointCloud<T>, path: &Path) -> Result<()> {
    let n = pc.num_points();
    let c = pc.num_features();
    let labeled = pc.labels.is_some();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "#pvc n={n} c={c} labeled={}", u8::from(labeled))?;
    for i in 0..n {
        let mut line = String::new();
        for d in 0..3 {
            if d > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{}", pc.coords.data()[i * 3 + d]));
        }
        for j in 0..c {
            line.push_str(&format!(" {}", pc.features.data()[i * c + j]));
        }
        if let Some(labels) = &pc.labels {
            line.push_str(&format!(" {}", labels[i]));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parse a cloud file written by [`save_cloud`]; point order is file order.
pub fn load_cloud<T: Scalar>(path: &Path) -> Result<PointCloud<T>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let header = match lines.next() {
        None => return Err(Error::EmptyCloud),
        Some(h) => h?,
    };
    let (n, c, labeled) = parse_header(&header).map_err(|msg| parse_err(1, msg))?;
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if c == 0 {
        return Err(parse_err(1, "cloud must have at least one feature channel".into()));
    }

    let mut coords = Vec::with_capacity(n * 3);
    let mut features = Vec::with_capacity(n * c);
    let mut labels = if labeled { Some(Vec::with_capacity(n)) } else { None };
    let expected_cols = 3 + c + usize::from(labeled);

    let mut count = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2; // header was line 1
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != expected_cols {
            return Err(parse_err(
                lineno,
                format!("expected {expected_cols} columns, got {}", fields.len()),
            ));
        }
        for (col, f) in fields.iter().enumerate().take(3 + c) {
            let v: f64 = f
                .parse()
                .map_err(|e| parse_err(lineno, format!("column {}: {e}", col + 1)))?;
            if col < 3 {
                coords.push(T::from_f64(v));
            } else {
                features.push(T::from_f64(v));
            }
        }
        if let Some(l) = labels.as_mut() {
            let v: usize = fields[expected_cols - 1]
                .parse()
                .map_err(|e| parse_err(lineno, format!("label: {e}")))?;
            l.push(v);
        }
        count += 1;
    }
    if count != n {
        return Err(parse_err(
            count + 1,
            format!("header declares n={n} but file has {count} points"),
        ));
    }

    PointCloud::new(Tensor::new([n, 3], coords)?, Tensor::new([n, c], features)?, labels)
}

fn parse_header(header: &str) -> std::result::Result<(usize, usize, bool), String> {
    let rest = header
        .strip_prefix("#pvc")
        .ok_or_else(|| "missing '#pvc' header".to_string())?;
    let mut n = None;
    let mut c = None;
    let mut labeled = None;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("bad header field '{field}'"))?;
        match key {
            "n" => n = Some(value.parse::<usize>().map_err(|e| e.to_string())?),
            "c" => c = Some(value.parse::<usize>().map_err(|e| e.to_string())?),
            "labeled" => {
                labeled = Some(match value {
                    "0" => false,
                    "1" => true,
                    other => return Err(format!("labeled must be 0 or 1, got '{other}'")),
                })
            }
            other => return Err(format!("unknown header key '{other}'")),
        }
    }
    match (n, c, labeled) {
        (Some(n), Some(c), Some(l)) => Ok((n, c, l)),
        _ => Err("header must declare n=, c= and labeled=".to_string()),
    }
}
