//! The point↔voxel bridge: average-scatter voxelization, trilinear and
//! nearest-neighbor devoxelization with exact-transpose backwards, and the
//! distinguishable-points analyzer.
//!
//! All maps here are linear in the features and treat the coordinates as
//! constants (the floor and the interpolation weights carry no gradient).
//! Scatter accumulation runs in ascending point-index order; the backward of
//! each op is its literal transpose, which the adjointness tests certify.

use std::collections::HashMap;

use crate::cloud::NormalizedCloud;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dense r³ grid of averaged features plus integer occupancy counts.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<T> {
    r: usize,
    c: usize,
    /// Per-voxel feature means, shape [r, r, r, c]; empty voxels stay zero.
    values: Tensor<T>,
    /// Points per voxel, shape r³ flattened row-major.
    counts: Vec<u32>,
}

impl<T: Scalar> VoxelGrid<T> {
    pub fn resolution(&self) -> usize {
        self.r
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count_at(&self, u: usize, v: usize, w: usize) -> u32 {
        self.counts[(u * self.r + v) * self.r + w]
    }

    pub fn value_at(&self, u: usize, v: usize, w: usize, ch: usize) -> T {
        self.values.data()[((u * self.r + v) * self.r + w) * self.c + ch]
    }

    /// Build a grid directly from its parts (used by tests and the conv path).
    pub fn from_parts(r: usize, c: usize, values: Tensor<T>, counts: Vec<u32>) -> Result<Self> {
        if values.shape() != [r, r, r, c] || counts.len() != r * r * r {
            return Err(Error::invalid(format!(
                "grid parts inconsistent: values {:?}, counts {}, r={r}, c={c}",
                values.shape(),
                counts.len()
            )));
        }
        Ok(Self { r, c, values, counts })
    }
}

/// Voxel index of a normalized coordinate: floor(p̂·r) per axis, with the
/// closed upper boundary p̂ = 1.0 clamped into the last cell.
pub fn voxel_index<T: Scalar>(p_hat: [T; 3], r: usize) -> [usize; 3] {
    let mut idx = [0usize; 3];
    for d in 0..3 {
        let q = (p_hat[d].to_f64() * r as f64).floor() as isize;
        idx[d] = q.clamp(0, r as isize - 1) as usize;
    }
    idx
}

fn point_coord<T: Scalar>(coords: &Tensor<T>, i: usize) -> [T; 3] {
    [
        coords.data()[i * 3],
        coords.data()[i * 3 + 1],
        coords.data()[i * 3 + 2],
    ]
}

fn check_coords<T: Scalar>(coords: &Tensor<T>) -> Result<usize> {
    if coords.rank() != 2 || coords.shape()[1] != 3 {
        return Err(Error::invalid(format!(
            "coords must be n×3, got {:?}",
            coords.shape()
        )));
    }
    Ok(coords.shape()[0])
}

/// Scatter point features into an r³ grid of per-voxel means.
///
/// Also returns the number of indexed (data-dependent) writes performed,
/// which the locality benchmarks record: exactly one scatter per point.
pub fn voxelize_counted<T: Scalar>(
    coords: &Tensor<T>,
    features: &Tensor<T>,
    r: usize,
) -> Result<(VoxelGrid<T>, u64)> {
    if r == 0 {
        return Err(Error::invalid("voxel resolution must be >= 1"));
    }
    let n = check_coords(coords)?;
    if features.rank() != 2 || features.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "voxelize",
            lhs: coords.shape().to_vec(),
            rhs: features.shape().to_vec(),
        });
    }
    let c = features.shape()[1];
    // Per-voxel sums accumulate in f64 (ascending point-index order) so the
    // stored means are insensitive to point order even in f32 pipelines.
    let mut sums = vec![0.0f64; r * r * r * c];
    let mut counts = vec![0u32; r * r * r];
    let mut scatters = 0u64;
    for i in 0..n {
        let [u, v, w] = voxel_index(point_coord(coords, i), r);
        let cell = (u * r + v) * r + w;
        counts[cell] += 1;
        scatters += 1;
        let base = cell * c;
        for ch in 0..c {
            sums[base + ch] += features.data()[i * c + ch].to_f64();
        }
    }
    let mut values = Tensor::zeros([r, r, r, c]);
    for cell in 0..r * r * r {
        if counts[cell] > 0 {
            let count = counts[cell] as f64;
            for ch in 0..c {
                values.data_mut()[cell * c + ch] = T::from_f64(sums[cell * c + ch] / count);
            }
        }
    }
    Ok((VoxelGrid { r, c, values, counts }, scatters))
}

/// [`voxelize_counted`] without the access tally.
pub fn voxelize<T: Scalar>(coords: &Tensor<T>, features: &Tensor<T>, r: usize) -> Result<VoxelGrid<T>> {
    voxelize_counted(coords, features, r).map(|(g, _)| g)
}

/// Convenience wrapper taking the whole normalized cloud.
pub fn voxelize_cloud<T: Scalar>(nc: &NormalizedCloud<T>, r: usize) -> Result<VoxelGrid<T>> {
    voxelize(&nc.coords_hat, &nc.features, r)
}

/// Transpose of [`voxelize`]: each point receives its voxel's cotangent
/// divided by that voxel's occupancy. Coordinates get no gradient.
pub fn voxelize_backward<T: Scalar>(
    cotangent: &Tensor<T>,
    coords: &Tensor<T>,
    grid: &VoxelGrid<T>,
) -> Result<Tensor<T>> {
    let n = check_coords(coords)?;
    let (r, c) = (grid.r, grid.c);
    if cotangent.shape() != [r, r, r, c] {
        return Err(Error::ShapeMismatch {
            op: "voxelize_backward",
            lhs: cotangent.shape().to_vec(),
            rhs: vec![r, r, r, c],
        });
    }
    let mut grad = Tensor::zeros([n, c]);
    for i in 0..n {
        let [u, v, w] = voxel_index(point_coord(coords, i), r);
        let cell = (u * r + v) * r + w;
        let inv = T::from_f64(1.0 / grid.counts[cell] as f64);
        for ch in 0..c {
            grad.data_mut()[i * c + ch] = cotangent.data()[cell * c + ch] * inv;
        }
    }
    Ok(grad)
}

/// Interpolation footprint of one point: base corner plus up to 8 weights.
///
/// Samples live at voxel centers (u+0.5)/r; the fractional position is
/// clamped at the grid edge, so boundary points extrapolate constantly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrilinearWeights<T> {
    pub base_index: [usize; 3],
    /// Corner order: (dz of axis0, axis1, axis2) bits little-to-big as
    /// (i & 4, i & 2, i & 1) over the 8 corners. Weights sum to 1.
    pub weights: Vec<T>,
}

impl<T: Scalar> TrilinearWeights<T> {
    /// Enumerate (voxel index, weight) pairs of the footprint.
    pub fn corners(&self, r: usize) -> impl Iterator<Item = ([usize; 3], T)> + '_ {
        let single = self.weights.len() == 1;
        let [u0, v0, w0] = self.base_index;
        (0..self.weights.len()).map(move |i| {
            if single {
                ([u0, v0, w0], self.weights[0])
            } else {
                let du = (i >> 2) & 1;
                let dv = (i >> 1) & 1;
                let dw = i & 1;
                debug_assert!(u0 + du < r && v0 + dv < r && w0 + dw < r);
                ([u0 + du, v0 + dv, w0 + dw], self.weights[i])
            }
        })
    }
}

/// Trilinear corner weights of one normalized coordinate against an r³ grid
/// of center-aligned samples. Errors if the coordinate leaves [0,1]³.
pub fn trilinear_weights<T: Scalar>(p_hat: [T; 3], r: usize) -> Result<TrilinearWeights<T>> {
    if r == 0 {
        return Err(Error::invalid("voxel resolution must be >= 1"));
    }
    for d in 0..3 {
        let q = p_hat[d].to_f64();
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!(
                "normalized coordinate {q} outside [0,1] on axis {d}"
            )));
        }
    }
    if r == 1 {
        return Ok(TrilinearWeights {
            base_index: [0, 0, 0],
            weights: vec![T::one()],
        });
    }
    let mut base = [0usize; 3];
    let mut frac = [T::zero(); 3];
    for d in 0..3 {
        let q = p_hat[d].to_f64() * r as f64 - 0.5;
        let b = (q.floor() as isize).clamp(0, r as isize - 2) as usize;
        let t = (q - b as f64).clamp(0.0, 1.0);
        base[d] = b;
        frac[d] = T::from_f64(t);
    }
    let one = T::one();
    let mut weights = Vec::with_capacity(8);
    for i in 0..8 {
        let fu = if (i >> 2) & 1 == 1 { frac[0] } else { one - frac[0] };
        let fv = if (i >> 1) & 1 == 1 { frac[1] } else { one - frac[1] };
        let fw = if i & 1 == 1 { frac[2] } else { one - frac[2] };
        weights.push(fu * fv * fw);
    }
    Ok(TrilinearWeights {
        base_index: base,
        weights,
    })
}

/// Map grid features back to points by blending the 8 surrounding voxel
/// centers. Takes a raw [r,r,r,c] values tensor so the conv stack's output
/// (whose empty voxels are no longer zero) can be devoxelized too. Returns
/// the per-point features and the indexed-read tally (one gather per touched
/// corner).
pub fn devoxelize_trilinear_values_counted<T: Scalar>(
    values: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<(Tensor<T>, u64)> {
    let n = check_coords(coords)?;
    let (r, c) = grid_dims(values)?;
    let mut out = Tensor::zeros([n, c]);
    let mut gathers = 0u64;
    for i in 0..n {
        let tw = trilinear_weights(point_coord(coords, i), r)?;
        for ([u, v, w], weight) in tw.corners(r) {
            let base = ((u * r + v) * r + w) * c;
            gathers += 1;
            for ch in 0..c {
                out.data_mut()[i * c + ch] =
                    out.data_mut()[i * c + ch] + values.data()[base + ch] * weight;
            }
        }
    }
    Ok((out, gathers))
}

pub fn devoxelize_trilinear_values<T: Scalar>(
    values: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<Tensor<T>> {
    devoxelize_trilinear_values_counted(values, coords).map(|(t, _)| t)
}

pub fn devoxelize_trilinear_counted<T: Scalar>(
    grid: &VoxelGrid<T>,
    coords: &Tensor<T>,
) -> Result<(Tensor<T>, u64)> {
    devoxelize_trilinear_values_counted(&grid.values, coords)
}

pub fn devoxelize_trilinear<T: Scalar>(grid: &VoxelGrid<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    devoxelize_trilinear_counted(grid, coords).map(|(t, _)| t)
}

fn grid_dims<T: Scalar>(values: &Tensor<T>) -> Result<(usize, usize)> {
    let s = values.shape();
    if s.len() != 4 || s[0] != s[1] || s[1] != s[2] {
        return Err(Error::invalid(format!(
            "grid values must be r×r×r×c, got {s:?}"
        )));
    }
    Ok((s[0], s[3]))
}

/// Transpose of [`devoxelize_trilinear`]: scatter cotangent·weight back into
/// a grid-shaped gradient (including empty corners).
pub fn devoxelize_trilinear_backward<T: Scalar>(
    cotangent: &Tensor<T>,
    coords: &Tensor<T>,
    r: usize,
) -> Result<Tensor<T>> {
    let n = check_coords(coords)?;
    if cotangent.rank() != 2 || cotangent.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "devoxelize_trilinear_backward",
            lhs: cotangent.shape().to_vec(),
            rhs: vec![n, 0],
        });
    }
    let c = cotangent.shape()[1];
    let mut grad = Tensor::zeros([r, r, r, c]);
    for i in 0..n {
        let tw = trilinear_weights(point_coord(coords, i), r)?;
        for ([u, v, w], weight) in tw.corners(r) {
            let base = ((u * r + v) * r + w) * c;
            for ch in 0..c {
                grad.data_mut()[base + ch] =
                    grad.data_mut()[base + ch] + cotangent.data()[i * c + ch] * weight;
            }
        }
    }
    Ok(grad)
}

/// Ablation devoxelization: every point copies its containing voxel, so
/// co-located points come out identical.
pub fn devoxelize_nearest_values<T: Scalar>(
    values: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = check_coords(coords)?;
    let (r, c) = grid_dims(values)?;
    let mut out = Tensor::zeros([n, c]);
    for i in 0..n {
        let [u, v, w] = voxel_index(point_coord(coords, i), r);
        let base = ((u * r + v) * r + w) * c;
        for ch in 0..c {
            out.data_mut()[i * c + ch] = values.data()[base + ch];
        }
    }
    Ok(out)
}

pub fn devoxelize_nearest<T: Scalar>(grid: &VoxelGrid<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    devoxelize_nearest_values(&grid.values, coords)
}

/// Transpose of [`devoxelize_nearest`].
pub fn devoxelize_nearest_backward<T: Scalar>(
    cotangent: &Tensor<T>,
    coords: &Tensor<T>,
    r: usize,
) -> Result<Tensor<T>> {
    let n = check_coords(coords)?;
    let c = cotangent.shape()[1];
    let mut grad = Tensor::zeros([r, r, r, c]);
    for i in 0..n {
        let [u, v, w] = voxel_index(point_coord(coords, i), r);
        let base = ((u * r + v) * r + w) * c;
        for ch in 0..c {
            grad.data_mut()[base + ch] = grad.data_mut()[base + ch] + cotangent.data()[i * c + ch];
        }
    }
    Ok(grad)
}

/// Number of points that exclusively occupy their voxel at resolution r —
/// the points a pure volumetric model at that resolution can still tell
/// apart.
pub fn count_distinguishable<T: Scalar>(coords: &Tensor<T>, r: usize) -> Result<usize> {
    if r == 0 {
        return Err(Error::invalid("voxel resolution must be >= 1"));
    }
    let n = check_coords(coords)?;
    let mut occupancy: HashMap<[usize; 3], u32> = HashMap::new();
    for i in 0..n {
        *occupancy.entry(voxel_index(point_coord(coords, i), r)).or_insert(0) += 1;
    }
    let mut distinguishable = 0;
    for i in 0..n {
        if occupancy[&voxel_index(point_coord(coords, i), r)] == 1 {
            distinguishable += 1;
        }
    }
    Ok(distinguishable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{generate_synthetic, normalize, Generator, SyntheticSpec};
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coords_of(points: &[[f64; 3]]) -> Tensor<f64> {
        Tensor::new(
            [points.len(), 3],
            points.iter().flat_map(|p| p.iter().copied()).collect(),
        )
        .unwrap()
    }

    fn feats_of(rows: &[&[f64]]) -> Tensor<f64> {
        let c = rows[0].len();
        Tensor::new(
            [rows.len(), c],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    fn random_unit_coords(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::random_uniform([n, 3], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn voxelize_single_occupant() {
        let grid = voxelize(&coords_of(&[[0.1, 0.1, 0.1]]), &feats_of(&[&[3.0]]), 2).unwrap();
        assert_eq!(grid.value_at(0, 0, 0, 0), 3.0);
        assert_eq!(grid.count_at(0, 0, 0), 1);
        assert_eq!(grid.values().data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(grid.counts().iter().map(|&c| c as usize).sum::<usize>(), 1);
    }

    #[test]
    fn voxelize_averages_cohabitants() {
        let coords = coords_of(&[[0.1, 0.2, 0.3], [0.3, 0.1, 0.4]]);
        let grid = voxelize(&coords, &feats_of(&[&[2.0], &[4.0]]), 2).unwrap();
        assert_eq!(grid.value_at(0, 0, 0, 0), 3.0);
        assert_eq!(grid.count_at(0, 0, 0), 2);
    }

    #[test]
    fn voxelize_matches_bruteforce_scatter_oracle() {
        let coords = random_unit_coords(16, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let feats = Tensor::<f64>::random_uniform([16, 2], -1.0, 1.0, &mut rng);
        let r = 4;
        let grid = voxelize(&coords, &feats, r).unwrap();

        // Independent oracle: accumulate sums and counts per voxel, divide.
        let mut sums = vec![0.0f64; r * r * r * 2];
        let mut counts = vec![0u32; r * r * r];
        for i in 0..16 {
            let mut idx = [0usize; 3];
            for d in 0..3 {
                idx[d] = ((coords.data()[i * 3 + d] * r as f64).floor() as usize).min(r - 1);
            }
            let cell = (idx[0] * r + idx[1]) * r + idx[2];
            counts[cell] += 1;
            for ch in 0..2 {
                sums[cell * 2 + ch] += feats.data()[i * 2 + ch];
            }
        }
        for cell in 0..r * r * r {
            assert_eq!(grid.counts()[cell], counts[cell]);
            for ch in 0..2 {
                let want = if counts[cell] == 0 {
                    0.0
                } else {
                    sums[cell * 2 + ch] / counts[cell] as f64
                };
                let got = grid.values().data()[cell * 2 + ch];
                assert!((got - want).abs() < 1e-12, "cell {cell} ch {ch}");
            }
        }
    }

    #[test]
    fn voxelize_backward_splits_mean_gradient() {
        // Two points sharing a voxel each get half the cotangent.
        let coords = coords_of(&[[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]);
        let grid = voxelize(&coords, &feats_of(&[&[1.0], &[5.0]]), 2).unwrap();
        let cot = Tensor::full([2, 2, 2, 1], 1.0);
        let grad = voxelize_backward(&cot, &coords, &grid).unwrap();
        assert_eq!(grad.data(), &[0.5, 0.5]);

        // Singly-occupied voxels pass the cotangent through unchanged.
        let coords = coords_of(&[[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]);
        let grid = voxelize(&coords, &feats_of(&[&[1.0], &[5.0]]), 2).unwrap();
        let grad = voxelize_backward(&cot, &coords, &grid).unwrap();
        assert_eq!(grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn voxelize_backward_passes_grad_check() {
        let coords = random_unit_coords(12, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let feats = Tensor::<f64>::random_uniform([12, 3], -1.0, 1.0, &mut rng);
        let r = 3;
        let report = grad_check(
            "voxelize",
            &feats,
            1e-5,
            1e-4,
            |f| voxelize(&coords, f, r).unwrap().values().clone(),
            |f, cot| {
                let grid = voxelize(&coords, f, r).unwrap();
                voxelize_backward(cot, &coords, &grid).unwrap()
            },
        );
        assert!(report.passed, "{report}");
    }

    #[test]
    fn trilinear_exact_center_hit() {
        let r = 4;
        for u in 0..r {
            let q = (u as f64 + 0.5) / r as f64;
            let tw = trilinear_weights([q, q, q], r).unwrap();
            let mut total = 0.0;
            for ([a, b, c], w) in tw.corners(r) {
                if (a, b, c) == (u, u, u) {
                    assert!((w - 1.0).abs() < 1e-12);
                } else {
                    assert!(w.abs() < 1e-12);
                }
                total += w;
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_midpoint_splits_evenly() {
        let r = 4;
        // Midway between centers of voxels 1 and 2 along x, centered on y/z.
        let x = (1.0 + 0.5) / r as f64 + 0.5 / r as f64;
        let yz = (2.0 + 0.5) / r as f64;
        let tw = trilinear_weights([x, yz, yz], r).unwrap();
        let mut seen = vec![];
        for (idx, w) in tw.corners(r) {
            if w.abs() > 1e-12 {
                seen.push((idx, w));
            }
        }
        assert_eq!(seen.len(), 2);
        for (_, w) in &seen {
            assert!((w - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_matches_product_oracle() {
        let r = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let p: [f64; 3] = [
                rand::Rng::gen::<f64>(&mut rng),
                rand::Rng::gen::<f64>(&mut rng),
                rand::Rng::gen::<f64>(&mut rng),
            ];
            let tw = trilinear_weights(p, r).unwrap();
            // Oracle: explicit per-axis (1-t, t) factors multiplied out.
            let mut base = [0usize; 3];
            let mut t = [0.0f64; 3];
            for d in 0..3 {
                let q = p[d] * r as f64 - 0.5;
                let b = (q.floor() as isize).clamp(0, r as isize - 2) as usize;
                base[d] = b;
                t[d] = (q - b as f64).clamp(0.0, 1.0);
            }
            assert_eq!(tw.base_index, base);
            let mut sum = 0.0;
            for i in 0..8 {
                let fu = if (i >> 2) & 1 == 1 { t[0] } else { 1.0 - t[0] };
                let fv = if (i >> 1) & 1 == 1 { t[1] } else { 1.0 - t[1] };
                let fw = if i & 1 == 1 { t[2] } else { 1.0 - t[2] };
                let want = fu * fv * fw;
                assert!((tw.weights[i] - want).abs() < 1e-15);
                sum += tw.weights[i];
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_rejects_out_of_range() {
        assert!(trilinear_weights([1.1, 0.5, 0.5], 4).is_err());
        assert!(trilinear_weights([-0.1, 0.5, 0.5], 4).is_err());
        assert!(trilinear_weights([0.0, 1.0, 0.5], 4).is_ok());
    }

    #[test]
    fn devoxelize_constant_grid_reproduces_constant() {
        let r = 3;
        let grid = VoxelGrid::from_parts(
            r,
            2,
            Tensor::full([r, r, r, 2], 5.0),
            vec![1; r * r * r],
        )
        .unwrap();
        let coords = random_unit_coords(20, 41);
        let out = devoxelize_trilinear(&grid, &coords).unwrap();
        for &v in out.data() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn devoxelize_round_trips_single_point_at_center() {
        // A lone point moved to its voxel center gets its own feature back.
        let r = 4;
        let p = [(2.0 + 0.5) / 4.0, (1.0 + 0.5) / 4.0, (3.0 + 0.5) / 4.0];
        let coords = coords_of(&[p]);
        let feats = feats_of(&[&[2.5, -1.0]]);
        let grid = voxelize(&coords, &feats, r).unwrap();
        let out = devoxelize_trilinear(&grid, &coords).unwrap();
        for (a, b) in out.data().iter().zip(feats.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn devoxelize_matches_eight_term_oracle_and_grad_check() {
        let r = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let values = Tensor::<f64>::random_uniform([r, r, r, 2], -1.0, 1.0, &mut rng);
        let grid = VoxelGrid::from_parts(r, 2, values.clone(), vec![1; r * r * r]).unwrap();
        let coords = random_unit_coords(15, 52);
        let out = devoxelize_trilinear(&grid, &coords).unwrap();
        for i in 0..15 {
            let p = [
                coords.data()[i * 3],
                coords.data()[i * 3 + 1],
                coords.data()[i * 3 + 2],
            ];
            let tw = trilinear_weights(p, r).unwrap();
            for ch in 0..2 {
                let mut want = 0.0;
                for ([u, v, w], weight) in tw.corners(r) {
                    want += weight * values.data()[((u * r + v) * r + w) * 2 + ch];
                }
                assert!((out.data()[i * 2 + ch] - want).abs() < 1e-12);
            }
        }

        let report = grad_check(
            "devoxelize_trilinear",
            &values,
            1e-5,
            1e-4,
            |v| {
                let g = VoxelGrid::from_parts(r, 2, v.clone(), vec![1; r * r * r]).unwrap();
                devoxelize_trilinear(&g, &coords).unwrap()
            },
            |_, cot| devoxelize_trilinear_backward(cot, &coords, r).unwrap(),
        );
        assert!(report.passed, "{report}");
    }

    #[test]
    fn nearest_shares_features_within_voxel() {
        let coords = coords_of(&[[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.9, 0.9, 0.9]]);
        let feats = feats_of(&[&[1.0], &[3.0], &[10.0]]);
        let grid = voxelize(&coords, &feats, 2).unwrap();
        let out = devoxelize_nearest(&grid, &coords).unwrap();
        assert_eq!(out.data()[0], out.data()[1]); // both get the voxel mean 2.0
        assert_eq!(out.data()[0], 2.0);
        assert_eq!(out.data()[2], 10.0); // single occupant keeps its feature
    }

    #[test]
    fn nearest_matches_direct_indexing_oracle() {
        let r = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let values = Tensor::<f64>::random_uniform([r, r, r, 3], -1.0, 1.0, &mut rng);
        let grid = VoxelGrid::from_parts(r, 3, values.clone(), vec![1; r * r * r]).unwrap();
        let coords = random_unit_coords(25, 62);
        let out = devoxelize_nearest(&grid, &coords).unwrap();
        for i in 0..25 {
            let mut idx = [0usize; 3];
            for d in 0..3 {
                idx[d] = ((coords.data()[i * 3 + d] * r as f64).floor() as usize).min(r - 1);
            }
            for ch in 0..3 {
                let want = values.data()[((idx[0] * r + idx[1]) * r + idx[2]) * 3 + ch];
                assert_eq!(out.data()[i * 3 + ch], want);
            }
        }
    }

    #[test]
    fn distinguishable_counts() {
        // Pairwise-distinct voxels: all distinguishable.
        let coords = coords_of(&[[0.1, 0.1, 0.1], [0.9, 0.1, 0.1], [0.1, 0.9, 0.9]]);
        assert_eq!(count_distinguishable(&coords, 2).unwrap(), 3);
        // Identical coordinates are never exclusive at any resolution.
        let dup = coords_of(&[[0.3, 0.3, 0.3], [0.3, 0.3, 0.3]]);
        for r in [1, 2, 8, 64] {
            assert_eq!(count_distinguishable(&dup, r).unwrap(), 0);
        }
    }

    #[test]
    fn distinguishable_matches_hash_count_oracle() {
        let spec = SyntheticSpec::new(Generator::UniformCube, 2048, 42, 0);
        let pc = generate_synthetic::<f64>(&spec).unwrap();
        let nc = normalize(&pc).unwrap();
        let got = count_distinguishable(&nc.coords_hat, 8).unwrap();

        let mut occupancy: HashMap<[usize; 3], u32> = HashMap::new();
        for i in 0..2048 {
            let mut idx = [0usize; 3];
            for d in 0..3 {
                idx[d] = ((nc.coords_hat.data()[i * 3 + d] * 8.0).floor() as usize).min(7);
            }
            *occupancy.entry(idx).or_insert(0) += 1;
        }
        let want: usize = occupancy.values().filter(|&&c| c == 1).count();
        assert_eq!(got, want);
    }

    #[test]
    fn conservation_and_adjointness() {
        let coords = random_unit_coords(64, 71);
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let feats = Tensor::<f64>::random_uniform([64, 3], -2.0, 2.0, &mut rng);
        let r = 4;
        let grid = voxelize(&coords, &feats, r).unwrap();

        // Conservation: counts·values sums back to the feature sums.
        for ch in 0..3 {
            let mut lhs = 0.0;
            for cell in 0..r * r * r {
                lhs += grid.counts()[cell] as f64 * grid.values().data()[cell * 3 + ch];
            }
            let rhs: f64 = (0..64).map(|i| feats.data()[i * 3 + ch]).sum();
            assert!((lhs - rhs).abs() < 1e-9, "channel {ch}");
        }

        // Adjointness of voxelize.
        let g = Tensor::<f64>::random_uniform([r, r, r, 3], -1.0, 1.0, &mut rng);
        let lhs = crate::tensor::inner(grid.values(), &g).unwrap();
        let vb = voxelize_backward(&g, &coords, &grid).unwrap();
        let rhs = crate::tensor::inner(&feats, &vb).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);

        // Adjointness of trilinear devoxelization.
        let y = Tensor::<f64>::random_uniform([64, 3], -1.0, 1.0, &mut rng);
        let dev = devoxelize_trilinear(&grid, &coords).unwrap();
        let lhs = crate::tensor::inner(&dev, &y).unwrap();
        let db = devoxelize_trilinear_backward(&y, &coords, r).unwrap();
        let rhs = crate::tensor::inner(grid.values(), &db).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn boundary_coordinates_never_index_out_of_bounds() {
        let coords = coords_of(&[
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 0.5],
            [1.0, 0.0, 1.0],
        ]);
        let feats = feats_of(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        for r in [1, 2, 3, 7] {
            let grid = voxelize(&coords, &feats, r).unwrap();
            assert_eq!(grid.counts().iter().sum::<u32>(), 4);
            devoxelize_trilinear(&grid, &coords).unwrap();
            devoxelize_nearest(&grid, &coords).unwrap();
        }
    }
}
