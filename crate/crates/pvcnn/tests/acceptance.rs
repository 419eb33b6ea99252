//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured quantities. Run with `cargo test --test acceptance`
//! (`-- --nocapture` shows the lines for passing criteria too).

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pvcnn::battery::run_battery;
use pvcnn::bench::{bench_compare, sweep_distinguishable};
use pvcnn::cloud::{
    generate_synthetic, normalize, synthetic_split, Generator, PointCloud, SyntheticSpec,
};
use pvcnn::net::{build_pvcnn, predict_labels, DevoxMode, PVCNNConfig};
use pvcnn::nn::BnMode;
use pvcnn::tensor::{inner, Tensor};
use pvcnn::train::{evaluate_model, train, TrainConfig};
use pvcnn::voxel::{
    count_distinguishable, devoxelize_nearest, devoxelize_trilinear,
    devoxelize_trilinear_backward, trilinear_weights, voxelize, voxelize_backward, VoxelGrid,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn c01_gradient_battery() {
    let start = Instant::now();
    let reports = run_battery(1e-5, 1e-4, None);
    let elapsed = start.elapsed().as_secs_f64();
    for r in &reports {
        assert!(r.passed, "{r}");
    }
    assert!(elapsed < 60.0, "battery took {elapsed:.1}s");
    println!(
        "[acceptance] C1 gradient battery: PASS ({} checks, rel tol 1e-4, {elapsed:.1}s)",
        reports.len()
    );
}

#[test]
fn c02_conservation_over_random_clouds() {
    let ns = [1usize, 2, 17, 256, 2048];
    let rs = [1usize, 2, 7, 16];
    let mut checked = 0;
    for (i, (&n, &r)) in ns
        .iter()
        .flat_map(|n| rs.iter().map(move |r| (n, r)))
        .cycle()
        .take(100)
        .enumerate()
    {
        let mut g = rng(7000 + i as u64);
        let coords = Tensor::<f64>::random_uniform([n, 3], 0.0, 1.0, &mut g);
        let feats = Tensor::<f64>::random_uniform([n, 2], -3.0, 3.0, &mut g);
        let grid = voxelize(&coords, &feats, r).unwrap();
        for ch in 0..2 {
            let mut lhs = 0.0;
            for cell in 0..r * r * r {
                lhs += grid.counts()[cell] as f64 * grid.values().data()[cell * 2 + ch];
            }
            let rhs: f64 = (0..n).map(|k| feats.data()[k * 2 + ch]).sum();
            assert!(
                (lhs - rhs).abs() < 1e-9,
                "cloud {i} (n={n}, r={r}) channel {ch}: {lhs} vs {rhs}"
            );
        }
        checked += 1;
    }
    println!("[acceptance] C2 conservation: PASS ({checked} clouds, tol 1e-9)");
}

#[test]
fn c03_partition_of_unity() {
    let mut g = rng(7100);
    let resolutions = [1usize, 2, 3, 5, 8, 16, 64];
    let mut checked = 0;
    for i in 0..10_000 {
        let mut p = [g.gen::<f64>(), g.gen::<f64>(), g.gen::<f64>()];
        // Mix in exact boundary hits on random axes.
        if i % 5 == 0 {
            p[i % 3] = if i % 10 == 0 { 0.0 } else { 1.0 };
        }
        if i < 8 {
            // All cube corners exactly.
            p = [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64];
        }
        let r = resolutions[i % resolutions.len()];
        let tw = trilinear_weights(p, r).unwrap();
        let sum: f64 = tw.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "p={p:?} r={r}: sum {sum}");
        checked += 1;
    }
    println!("[acceptance] C3 partition of unity: PASS ({checked} points, tol 1e-12)");
}

#[test]
fn c04_adjointness() {
    for i in 0..20u64 {
        let mut g = rng(7200 + i);
        let n = 8 + (i as usize % 60);
        let r = 1 + (i as usize % 5);
        let c = 1 + (i as usize % 4);
        let coords = Tensor::<f64>::random_uniform([n, 3], 0.0, 1.0, &mut g);
        let feats = Tensor::<f64>::random_uniform([n, c], -2.0, 2.0, &mut g);

        // ⟨voxelize(F), G⟩ == ⟨F, voxelizeᵀ(G)⟩
        let grid = voxelize(&coords, &feats, r).unwrap();
        let cot_grid = Tensor::<f64>::random_uniform([r, r, r, c], -1.0, 1.0, &mut g);
        let lhs = inner(grid.values(), &cot_grid).unwrap();
        let rhs = inner(&feats, &voxelize_backward(&cot_grid, &coords, &grid).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-9, "voxelize instance {i}: {lhs} vs {rhs}");

        // ⟨devox(V), Y⟩ == ⟨V, devoxᵀ(Y)⟩
        let values = Tensor::<f64>::random_uniform([r, r, r, c], -1.0, 1.0, &mut g);
        let vg = VoxelGrid::from_parts(r, c, values.clone(), vec![1; r * r * r]).unwrap();
        let dev = devoxelize_trilinear(&vg, &coords).unwrap();
        let cot_pts = Tensor::<f64>::random_uniform([n, c], -1.0, 1.0, &mut g);
        let lhs = inner(&dev, &cot_pts).unwrap();
        let rhs = inner(
            &values,
            &devoxelize_trilinear_backward(&cot_pts, &coords, r).unwrap(),
        )
        .unwrap();
        assert!((lhs - rhs).abs() < 1e-9, "devoxelize instance {i}: {lhs} vs {rhs}");
    }
    println!("[acceptance] C4 adjointness: PASS (20 voxelize + 20 devoxelize instances, tol 1e-9)");
}

#[test]
fn c05_bruteforce_equivalence() {
    use pvcnn::bench::{knn_bruteforce, AccessCounter};
    use pvcnn::nn::{conv3d, Conv3dParams};

    for i in 0..20u64 {
        let mut g = rng(7300 + i);
        let n = 6 + (i as usize % 26);
        let r = 2 + (i as usize % 4);
        let c = 1 + (i as usize % 3);
        let coords = Tensor::<f64>::random_uniform([n, 3], 0.0, 1.0, &mut g);
        let feats = Tensor::<f64>::random_uniform([n, c], -1.0, 1.0, &mut g);

        // voxelize vs scatter-then-average oracle
        let grid = voxelize(&coords, &feats, r).unwrap();
        let mut sums = vec![0.0; r * r * r * c];
        let mut counts = vec![0u32; r * r * r];
        for k in 0..n {
            let mut idx = [0usize; 3];
            for d in 0..3 {
                idx[d] = ((coords.data()[k * 3 + d] * r as f64).floor() as usize).min(r - 1);
            }
            let cell = (idx[0] * r + idx[1]) * r + idx[2];
            counts[cell] += 1;
            for ch in 0..c {
                sums[cell * c + ch] += feats.data()[k * c + ch];
            }
        }
        for cell in 0..r * r * r {
            assert_eq!(grid.counts()[cell], counts[cell]);
            for ch in 0..c {
                let want = if counts[cell] == 0 {
                    0.0
                } else {
                    sums[cell * c + ch] / counts[cell] as f64
                };
                assert!((grid.values().data()[cell * c + ch] - want).abs() < 1e-10);
            }
        }

        // devoxelize (both modes) vs explicit oracles
        let values = Tensor::<f64>::random_uniform([r, r, r, c], -1.0, 1.0, &mut g);
        let vg = VoxelGrid::from_parts(r, c, values.clone(), vec![1; r * r * r]).unwrap();
        let tri = devoxelize_trilinear(&vg, &coords).unwrap();
        let near = devoxelize_nearest(&vg, &coords).unwrap();
        for k in 0..n {
            let p = [
                coords.data()[k * 3],
                coords.data()[k * 3 + 1],
                coords.data()[k * 3 + 2],
            ];
            let tw = trilinear_weights(p, r).unwrap();
            for ch in 0..c {
                let mut want = 0.0;
                for ([u, v, w], weight) in tw.corners(r) {
                    want += weight * values.data()[((u * r + v) * r + w) * c + ch];
                }
                assert!((tri.data()[k * c + ch] - want).abs() < 1e-10);
            }
            let mut idx = [0usize; 3];
            for d in 0..3 {
                idx[d] = ((p[d] * r as f64).floor() as usize).min(r - 1);
            }
            for ch in 0..c {
                let want = values.data()[((idx[0] * r + idx[1]) * r + idx[2]) * c + ch];
                assert_eq!(near.data()[k * c + ch], want);
            }
        }

        // knn vs full-sort oracle (exact)
        let k_nn = 1 + (i as usize % 5).min(n - 1);
        let mut counter = AccessCounter::new("oracle");
        let idx = knn_bruteforce(&coords, k_nn, &mut counter).unwrap();
        for q in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n)
                .map(|j| {
                    let mut d = 0.0;
                    for ax in 0..3 {
                        let diff = coords.data()[j * 3 + ax] - coords.data()[q * 3 + ax];
                        d += diff * diff;
                    }
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for s in 0..k_nn {
                assert_eq!(idx.neighbor(q, s), all[s].1);
            }
        }
    }

    // conv3d vs the 7-nested-loop oracle on 20 random instances.
    for i in 0..20u64 {
        let mut g = rng(7400 + i);
        let (c_in, c_out) = (1 + (i as usize % 3), 1 + ((i as usize + 1) % 3));
        let d = 2 + (i as usize % 3);
        let x = Tensor::<f64>::random_uniform([1, c_in, d, d, d], -1.0, 1.0, &mut g);
        let p = Conv3dParams::<f64> {
            weight: Tensor::random_uniform([c_out, c_in, 3, 3, 3], -0.5, 0.5, &mut g),
            bias: Tensor::random_uniform([c_out], -0.5, 0.5, &mut g),
        };
        let y = conv3d(&x, &p).unwrap();
        for oc in 0..c_out {
            for z in 0..d {
                for yy in 0..d {
                    for xx in 0..d {
                        let mut want = p.bias.data()[oc];
                        for ic in 0..c_in {
                            for kz in 0..3usize {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let iz = z as isize + kz as isize - 1;
                                        let iy = yy as isize + ky as isize - 1;
                                        let ix = xx as isize + kx as isize - 1;
                                        if iz < 0
                                            || iz >= d as isize
                                            || iy < 0
                                            || iy >= d as isize
                                            || ix < 0
                                            || ix >= d as isize
                                        {
                                            continue;
                                        }
                                        want += x.at(&[
                                            0,
                                            ic,
                                            iz as usize,
                                            iy as usize,
                                            ix as usize,
                                        ]) * p.weight.at(&[oc, ic, kz, ky, kx]);
                                    }
                                }
                            }
                        }
                        assert!((y.at(&[0, oc, z, yy, xx]) - want).abs() < 1e-10);
                    }
                }
            }
        }
    }
    println!("[acceptance] C5 brute-force equivalence: PASS (voxelize/devox×2/knn/conv3d, 20 instances each)");
}

#[test]
fn c06_access_count_ratios() {
    let n = 2048usize;
    for k in [16usize, 32, 64] {
        let report = bench_compare::<f32>(n, k, 8, 8, 42).unwrap();
        let knn = report.rows.iter().find(|r| r.config == "knn").unwrap();
        let voxel = report.rows.iter().find(|r| r.config == "voxel").unwrap();
        assert_eq!(knn.random_gathers, (k * n) as u64);
        assert_eq!(voxel.random_scatters, n as u64);
        assert_eq!(voxel.random_gathers, (8 * n) as u64);
        // Per-neighbor gathers vs per-point scatters: exactly k×.
        assert_eq!(knn.random_gathers, k as u64 * voxel.random_scatters);
        // Including devox gathers: k·n / 9n, cross-multiplied exactly.
        assert_eq!(knn.random_gathers * 9, voxel.total_indexed() * k as u64);
    }
    println!("[acceptance] C6 access-count ratios: PASS (n=2048, k in {{16,32,64}}, exact integers)");
}

#[test]
fn c07_distinguishable_sweep() {
    let spec = SyntheticSpec::new(Generator::UniformCube, 2048, 42, 0);
    let pc = generate_synthetic::<f64>(&spec).unwrap();
    let nc = normalize(&pc).unwrap();
    let resolutions: Vec<usize> = (1..=8).map(|e| 1usize << e).collect(); // 2..256
    let report = sweep_distinguishable::<f64>(&nc.coords_hat, 3, &resolutions).unwrap();
    let mut prev_fraction = 0.0;
    let mut prev_bytes = 0u64;
    for (i, row) in report.rows.iter().enumerate() {
        assert!(
            row.fraction >= prev_fraction,
            "fraction not monotone at r={}",
            row.r
        );
        if i > 0 {
            assert_eq!(row.bytes_estimated, prev_bytes * 8, "memory not cubic at r={}", row.r);
        }
        prev_fraction = row.fraction;
        prev_bytes = row.bytes_estimated;
    }
    let last = report.rows.last().unwrap();
    assert!(last.fraction >= 0.99, "r=256 fraction {}", last.fraction);
    println!(
        "[acceptance] C7 distinguishable sweep: PASS (monotone, r=256 fraction {:.4}, 8x memory per doubling)",
        last.fraction
    );
}

/// The pinned toy task: two_part_shape, 512 points per cloud, 64 train and
/// 16 validation clouds, 30 epochs, seed 1.
fn toy_task_config() -> (PVCNNConfig, TrainConfig) {
    (
        PVCNNConfig::toy_train(2),
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 5e-3,
            seed: 1,
            devox_mode: DevoxMode::Trilinear,
            voxel_convs_per_block: 2,
        },
    )
}

#[test]
fn c08_toy_training_reaches_thresholds() {
    let start = Instant::now();
    let (train_set, val_set) =
        synthetic_split::<f32>(Generator::TwoPartShape, 512, 64, 16, 2, 1).unwrap();
    let (model_cfg, tc) = toy_task_config();
    let outcome = train(&model_cfg, &train_set, &val_set, &tc).unwrap();
    let mut model = outcome.model;
    let (report, accuracy) = evaluate_model(&mut model, &val_set).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "training took {elapsed:.0}s");
    assert!(
        accuracy >= 0.95,
        "val point accuracy {accuracy:.4} below 0.95"
    );
    assert!(
        report.mean_miou >= 0.85,
        "val mIoU {:.4} below 0.85",
        report.mean_miou
    );
    println!(
        "[acceptance] C8 toy training: PASS (val acc {accuracy:.4}, mIoU {:.4}, {elapsed:.0}s)",
        report.mean_miou
    );
}

/// Shared ablation protocol: smaller clouds, coarser grid (so the voxel
/// branch carries real weight), 5 seeds.
fn ablation_miou(devox: DevoxMode, convs: usize, seed: u64) -> f64 {
    let (train_set, val_set) =
        synthetic_split::<f32>(Generator::TwoPartShape, 256, 24, 8, 2, seed).unwrap();
    let mut model_cfg = PVCNNConfig::toy_train(2);
    model_cfg.resolution_multiplier = 0.75; // r = 3
    let tc = TrainConfig {
        epochs: 12,
        batch_size: 4,
        lr: 5e-3,
        seed,
        devox_mode: devox,
        voxel_convs_per_block: convs,
    };
    let outcome = train(&model_cfg, &train_set, &val_set, &tc).unwrap();
    outcome.log.last().unwrap().val_miou
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn c09_ablation_trilinear_vs_nearest() {
    let seeds = [1u64, 2, 3, 4, 5];
    let tri: Vec<f64> = seeds
        .iter()
        .map(|&s| ablation_miou(DevoxMode::Trilinear, 2, s))
        .collect();
    let near: Vec<f64> = seeds
        .iter()
        .map(|&s| ablation_miou(DevoxMode::Nearest, 2, s))
        .collect();
    let gap = mean(&tri) - mean(&near);
    assert!(
        gap >= 0.0,
        "trilinear {:.4} < nearest {:.4}",
        mean(&tri),
        mean(&near)
    );
    println!(
        "[acceptance] C9 devoxelization ablation: PASS (trilinear {:.4} vs nearest {:.4}, gap +{gap:.4})",
        mean(&tri),
        mean(&near)
    );
}

#[test]
fn c10_ablation_two_convs_vs_one() {
    let seeds = [1u64, 2, 3, 4, 5];
    let two: Vec<f64> = seeds
        .iter()
        .map(|&s| ablation_miou(DevoxMode::Trilinear, 2, s))
        .collect();
    let one: Vec<f64> = seeds
        .iter()
        .map(|&s| ablation_miou(DevoxMode::Trilinear, 1, s))
        .collect();
    let gap = mean(&two) - mean(&one);
    assert!(gap >= 0.0, "L=2 {:.4} < L=1 {:.4}", mean(&two), mean(&one));
    println!(
        "[acceptance] C10 conv-depth ablation: PASS (2 convs {:.4} vs 1 conv {:.4}, gap +{gap:.4})",
        mean(&two),
        mean(&one)
    );
}

#[test]
fn c11_permutation_equivariance_and_duplicates() {
    let cfg = PVCNNConfig::toy_train(3);
    let mut model = build_pvcnn::<f32>(&cfg, 11).unwrap();
    model.set_mode(BnMode::Eval);

    for trial in 0..10u64 {
        let n = 96 + (trial as usize % 5) * 16;
        let spec = SyntheticSpec::new(Generator::UniformCube, n, 900 + trial, 0);
        let pc = generate_synthetic::<f32>(&spec).unwrap();
        let nc = normalize(&pc).unwrap();
        let (logits, _) = model.forward(&nc.coords_hat, &nc.features).unwrap();

        // Random permutation of the points.
        let mut perm: Vec<usize> = (0..n).collect();
        let mut g = rng(1000 + trial);
        for i in (1..n).rev() {
            perm.swap(i, g.gen_range(0..=i));
        }
        let permuted = pc.permuted(&perm).unwrap();
        let nc_p = normalize(&permuted).unwrap();
        let (logits_p, _) = model.forward(&nc_p.coords_hat, &nc_p.features).unwrap();
        let classes = logits.shape()[1];
        let mut max_diff = 0.0f32;
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..classes {
                let diff =
                    (logits_p.data()[i * classes + j] - logits.data()[src * classes + j]).abs();
                max_diff = max_diff.max(diff);
            }
        }
        assert!(max_diff <= 1e-6, "trial {trial}: permutation diff {max_diff}");

        // Duplicating every point leaves pairs equal and means unchanged.
        let doubled = PointCloud::new(
            Tensor::new(
                [2 * n, 3],
                [pc.coords.data(), pc.coords.data()].concat(),
            )
            .unwrap(),
            Tensor::new(
                [2 * n, 3],
                [pc.features.data(), pc.features.data()].concat(),
            )
            .unwrap(),
            None,
        )
        .unwrap();
        let nc_d = normalize(&doubled).unwrap();
        let (logits_d, _) = model.forward(&nc_d.coords_hat, &nc_d.features).unwrap();
        let mut max_pair_diff = 0.0f32;
        for i in 0..n {
            for j in 0..classes {
                let diff = (logits_d.data()[i * classes + j]
                    - logits_d.data()[(n + i) * classes + j])
                    .abs();
                max_pair_diff = max_pair_diff.max(diff);
            }
        }
        assert!(
            max_pair_diff <= 1e-6,
            "trial {trial}: duplicate pair diff {max_pair_diff}"
        );
    }
    println!("[acceptance] C11 permutation equivariance + duplicate consistency: PASS (10 clouds, tol 1e-6)");
}

/// Distinguishable counts reach n for separated points at high resolution
/// (supports the sweep criterion's end behavior on arbitrary clouds).
#[test]
fn distinguishable_reaches_n_for_distinct_points() {
    let spec = SyntheticSpec::new(Generator::TwoPartShape, 256, 5, 2);
    let pc = generate_synthetic::<f64>(&spec).unwrap();
    let nc = normalize(&pc).unwrap();
    let mut counts = HashMap::new();
    for i in 0..256 {
        let key = (
            nc.coords_hat.data()[i * 3].to_bits(),
            nc.coords_hat.data()[i * 3 + 1].to_bits(),
            nc.coords_hat.data()[i * 3 + 2].to_bits(),
        );
        *counts.entry(key).or_insert(0u32) += 1;
    }
    assert!(counts.values().all(|&c| c == 1), "expected distinct points");
    let d = count_distinguishable(&nc.coords_hat, 4096).unwrap();
    assert_eq!(d, 256);
}
