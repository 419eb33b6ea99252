//! The standard finite-difference battery: every learnable operation in the
//! crate, from the voxel bridge up to the full micro network and the loss,
//! checked in f64 against central differences.
//!
//! Inputs are seeded and kept at least 1e−2 away from activation kinks so
//! the checks are deterministic and free of subgradient noise.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{grad_check, GradCheckReport};
use crate::net::{build_pvcnn, BlockSpec, DevoxMode, ModelParams, PVCNNConfig, PVConvBlock};
use crate::nn::{
    batch_norm, batch_norm_backward, conv3d, conv3d_backward, leaky_relu, leaky_relu_backward,
    shared_mlp, shared_mlp_backward, BatchNormState, Conv3dParams, LinearParams,
};
use crate::tensor::Tensor;
use crate::train::cross_entropy;
use crate::voxel::{
    devoxelize_nearest_backward, devoxelize_nearest_values, devoxelize_trilinear_backward,
    devoxelize_trilinear_values, voxelize, voxelize_backward,
};

/// The groups [`run_battery`] covers, in execution order.
pub const OP_GROUPS: [&str; 10] = [
    "voxelize",
    "devoxelize_trilinear",
    "devoxelize_nearest",
    "conv3d",
    "batch_norm",
    "leaky_relu",
    "shared_mlp",
    "pvconv",
    "pvcnn",
    "cross_entropy",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform magnitudes in [0.15, 1.0] with random signs: no value within
/// 1e−2 of the leaky-ReLU kink.
fn kink_free(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let mag = Tensor::<f64>::random_uniform(shape.to_vec(), 0.15, 1.0, &mut r);
    let sign = Tensor::<f64>::random_uniform(shape.to_vec(), 0.0, 1.0, &mut r);
    mag.zip_map(&sign, "kink_free", |m, s| if s < 0.5 { -m } else { m })
        .expect("same shape")
}

fn micro_net_config() -> PVCNNConfig {
    PVCNNConfig {
        blocks: vec![BlockSpec { c_out: 4, r: 2 }, BlockSpec { c_out: 8, r: 2 }],
        width_multiplier: 1.0,
        resolution_multiplier: 1.0,
        num_classes: 3,
        head_widths: vec![8],
        voxel_convs_per_block: 2,
        devox_mode: DevoxMode::Trilinear,
        activation_slope: 0.1,
        in_channels: 3,
    }
}

/// Check one named parameter of the micro network by substitution.
fn check_net_param(
    reports: &mut Vec<GradCheckReport>,
    model: &ModelParams<f64>,
    coords: &Tensor<f64>,
    features: &Tensor<f64>,
    name: &'static str,
    epsilon: f64,
    tolerance: f64,
) {
    let mut current = None;
    model.visit(&mut |n, t| {
        if n == name {
            current = Some(t.clone());
        }
    });
    let current = current.expect("registry name exists");
    let substitute = |value: &Tensor<f64>| {
        let mut m = model.clone();
        m.visit_mut(&mut |n, t| {
            if n == name {
                *t = value.clone();
            }
        });
        m
    };
    reports.push(grad_check(
        &format!("pvcnn/{name}"),
        &current,
        epsilon,
        tolerance,
        |value| substitute(value).forward(coords, features).unwrap().0,
        |value, cot| {
            let mut m = substitute(value);
            let (_, cache) = m.forward(coords, features).unwrap();
            let (grads, _) = m.backward(&cache, cot).unwrap();
            grads[name].clone()
        },
    ));
}

/// Run the battery (optionally one group) and return the per-tensor reports.
pub fn run_battery(epsilon: f64, tolerance: f64, only: Option<&str>) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let want = |group: &str| only.map_or(true, |o| o == group);

    let coords16 = Tensor::<f64>::random_uniform([16, 3], 0.0, 1.0, &mut rng(201));

    if want("voxelize") {
        let feats = kink_free(&[16, 3], 202);
        reports.push(grad_check(
            "voxelize/features",
            &feats,
            epsilon,
            tolerance,
            |f| voxelize(&coords16, f, 3).unwrap().values().clone(),
            |f, cot| {
                let grid = voxelize(&coords16, f, 3).unwrap();
                voxelize_backward(cot, &coords16, &grid).unwrap()
            },
        ));
    }

    if want("devoxelize_trilinear") {
        let values = kink_free(&[4, 4, 4, 2], 203);
        reports.push(grad_check(
            "devoxelize_trilinear/values",
            &values,
            epsilon,
            tolerance,
            |v| devoxelize_trilinear_values(v, &coords16).unwrap(),
            |_, cot| devoxelize_trilinear_backward(cot, &coords16, 4).unwrap(),
        ));
    }

    if want("devoxelize_nearest") {
        let values = kink_free(&[4, 4, 4, 2], 204);
        reports.push(grad_check(
            "devoxelize_nearest/values",
            &values,
            epsilon,
            tolerance,
            |v| devoxelize_nearest_values(v, &coords16).unwrap(),
            |_, cot| devoxelize_nearest_backward(cot, &coords16, 4).unwrap(),
        ));
    }

    if want("conv3d") {
        let x = kink_free(&[1, 2, 3, 3, 3], 205);
        let weight = kink_free(&[3, 2, 3, 3, 3], 206).scale(0.5);
        let bias = kink_free(&[3], 207).scale(0.3);
        let params = |w: &Tensor<f64>, b: &Tensor<f64>| Conv3dParams {
            weight: w.clone(),
            bias: b.clone(),
        };
        reports.push(grad_check(
            "conv3d/x",
            &x,
            epsilon,
            tolerance,
            |x| conv3d(x, &params(&weight, &bias)).unwrap(),
            |x, cot| conv3d_backward(x, &params(&weight, &bias), cot).unwrap().0,
        ));
        reports.push(grad_check(
            "conv3d/weight",
            &weight,
            epsilon,
            tolerance,
            |w| conv3d(&x, &params(w, &bias)).unwrap(),
            |w, cot| conv3d_backward(&x, &params(w, &bias), cot).unwrap().1,
        ));
        reports.push(grad_check(
            "conv3d/bias",
            &bias,
            epsilon,
            tolerance,
            |b| conv3d(&x, &params(&weight, b)).unwrap(),
            |b, cot| conv3d_backward(&x, &params(&weight, b), cot).unwrap().2,
        ));
    }

    if want("batch_norm") {
        let x = kink_free(&[6, 3], 208);
        let gamma = Tensor::<f64>::random_uniform([3], 0.6, 1.4, &mut rng(209));
        let beta = kink_free(&[3], 210).scale(0.4);
        let fresh = |g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut s = BatchNormState::<f64>::new(3);
            s.gamma = g.clone();
            s.beta = b.clone();
            s
        };
        reports.push(grad_check(
            "batch_norm/x",
            &x,
            epsilon,
            tolerance,
            |x| batch_norm(x, &mut fresh(&gamma, &beta)).unwrap().0,
            |x, cot| {
                let mut s = fresh(&gamma, &beta);
                let (_, cache) = batch_norm(x, &mut s).unwrap();
                batch_norm_backward(cot, &cache, &s).unwrap().0
            },
        ));
        reports.push(grad_check(
            "batch_norm/gamma",
            &gamma,
            epsilon,
            tolerance,
            |g| batch_norm(&x, &mut fresh(g, &beta)).unwrap().0,
            |g, cot| {
                let mut s = fresh(g, &beta);
                let (_, cache) = batch_norm(&x, &mut s).unwrap();
                batch_norm_backward(cot, &cache, &s).unwrap().1
            },
        ));
        reports.push(grad_check(
            "batch_norm/beta",
            &beta,
            epsilon,
            tolerance,
            |b| batch_norm(&x, &mut fresh(&gamma, b)).unwrap().0,
            |b, cot| {
                let mut s = fresh(&gamma, b);
                let (_, cache) = batch_norm(&x, &mut s).unwrap();
                batch_norm_backward(cot, &cache, &s).unwrap().2
            },
        ));
    }

    if want("leaky_relu") {
        let x = kink_free(&[24], 211);
        reports.push(grad_check(
            "leaky_relu/x",
            &x,
            epsilon,
            tolerance,
            |x| leaky_relu(x, 0.1),
            |x, cot| leaky_relu_backward(x, cot, 0.1),
        ));
    }

    if want("shared_mlp") {
        let x = kink_free(&[8, 3], 212);
        let lin = LinearParams::<f64>::kaiming(5, 3, 0.1, &mut rng(213));
        let fresh = || BatchNormState::<f64>::new(5);
        reports.push(grad_check(
            "shared_mlp/x",
            &x,
            epsilon,
            tolerance,
            |x| shared_mlp(x, &lin, &mut fresh(), 0.1).unwrap().0,
            |x, cot| {
                let mut bn = fresh();
                let (_, cache) = shared_mlp(x, &lin, &mut bn, 0.1).unwrap();
                shared_mlp_backward(cot, &cache, &lin, &bn, 0.1).unwrap().0
            },
        ));
        reports.push(grad_check(
            "shared_mlp/weight",
            &lin.weight,
            epsilon,
            tolerance,
            |w| {
                let p = LinearParams {
                    weight: w.clone(),
                    bias: lin.bias.clone(),
                };
                shared_mlp(&x, &p, &mut fresh(), 0.1).unwrap().0
            },
            |w, cot| {
                let p = LinearParams {
                    weight: w.clone(),
                    bias: lin.bias.clone(),
                };
                let mut bn = fresh();
                let (_, cache) = shared_mlp(&x, &p, &mut bn, 0.1).unwrap();
                shared_mlp_backward(cot, &cache, &p, &bn, 0.1).unwrap().1
            },
        ));
    }

    if want("pvconv") {
        let coords = Tensor::<f64>::random_uniform([32, 3], 0.0, 1.0, &mut rng(214));
        let x = kink_free(&[32, 4], 215);
        let block =
            PVConvBlock::<f64>::init(4, 8, 4, 2, 0.1, DevoxMode::Trilinear, &mut rng(216));
        reports.push(grad_check(
            "pvconv/x",
            &x,
            epsilon,
            tolerance,
            |x| block.clone().forward(&coords, x).unwrap().0,
            |x, cot| {
                let mut b = block.clone();
                let (_, cache) = b.forward(&coords, x).unwrap();
                let mut grads = BTreeMap::new();
                b.backward(&coords, &cache, cot, "b", &mut grads).unwrap()
            },
        ));
    }

    if want("pvcnn") {
        let cfg = micro_net_config();
        let model = build_pvcnn::<f64>(&cfg, 42).unwrap();
        let coords = Tensor::<f64>::random_uniform([16, 3], 0.0, 1.0, &mut rng(217));
        let features = kink_free(&[16, 3], 218);
        reports.push(grad_check(
            "pvcnn/features",
            &features,
            epsilon,
            tolerance,
            |f| model.clone().forward(&coords, f).unwrap().0,
            |f, cot| {
                let mut m = model.clone();
                let (_, cache) = m.forward(&coords, f).unwrap();
                m.backward(&cache, cot).unwrap().1
            },
        ));
        check_net_param(
            &mut reports,
            &model,
            &coords,
            &features,
            "blocks.0.vconv0.weight",
            epsilon,
            tolerance,
        );
        check_net_param(
            &mut reports,
            &model,
            &coords,
            &features,
            "classifier.weight",
            epsilon,
            tolerance,
        );
    }

    if want("cross_entropy") {
        let logits = kink_free(&[6, 4], 219).scale(2.0);
        let labels = [0usize, 3, 1, 2, 2, 0];
        reports.push(grad_check(
            "cross_entropy/logits",
            &logits,
            epsilon,
            tolerance,
            |l| Tensor::scalar(cross_entropy(l, &labels).unwrap().0),
            |l, cot| {
                let (_, grad) = cross_entropy(l, &labels).unwrap();
                grad.scale(cot.data()[0])
            },
        ));
    }

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_battery_passes_at_default_tolerance() {
        let reports = run_battery(1e-5, 1e-4, None);
        assert_eq!(reports.len(), 17);
        for r in &reports {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn filter_selects_single_group() {
        let reports = run_battery(1e-5, 1e-4, Some("voxelize"));
        assert_eq!(reports.len(), 1);
        assert!(reports[0].op_name.starts_with("voxelize"));
    }

    #[test]
    fn absurd_tolerance_reports_failures() {
        let reports = run_battery(1e-5, 1e-18, None);
        assert!(reports.iter().any(|r| !r.passed));
    }
}
