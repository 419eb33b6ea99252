//! The fused point/voxel convolution block and the small segmentation
//! network assembled from it.
//!
//! Each block runs a low-resolution voxel branch (voxelize → conv stack →
//! devoxelize) beside a per-point shared MLP and fuses the two by addition.
//! The network stacks blocks, max-pools a global feature, tiles it back onto
//! the points, and classifies each point with a shared-MLP head.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{normalize, NormalizedCloud, PointCloud};
use crate::error::{Error, Result};
use crate::nn::{
    batch_norm, batch_norm_backward, conv3d, conv3d_backward, leaky_relu, leaky_relu_backward,
    linear_backward, linear_forward, params_io, shared_mlp, shared_mlp_backward, BatchNormState,
    BnCache, BnMode, Conv3dParams, LinearParams, SharedMlpCache, DEFAULT_SLOPE,
};
use crate::tensor::{elementwise_add, reduce_max_backward, reduce_max_over_points, Scalar, Tensor};
use crate::voxel::{
    devoxelize_nearest_values, devoxelize_trilinear_backward, devoxelize_trilinear_values,
    voxel_index, voxelize, voxelize_backward, VoxelGrid,
};

/// How the voxel branch maps grid features back onto points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevoxMode {
    Trilinear,
    Nearest,
}

impl FromStr for DevoxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trilinear" => Ok(DevoxMode::Trilinear),
            "nearest" => Ok(DevoxMode::Nearest),
            other => Err(Error::invalid(format!("unknown devoxelization mode '{other}'"))),
        }
    }
}

impl fmt::Display for DevoxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DevoxMode::Trilinear => write!(f, "trilinear"),
            DevoxMode::Nearest => write!(f, "nearest"),
        }
    }
}

/// Base channel count and voxel resolution of one block, before multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub c_out: usize,
    pub r: usize,
}

/// Architecture description; serialized verbatim beside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PVCNNConfig {
    pub blocks: Vec<BlockSpec>,
    pub width_multiplier: f64,
    pub resolution_multiplier: f64,
    pub num_classes: usize,
    /// Base widths of the shared-MLP head after the global-feature concat.
    pub head_widths: Vec<usize>,
    /// Volumetric convolutions per block (the ablation axis; default 2).
    pub voxel_convs_per_block: usize,
    pub devox_mode: DevoxMode,
    pub activation_slope: f64,
    /// Input feature channels (3 when features are the raw coordinates).
    pub in_channels: usize,
}

impl PVCNNConfig {
    /// Three-block config mirroring the full architecture at desk scale:
    /// base channels 64/128/1024 under a 0.25 width multiplier, voxel
    /// resolutions shrinking with depth and capped at 8.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            blocks: vec![
                BlockSpec { c_out: 64, r: 8 },
                BlockSpec { c_out: 128, r: 4 },
                BlockSpec { c_out: 1024, r: 2 },
            ],
            width_multiplier: 0.25,
            resolution_multiplier: 1.0,
            num_classes,
            head_widths: vec![512, 256],
            voxel_convs_per_block: 2,
            devox_mode: DevoxMode::Trilinear,
            activation_slope: DEFAULT_SLOPE,
            in_channels: 3,
        }
    }

    /// Two-block config small enough to train on synthetic tasks in seconds.
    pub fn toy_train(num_classes: usize) -> Self {
        Self {
            blocks: vec![BlockSpec { c_out: 16, r: 4 }, BlockSpec { c_out: 32, r: 4 }],
            width_multiplier: 1.0,
            resolution_multiplier: 1.0,
            num_classes,
            head_widths: vec![32],
            voxel_convs_per_block: 2,
            devox_mode: DevoxMode::Trilinear,
            activation_slope: DEFAULT_SLOPE,
            in_channels: 3,
        }
    }

    /// Channel count after the width multiplier: round(w·c), at least 1.
    pub fn effective_channels(&self, base: usize) -> usize {
        ((self.width_multiplier * base as f64).round() as usize).max(1)
    }

    /// Resolution after the multiplier: round(m·r), at least 1.
    pub fn effective_resolution(&self, base: usize) -> usize {
        ((self.resolution_multiplier * base as f64).round() as usize).max(1)
    }

    /// Closed-form trainable parameter count of the built model.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        let mut c_prev = self.in_channels;
        for spec in &self.blocks {
            let c_out = self.effective_channels(spec.c_out);
            let mut c_in = c_prev;
            for _ in 0..self.voxel_convs_per_block {
                total += c_out * c_in * 27 + c_out; // conv weight + bias
                total += 2 * c_out; // bn gamma + beta
                c_in = c_out;
            }
            total += c_out * c_prev + c_out; // point linear
            total += 2 * c_out; // point bn
            c_prev = c_out;
        }
        let mut h_prev = 2 * c_prev; // per-point ⊕ tiled global feature
        for &w in &self.head_widths {
            let w = self.effective_channels(w);
            total += w * h_prev + w;
            h_prev = w;
        }
        total += self.num_classes * h_prev + self.num_classes;
        total
    }
}

/// Parameters of one fused point/voxel block.
#[derive(Clone, Debug)]
pub struct PVConvBlock<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub r: usize,
    pub voxel_convs: Vec<(Conv3dParams<T>, BatchNormState<T>)>,
    pub point_linear: LinearParams<T>,
    pub point_bn: BatchNormState<T>,
    pub activation_slope: f64,
    pub devox_mode: DevoxMode,
}

/// Forward state a block backward needs.
pub struct BlockCache<T> {
    mlp: SharedMlpCache<T>,
    /// Input-feature grid (carries the occupancy counts for the scatter
    /// transpose).
    grid_in: VoxelGrid<T>,
    conv_layers: Vec<ConvLayerCache<T>>,
}

struct ConvLayerCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    pre_act: Tensor<T>,
}

/// `[r,r,r,c]` grid values → `[1,c,r,r,r]` conv input.
fn grid_to_batched<T: Scalar>(values: &Tensor<T>) -> Tensor<T> {
    let s = values.shape();
    let (r, c) = (s[0], s[3]);
    let mut out = Tensor::zeros([1, c, r, r, r]);
    for u in 0..r {
        for v in 0..r {
            for w in 0..r {
                let cell = (u * r + v) * r + w;
                for ch in 0..c {
                    out.data_mut()[ch * r * r * r + cell] = values.data()[cell * c + ch];
                }
            }
        }
    }
    out
}

/// Inverse of [`grid_to_batched`].
fn batched_to_grid<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (c, r) = (s[1], s[2]);
    let mut out = Tensor::zeros([r, r, r, c]);
    let spatial = r * r * r;
    for ch in 0..c {
        for cell in 0..spatial {
            out.data_mut()[cell * c + ch] = t.data()[ch * spatial + cell];
        }
    }
    out
}

impl<T: Scalar> PVConvBlock<T> {
    /// Deterministic Kaiming init of all layers of one block.
    pub fn init(
        c_in: usize,
        c_out: usize,
        r: usize,
        convs: usize,
        slope: f64,
        devox_mode: DevoxMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut voxel_convs = Vec::with_capacity(convs);
        let mut ch = c_in;
        for _ in 0..convs {
            voxel_convs.push((
                Conv3dParams::kaiming(c_out, ch, slope, rng),
                BatchNormState::new(c_out),
            ));
            ch = c_out;
        }
        Self {
            c_in,
            c_out,
            r,
            voxel_convs,
            point_linear: LinearParams::kaiming(c_out, c_in, slope, rng),
            point_bn: BatchNormState::new(c_out),
            activation_slope: slope,
            devox_mode,
        }
    }

    /// Voxel path (voxelize → convs → devoxelize) plus point path (shared
    /// MLP), fused by addition; point order is preserved.
    pub fn forward(&mut self, coords_hat: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let slope = self.activation_slope;
        let (point_out, mlp_cache) = shared_mlp(x, &self.point_linear, &mut self.point_bn, slope)?;

        let grid_in = voxelize(coords_hat, x, self.r)?;
        let mut v = grid_to_batched(grid_in.values());
        let mut conv_layers = Vec::with_capacity(self.voxel_convs.len());
        for (conv, bn) in self.voxel_convs.iter_mut() {
            let input = v;
            let convolved = conv3d(&input, conv)?;
            let (normed, bn_cache) = batch_norm(&convolved, bn)?;
            v = leaky_relu(&normed, slope);
            conv_layers.push(ConvLayerCache {
                input,
                bn: bn_cache,
                pre_act: normed,
            });
        }
        let grid_out = batched_to_grid(&v);
        let voxel_out = match self.devox_mode {
            DevoxMode::Trilinear => devoxelize_trilinear_values(&grid_out, coords_hat)?,
            DevoxMode::Nearest => devoxelize_nearest_values(&grid_out, coords_hat)?,
        };

        let out = elementwise_add(&point_out, &voxel_out)?;
        Ok((
            out,
            BlockCache {
                mlp: mlp_cache,
                grid_in,
                conv_layers,
            },
        ))
    }

    /// Backward through both branches; parameter gradients are written into
    /// `grads` under `prefix`, the input-feature cotangent is returned.
    pub fn backward(
        &self,
        coords_hat: &Tensor<T>,
        cache: &BlockCache<T>,
        cotangent: &Tensor<T>,
        prefix: &str,
        grads: &mut BTreeMap<String, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let slope = self.activation_slope;

        // Point branch.
        let (dx_point, dw, db, dgamma, dbeta) =
            shared_mlp_backward(cotangent, &cache.mlp, &self.point_linear, &self.point_bn, slope)?;
        grads.insert(format!("{prefix}.point.weight"), dw);
        grads.insert(format!("{prefix}.point.bias"), db);
        grads.insert(format!("{prefix}.pbn.gamma"), dgamma);
        grads.insert(format!("{prefix}.pbn.beta"), dbeta);

        // Voxel branch: devoxelize transpose, conv stack in reverse, scatter
        // transpose.
        let d_grid_out = match self.devox_mode {
            DevoxMode::Trilinear => devoxelize_trilinear_backward(cotangent, coords_hat, self.r)?,
            DevoxMode::Nearest => {
                crate::voxel::devoxelize_nearest_backward(cotangent, coords_hat, self.r)?
            }
        };
        let mut d = grid_to_batched(&d_grid_out);
        for (j, ((conv, bn), layer)) in self
            .voxel_convs
            .iter()
            .zip(cache.conv_layers.iter())
            .enumerate()
            .rev()
        {
            let d_pre = leaky_relu_backward(&layer.pre_act, &d, slope);
            let (d_conv, dgamma, dbeta) = batch_norm_backward(&d_pre, &layer.bn, bn)?;
            let (d_in, dw, db) = conv3d_backward(&layer.input, conv, &d_conv)?;
            grads.insert(format!("{prefix}.vbn{j}.gamma"), dgamma);
            grads.insert(format!("{prefix}.vbn{j}.beta"), dbeta);
            grads.insert(format!("{prefix}.vconv{j}.weight"), dw);
            grads.insert(format!("{prefix}.vconv{j}.bias"), db);
            d = d_in;
        }
        let d_grid_in = batched_to_grid(&d);
        let dx_voxel = voxelize_backward(&d_grid_in, coords_hat, &cache.grid_in)?;

        elementwise_add(&dx_point, &dx_voxel)
    }
}

/// Named, ordered registry of every tensor in the network.
///
/// Head layers are plain linear → activation: after the global-feature
/// concat, the tiled columns are constant within a cloud, so a per-cloud
/// batch norm would erase them in train mode yet pass them through in eval
/// mode. Keeping the head norm-free makes both modes compute the same
/// function of the global feature.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub blocks: Vec<PVConvBlock<T>>,
    pub head: Vec<LinearParams<T>>,
    pub classifier: LinearParams<T>,
    pub activation_slope: f64,
}

struct HeadLayerCache<T> {
    input: Tensor<T>,
    pre_act: Tensor<T>,
}

/// Forward state of a whole network pass.
pub struct NetCache<T> {
    coords_hat: Tensor<T>,
    block_caches: Vec<BlockCache<T>>,
    pool_argmax: Vec<usize>,
    head_caches: Vec<HeadLayerCache<T>>,
    classifier_input: Tensor<T>,
    c_last: usize,
    n: usize,
}

/// PointNet-shaped segmentation network over PVConv blocks, built
/// deterministically from a seed.
pub fn build_pvcnn<T: Scalar>(cfg: &PVCNNConfig, seed: u64) -> Result<ModelParams<T>> {
    if cfg.num_classes == 0 {
        return Err(Error::invalid("num_classes must be >= 1"));
    }
    if cfg.blocks.is_empty() {
        return Err(Error::invalid("at least one block required"));
    }
    if cfg.voxel_convs_per_block == 0 {
        return Err(Error::invalid("voxel_convs_per_block must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = cfg.activation_slope;

    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    let mut c_prev = cfg.in_channels;
    for spec in &cfg.blocks {
        let c_out = cfg.effective_channels(spec.c_out);
        let r = cfg.effective_resolution(spec.r);
        blocks.push(PVConvBlock::init(
            c_prev,
            c_out,
            r,
            cfg.voxel_convs_per_block,
            slope,
            cfg.devox_mode,
            &mut rng,
        ));
        c_prev = c_out;
    }

    let mut head = Vec::with_capacity(cfg.head_widths.len());
    let mut h_prev = 2 * c_prev;
    for &w in &cfg.head_widths {
        let w = cfg.effective_channels(w);
        head.push(LinearParams::kaiming(w, h_prev, slope, &mut rng));
        h_prev = w;
    }
    let classifier = LinearParams::kaiming(cfg.num_classes, h_prev, slope, &mut rng);

    Ok(ModelParams {
        blocks,
        head,
        classifier,
        activation_slope: slope,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn set_mode(&mut self, mode: BnMode) {
        for block in &mut self.blocks {
            for (_, bn) in &mut block.voxel_convs {
                bn.mode = mode;
            }
            block.point_bn.mode = mode;
        }
    }

    /// Visit trainable tensors (name, tensor) in structural order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, (conv, bn)) in b.voxel_convs.iter().enumerate() {
                f(&format!("blocks.{i}.vconv{j}.weight"), &conv.weight);
                f(&format!("blocks.{i}.vconv{j}.bias"), &conv.bias);
                f(&format!("blocks.{i}.vbn{j}.gamma"), &bn.gamma);
                f(&format!("blocks.{i}.vbn{j}.beta"), &bn.beta);
            }
            f(&format!("blocks.{i}.point.weight"), &b.point_linear.weight);
            f(&format!("blocks.{i}.point.bias"), &b.point_linear.bias);
            f(&format!("blocks.{i}.pbn.gamma"), &b.point_bn.gamma);
            f(&format!("blocks.{i}.pbn.beta"), &b.point_bn.beta);
        }
        for (i, lin) in self.head.iter().enumerate() {
            f(&format!("head.{i}.weight"), &lin.weight);
            f(&format!("head.{i}.bias"), &lin.bias);
        }
        f("classifier.weight", &self.classifier.weight);
        f("classifier.bias", &self.classifier.bias);
    }

    /// Mutable visit over the same registry as [`visit`](Self::visit).
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (j, (conv, bn)) in b.voxel_convs.iter_mut().enumerate() {
                f(&format!("blocks.{i}.vconv{j}.weight"), &mut conv.weight);
                f(&format!("blocks.{i}.vconv{j}.bias"), &mut conv.bias);
                f(&format!("blocks.{i}.vbn{j}.gamma"), &mut bn.gamma);
                f(&format!("blocks.{i}.vbn{j}.beta"), &mut bn.beta);
            }
            f(&format!("blocks.{i}.point.weight"), &mut b.point_linear.weight);
            f(&format!("blocks.{i}.point.bias"), &mut b.point_linear.bias);
            f(&format!("blocks.{i}.pbn.gamma"), &mut b.point_bn.gamma);
            f(&format!("blocks.{i}.pbn.beta"), &mut b.point_bn.beta);
        }
        for (i, lin) in self.head.iter_mut().enumerate() {
            f(&format!("head.{i}.weight"), &mut lin.weight);
            f(&format!("head.{i}.bias"), &mut lin.bias);
        }
        f("classifier.weight", &mut self.classifier.weight);
        f("classifier.bias", &mut self.classifier.bias);
    }

    /// Visit trainable tensors plus the batch-norm running statistics —
    /// everything a checkpoint must carry.
    pub fn visit_with_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit(f);
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, (_, bn)) in b.voxel_convs.iter().enumerate() {
                f(&format!("blocks.{i}.vbn{j}.running_mean"), &bn.running_mean);
                f(&format!("blocks.{i}.vbn{j}.running_var"), &bn.running_var);
            }
            f(&format!("blocks.{i}.pbn.running_mean"), &b.point_bn.running_mean);
            f(&format!("blocks.{i}.pbn.running_var"), &b.point_bn.running_var);
        }
    }

    fn visit_with_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_mut(f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (j, (_, bn)) in b.voxel_convs.iter_mut().enumerate() {
                f(&format!("blocks.{i}.vbn{j}.running_mean"), &mut bn.running_mean);
                f(&format!("blocks.{i}.vbn{j}.running_var"), &mut bn.running_var);
            }
            f(&format!("blocks.{i}.pbn.running_mean"), &mut b.point_bn.running_mean);
            f(&format!("blocks.{i}.pbn.running_var"), &mut b.point_bn.running_var);
        }
    }

    /// Trainable scalar count.
    pub fn num_parameters(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }

    /// Forward over pre-normalized coordinates and row-aligned features.
    pub fn forward(&mut self, coords_hat: &Tensor<T>, features: &Tensor<T>) -> Result<(Tensor<T>, NetCache<T>)> {
        let n = features.shape()[0];
        let mut x = features.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (next, cache) = block.forward(coords_hat, &x)?;
            block_caches.push(cache);
            x = next;
        }
        let c_last = x.shape()[1];

        let (global, pool_argmax) = reduce_max_over_points(&x)?;
        let mut concat = Tensor::zeros([n, 2 * c_last]);
        for i in 0..n {
            for j in 0..c_last {
                concat.data_mut()[i * 2 * c_last + j] = x.data()[i * c_last + j];
                concat.data_mut()[i * 2 * c_last + c_last + j] = global.data()[j];
            }
        }

        let mut h = concat;
        let mut head_caches = Vec::with_capacity(self.head.len());
        let slope = self.activation_slope;
        for lin in self.head.iter() {
            let pre_act = linear_forward(&h, lin)?;
            let next = leaky_relu(&pre_act, slope);
            head_caches.push(HeadLayerCache { input: h, pre_act });
            h = next;
        }
        let logits = linear_forward(&h, &self.classifier)?;

        Ok((
            logits,
            NetCache {
                coords_hat: coords_hat.clone(),
                block_caches,
                pool_argmax,
                head_caches,
                classifier_input: h,
                c_last,
                n,
            },
        ))
    }

    /// Backward from a logits cotangent; returns named parameter gradients
    /// and the input-feature cotangent.
    pub fn backward(
        &self,
        cache: &NetCache<T>,
        d_logits: &Tensor<T>,
    ) -> Result<(BTreeMap<String, Tensor<T>>, Tensor<T>)> {
        let mut grads = BTreeMap::new();
        let slope = self.activation_slope;

        let (mut d, dw, db) =
            linear_backward(&cache.classifier_input, &self.classifier, d_logits)?;
        grads.insert("classifier.weight".to_string(), dw);
        grads.insert("classifier.bias".to_string(), db);

        for (i, (lin, layer)) in self
            .head
            .iter()
            .zip(cache.head_caches.iter())
            .enumerate()
            .rev()
        {
            let d_pre = leaky_relu_backward(&layer.pre_act, &d, slope);
            let (dx, dw, db) = linear_backward(&layer.input, lin, &d_pre)?;
            grads.insert(format!("head.{i}.weight"), dw);
            grads.insert(format!("head.{i}.bias"), db);
            d = dx;
        }

        // Split the concat cotangent into the per-point part and the tiled
        // global part; the global part is summed and routed through the max.
        let (n, c_last) = (cache.n, cache.c_last);
        let mut d_x = Tensor::zeros([n, c_last]);
        let mut d_global = Tensor::zeros([c_last]);
        for i in 0..n {
            for j in 0..c_last {
                d_x.data_mut()[i * c_last + j] = d.data()[i * 2 * c_last + j];
                d_global.data_mut()[j] =
                    d_global.data()[j] + d.data()[i * 2 * c_last + c_last + j];
            }
        }
        let d_pool = reduce_max_backward(&d_global, &cache.pool_argmax, n)?;
        let mut d_block = elementwise_add(&d_x, &d_pool)?;

        for (i, (block, bcache)) in self
            .blocks
            .iter()
            .zip(cache.block_caches.iter())
            .enumerate()
            .rev()
        {
            d_block = block.backward(
                &cache.coords_hat,
                bcache,
                &d_block,
                &format!("blocks.{i}"),
                &mut grads,
            )?;
        }

        Ok((grads, d_block))
    }

    /// Write the parameter container beside a verbatim JSON copy of the
    /// config: `model.params` and `model.config.json` under `dir`.
    pub fn save_checkpoint(&self, cfg: &PVCNNConfig, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
        self.visit_with_buffers(&mut |name, t| entries.push((name.to_string(), t.clone())));
        let refs: Vec<(String, &Tensor<T>)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        params_io::write_container(&refs, &dir.join("model.params"))?;
        let json = serde_json::to_vec_pretty(cfg)?;
        std::fs::write(dir.join("model.config.json"), json)?;
        Ok(())
    }
}

/// Load a checkpoint directory written by
/// [`ModelParams::save_checkpoint`]; every registry tensor must be present
/// with a matching shape.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(PVCNNConfig, ModelParams<T>)> {
    let config_path = dir.join("model.config.json");
    let cfg: PVCNNConfig = serde_json::from_slice(&std::fs::read(&config_path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", config_path.display())))?;
    let tensors = params_io::read_container::<T>(&dir.join("model.params"))?;
    let mut by_name: BTreeMap<String, Tensor<T>> = tensors.into_iter().collect();

    let mut model = build_pvcnn::<T>(&cfg, 0)?;
    let mut missing = Vec::new();
    let mut shape_err = None;
    model.visit_with_buffers_mut(&mut |name, t| match by_name.remove(name) {
        Some(loaded) => {
            if loaded.shape() == t.shape() {
                *t = loaded;
            } else {
                shape_err = Some(format!(
                    "tensor {name}: checkpoint shape {:?} != model shape {:?}",
                    loaded.shape(),
                    t.shape()
                ));
            }
        }
        None => missing.push(name.to_string()),
    });
    if let Some(msg) = shape_err {
        return Err(Error::Checkpoint(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing tensors: {missing:?}")));
    }
    if !by_name.is_empty() {
        let extra: Vec<&String> = by_name.keys().collect();
        return Err(Error::Checkpoint(format!("unknown tensors: {extra:?}")));
    }
    Ok((cfg, model))
}

/// Normalize once from the input coordinates and run the network; the same
/// normalized coordinates feed every block's voxelize/devoxelize.
pub fn pvcnn_forward<T: Scalar>(
    model: &mut ModelParams<T>,
    pc: &PointCloud<T>,
) -> Result<Tensor<T>> {
    let nc = normalize(pc)?;
    pvcnn_forward_normalized(model, &nc)
}

/// Forward over an already-normalized cloud.
pub fn pvcnn_forward_normalized<T: Scalar>(
    model: &mut ModelParams<T>,
    nc: &NormalizedCloud<T>,
) -> Result<Tensor<T>> {
    model.forward(&nc.coords_hat, &nc.features).map(|(logits, _)| logits)
}

/// Per-point class predictions (argmax over logits, ties to lowest class).
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Zero out one branch of a block, for the fusion-identity tests: with the
/// voxel branch silenced (γ = 0 and bias/β = 0 on its last layer) the block
/// reduces to the point branch, and vice versa.
pub fn silence_voxel_branch<T: Scalar>(block: &mut PVConvBlock<T>) {
    if let Some((conv, bn)) = block.voxel_convs.last_mut() {
        conv.bias = Tensor::zeros([block.c_out]);
        bn.gamma = Tensor::zeros([block.c_out]);
        bn.beta = Tensor::zeros([block.c_out]);
    }
}

pub fn silence_point_branch<T: Scalar>(block: &mut PVConvBlock<T>) {
    block.point_bn.gamma = Tensor::zeros([block.c_out]);
    block.point_bn.beta = Tensor::zeros([block.c_out]);
}

/// True when two points of the cloud share a voxel at resolution r (the
/// nearest-devoxelization failure mode).
pub fn has_voxel_collision<T: Scalar>(coords_hat: &Tensor<T>, r: usize) -> bool {
    let n = coords_hat.shape()[0];
    let mut seen = std::collections::HashSet::new();
    for i in 0..n {
        let p = [
            coords_hat.data()[i * 3],
            coords_hat.data()[i * 3 + 1],
            coords_hat.data()[i * 3 + 2],
        ];
        if !seen.insert(voxel_index(p, r)) {
            return true;
        }
    }
    false
}
