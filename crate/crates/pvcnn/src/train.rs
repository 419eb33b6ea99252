//! Loss, optimizer, the training loop for the toy segmentation tasks, and
//! the part-averaged IoU evaluation protocol.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{normalize, NormalizedCloud, PointCloud};
use crate::error::{Error, Result};
use crate::net::{build_pvcnn, predict_labels, DevoxMode, ModelParams, PVCNNConfig};
use crate::nn::BnMode;
use crate::tensor::{Scalar, Tensor};

/// Mean cross-entropy over points with max-subtraction stabilization.
///
/// Returns the loss and the logits cotangent `(softmax − onehot)/n`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros([n, classes]);
    let inv_n = T::from_f64(1.0 / n as f64);
    for i in 0..n {
        let label = labels[i];
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: classes,
            });
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut denom = T::zero();
        for &v in row.iter() {
            denom = denom + (v - max).exp();
        }
        loss = loss - ((row[label] - max) - denom.ln()) * inv_n;
        for j in 0..classes {
            let softmax = (row[j] - max).exp() / denom;
            let onehot = if j == label { T::one() } else { T::zero() };
            grad.data_mut()[i * classes + j] = (softmax - onehot) * inv_n;
        }
    }
    Ok((loss, grad))
}

/// Bias-corrected Adam over the model's named parameter registry.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Advance the shared step counter; call once per batch before updating
    /// tensors.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one named tensor in place. Parameters are independent, so any
    /// deterministic visiting order yields identical results.
    pub fn update_tensor(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.epsilon);
        for i in 0..param.len() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * g;
            let vi = b2 * v.data()[i] + (one - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            param.data_mut()[i] = param.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// One optimizer step over every trainable tensor; parameters without a
    /// gradient entry are treated as zero-gradient.
    pub fn step_model(
        &mut self,
        model: &mut ModelParams<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.begin_step();
        let mut failure = None;
        let zero_like: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let _ = &zero_like;
        let mut this = std::mem::replace(self, AdamState::new(0.0));
        model.visit_mut(&mut |name, param| {
            if failure.is_some() {
                return;
            }
            let result = match grads.get(name) {
                Some(g) => this.update_tensor(name, param, g),
                None => {
                    let zero = Tensor::zeros(param.shape().to_vec());
                    this.update_tensor(name, param, &zero)
                }
            };
            if let Err(e) = result {
                failure = Some(e);
            }
        });
        *self = this;
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Part-averaged IoU: per-shape mean of per-class IoU, averaged over shapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_shape_miou: Vec<f64>,
    pub mean_miou: f64,
    pub per_class_iou: Vec<ClassIoU>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassIoU {
    pub class: usize,
    pub iou: f64,
}

/// Compute the part-averaged IoU.
///
/// Per shape, the candidate classes are `parts_per_shape` when given and the
/// classes present in that shape's prediction or ground truth otherwise.
/// Classes with an empty union in a shape are skipped; the shape score is
/// the mean over its counted classes, and `mean_miou` averages the shapes.
pub fn evaluate_miou(
    preds: &[Vec<usize>],
    gts: &[Vec<usize>],
    parts_per_shape: Option<&[Vec<usize>]>,
) -> Result<IoUReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "prediction/ground-truth shape count mismatch: {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(parts) = parts_per_shape {
        if parts.len() != preds.len() {
            return Err(Error::invalid("parts_per_shape length mismatch"));
        }
    }
    let mut per_shape = Vec::with_capacity(preds.len());
    let mut class_sum: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (s, (pred, gt)) in preds.iter().zip(gts.iter()).enumerate() {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!(
                "shape {s}: prediction has {} points, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let candidates: Vec<usize> = match parts_per_shape {
            Some(parts) => parts[s].clone(),
            None => {
                let mut c: Vec<usize> = pred.iter().chain(gt.iter()).copied().collect();
                c.sort_unstable();
                c.dedup();
                c
            }
        };
        let mut total = 0.0;
        let mut counted = 0usize;
        for &class in &candidates {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&p, &g) in pred.iter().zip(gt.iter()) {
                let in_p = p == class;
                let in_g = g == class;
                if in_p && in_g {
                    inter += 1;
                }
                if in_p || in_g {
                    union += 1;
                }
            }
            if union == 0 {
                continue;
            }
            let iou = inter as f64 / union as f64;
            total += iou;
            counted += 1;
            let entry = class_sum.entry(class).or_insert((0.0, 0));
            entry.0 += iou;
            entry.1 += 1;
        }
        // A shape with no counted candidate classes is vacuously correct.
        per_shape.push(if counted == 0 { 1.0 } else { total / counted as f64 });
    }
    let mean_miou = per_shape.iter().sum::<f64>() / per_shape.len().max(1) as f64;
    let per_class_iou = class_sum
        .into_iter()
        .map(|(class, (sum, count))| ClassIoU {
            class,
            iou: sum / count as f64,
        })
        .collect();
    Ok(IoUReport {
        per_shape_miou: per_shape,
        mean_miou,
        per_class_iou,
    })
}

/// Fraction of points labeled correctly, over all shapes.
pub fn point_accuracy(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (pred, gt) in preds.iter().zip(gts.iter()) {
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            total += 1;
            if p == g {
                correct += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Training-run description; the ablation flags override the model config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub devox_mode: DevoxMode,
    pub voxel_convs_per_block: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 5e-3,
            seed: 1,
            devox_mode: DevoxMode::Trilinear,
            voxel_convs_per_block: 2,
        }
    }
}

/// One metric-log line per epoch (serialized as JSON lines).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_miou: f64,
}

pub struct TrainOutcome<T> {
    pub model: ModelParams<T>,
    pub config: PVCNNConfig,
    pub log: Vec<EpochRecord>,
}

fn labeled_or_err<T: Scalar>(clouds: &[PointCloud<T>]) -> Result<Vec<&Vec<usize>>> {
    clouds
        .iter()
        .map(|pc| {
            pc.labels
                .as_ref()
                .ok_or_else(|| Error::invalid("training requires labeled clouds"))
        })
        .collect()
}

/// Deterministic training loop: fixed init from the seed, fixed shuffling,
/// per-cloud forward/backward with batch-averaged gradients, per-epoch
/// validation mIoU in eval mode.
pub fn train<T: Scalar>(
    model_cfg: &PVCNNConfig,
    train_data: &[PointCloud<T>],
    val_data: &[PointCloud<T>],
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if train_data.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if tc.epochs == 0 || tc.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    let train_labels = labeled_or_err(train_data)?;
    let val_labels = labeled_or_err(val_data)?;

    let mut cfg = model_cfg.clone();
    cfg.devox_mode = tc.devox_mode;
    cfg.voxel_convs_per_block = tc.voxel_convs_per_block;
    let mut model = build_pvcnn::<T>(&cfg, tc.seed)?;
    let mut adam = AdamState::<T>::new(tc.lr);

    // Coordinates never change, so normalize every cloud once.
    let train_nc: Vec<NormalizedCloud<T>> =
        train_data.iter().map(normalize).collect::<Result<_>>()?;
    let val_nc: Vec<NormalizedCloud<T>> = val_data.iter().map(normalize).collect::<Result<_>>()?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_nc.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        // Fisher–Yates on the cloud order, one fresh draw stream per run.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        model.set_mode(BnMode::Train);
        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        let mut total = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let mut grads_sum: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            for &idx in batch {
                let nc = &train_nc[idx];
                let labels = train_labels[idx];
                let (logits, cache) = model.forward(&nc.coords_hat, &nc.features)?;
                let (loss, d_logits) = cross_entropy(&logits, labels)?;
                let loss = loss.to_f64();
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite training loss at epoch {epoch}"
                    )));
                }
                epoch_loss += loss;
                for (p, &g) in predict_labels(&logits).iter().zip(labels.iter()) {
                    total += 1;
                    if *p == g {
                        correct += 1;
                    }
                }
                let (grads, _) = model.backward(&cache, &d_logits)?;
                for (name, g) in grads {
                    match grads_sum.get_mut(&name) {
                        Some(acc) => {
                            *acc = crate::tensor::elementwise_add(acc, &g)?;
                        }
                        None => {
                            grads_sum.insert(name, g);
                        }
                    }
                }
            }
            let scale = T::from_f64(1.0 / batch.len() as f64);
            for g in grads_sum.values_mut() {
                *g = g.scale(scale);
            }
            adam.step_model(&mut model, &grads_sum)?;
        }

        model.set_mode(BnMode::Eval);
        let mut preds = Vec::with_capacity(val_nc.len());
        let mut gts = Vec::with_capacity(val_nc.len());
        for (nc, labels) in val_nc.iter().zip(val_labels.iter()) {
            let (logits, _) = model.forward(&nc.coords_hat, &nc.features)?;
            preds.push(predict_labels(&logits));
            gts.push((*labels).clone());
        }
        let val_miou = if preds.is_empty() {
            0.0
        } else {
            evaluate_miou(&preds, &gts, None)?.mean_miou
        };

        log.push(EpochRecord {
            epoch,
            loss: epoch_loss / train_nc.len() as f64,
            train_acc: correct as f64 / total.max(1) as f64,
            val_miou,
        });
    }

    Ok(TrainOutcome { model, config: cfg, log })
}

/// Eval-mode predictions and metrics of a model over labeled clouds.
pub fn evaluate_model<T: Scalar>(
    model: &mut ModelParams<T>,
    clouds: &[PointCloud<T>],
) -> Result<(IoUReport, f64)> {
    let labels = labeled_or_err(clouds)?;
    model.set_mode(BnMode::Eval);
    let mut preds = Vec::with_capacity(clouds.len());
    let mut gts = Vec::with_capacity(clouds.len());
    for (pc, l) in clouds.iter().zip(labels.iter()) {
        let nc = normalize(pc)?;
        let (logits, _) = model.forward(&nc.coords_hat, &nc.features)?;
        preds.push(predict_labels(&logits));
        gts.push((*l).clone());
    }
    let acc = point_accuracy(&preds, &gts);
    Ok((evaluate_miou(&preds, &gts, None)?, acc))
}
