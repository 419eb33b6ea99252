use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch-normalization parameters and running statistics.
///
/// The channel axis is axis 1 for every tensor this crate normalizes:
/// n×c point features and b×c×d×h×w voxel features alike.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormState<T> {
    /// γ = 1, β = 0, running mean 0 / var 1, momentum 0.1, ε = 1e−5.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], T::one()),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            momentum: 0.1,
            epsilon: 1e-5,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    /// Normalized input x̂ (before the affine), same shape as x.
    x_hat: Tensor<T>,
    /// Per-channel 1/√(var+ε) used at forward time.
    inv_std: Vec<T>,
    mode: BnMode,
    channels: usize,
}

fn channel_layout<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    if x.rank() < 2 || x.shape()[1] != channels {
        return Err(Error::invalid(format!(
            "batch_norm expects channel axis 1 of size {channels}, got shape {:?}",
            x.shape()
        )));
    }
    let outer = x.shape()[0];
    let inner: usize = x.shape()[2..].iter().product();
    Ok((outer, inner))
}

/// Normalize per channel over all non-channel axes.
///
/// Train mode uses batch statistics (biased variance) and folds them into the
/// running estimates with `running ← (1−m)·running + m·batch`; eval mode uses
/// the running estimates. Output is γ·x̂ + β.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = state.channels();
    let (outer, inner) = channel_layout(x, c)?;
    let per_channel = outer * inner;
    let eps = T::from_f64(state.epsilon);

    let (mean, var) = match state.mode {
        BnMode::Train => {
            if per_channel < 2 {
                return Err(Error::invalid(format!(
                    "batch_norm train mode needs at least 2 elements per channel, got {per_channel}"
                )));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for b in 0..outer {
                for ch in 0..c {
                    let base = (b * c + ch) * inner;
                    for i in 0..inner {
                        mean[ch] = mean[ch] + x.data()[base + i];
                    }
                }
            }
            let inv_m = T::from_f64(1.0 / per_channel as f64);
            for ch in 0..c {
                mean[ch] = mean[ch] * inv_m;
            }
            for b in 0..outer {
                for ch in 0..c {
                    let base = (b * c + ch) * inner;
                    for i in 0..inner {
                        let d = x.data()[base + i] - mean[ch];
                        var[ch] = var[ch] + d * d;
                    }
                }
            }
            for ch in 0..c {
                var[ch] = var[ch] * inv_m;
            }
            let m = T::from_f64(state.momentum);
            let keep = T::one() - m;
            for ch in 0..c {
                state.running_mean.data_mut()[ch] =
                    keep * state.running_mean.data()[ch] + m * mean[ch];
                state.running_var.data_mut()[ch] =
                    keep * state.running_var.data()[ch] + m * var[ch];
            }
            (mean, var)
        }
        BnMode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape().to_vec());
    let mut out = Tensor::zeros(x.shape().to_vec());
    for b in 0..outer {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let g = state.gamma.data()[ch];
            let bt = state.beta.data()[ch];
            for i in 0..inner {
                let xh = (x.data()[base + i] - mean[ch]) * inv_std[ch];
                x_hat.data_mut()[base + i] = xh;
                out.data_mut()[base + i] = g * xh + bt;
            }
        }
    }

    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            mode: state.mode,
            channels: c,
        },
    ))
}

/// Backward of [`batch_norm`]; returns (dx, dγ, dβ).
///
/// Train mode accounts for the dependence of the batch statistics on x;
/// eval mode reduces to a per-channel affine.
pub fn batch_norm_backward<T: Scalar>(
    cotangent: &Tensor<T>,
    cache: &BnCache<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = cache.channels;
    let (outer, inner) = channel_layout(cotangent, c)?;
    if cotangent.shape() != cache.x_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "batch_norm_backward",
            lhs: cotangent.shape().to_vec(),
            rhs: cache.x_hat.shape().to_vec(),
        });
    }
    let per_channel = outer * inner;

    let mut d_gamma = Tensor::zeros([c]);
    let mut d_beta = Tensor::zeros([c]);
    for b in 0..outer {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in 0..inner {
                let g = cotangent.data()[base + i];
                d_beta.data_mut()[ch] = d_beta.data()[ch] + g;
                d_gamma.data_mut()[ch] = d_gamma.data()[ch] + g * cache.x_hat.data()[base + i];
            }
        }
    }

    let mut dx = Tensor::zeros(cotangent.shape().to_vec());
    match cache.mode {
        BnMode::Eval => {
            for b in 0..outer {
                for ch in 0..c {
                    let base = (b * c + ch) * inner;
                    let scale = state.gamma.data()[ch] * cache.inv_std[ch];
                    for i in 0..inner {
                        dx.data_mut()[base + i] = cotangent.data()[base + i] * scale;
                    }
                }
            }
        }
        BnMode::Train => {
            // dx = γ·inv_std/N · (N·g − Σg − x̂·Σ(g·x̂))
            let inv_m = T::from_f64(1.0 / per_channel as f64);
            let m = T::from_f64(per_channel as f64);
            for b in 0..outer {
                for ch in 0..c {
                    let base = (b * c + ch) * inner;
                    let scale = state.gamma.data()[ch] * cache.inv_std[ch] * inv_m;
                    let sum_g = d_beta.data()[ch];
                    let sum_gx = d_gamma.data()[ch];
                    for i in 0..inner {
                        let g = cotangent.data()[base + i];
                        let xh = cache.x_hat.data()[base + i];
                        dx.data_mut()[base + i] = scale * (m * g - sum_g - xh * sum_gx);
                    }
                }
            }
        }
    }

    Ok((dx, d_gamma, d_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn already_normalized_input_passes_through() {
        // Zero-mean unit-variance column with γ=1, β=0 changes by at most
        // the ε effect.
        let x = Tensor::new([4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut state = BatchNormState::<f64>::new(1);
        let (y, _) = batch_norm(&x, &mut state).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() <= state.epsilon / 2.0);
        }
    }

    #[test]
    fn constant_input_collapses_to_beta() {
        let x = Tensor::full([5, 2], 7.5f64);
        let mut state = BatchNormState::<f64>::new(2);
        state.beta = Tensor::new([2], vec![0.3, -0.4]).unwrap();
        let (y, _) = batch_norm(&x, &mut state).unwrap();
        for i in 0..5 {
            assert!((y.data()[i * 2] - 0.3).abs() < 1e-12);
            assert!((y.data()[i * 2 + 1] + 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_rejects_single_element() {
        let x = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let mut state = BatchNormState::<f64>::new(2);
        assert!(batch_norm(&x, &mut state).is_err());
    }

    #[test]
    fn matches_formula_oracle_and_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::random_uniform([6, 3], -2.0, 2.0, &mut rng);
        let mut state = BatchNormState::<f64>::new(3);
        state.gamma = Tensor::new([3], vec![1.5, 0.5, 2.0]).unwrap();
        state.beta = Tensor::new([3], vec![0.1, -0.2, 0.0]).unwrap();
        let (y, _) = batch_norm(&x, &mut state).unwrap();

        for ch in 0..3 {
            let col: Vec<f64> = (0..6).map(|i| x.data()[i * 3 + ch]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for i in 0..6 {
                let want = state.gamma.data()[ch] * (col[i] - mean) / (var + 1e-5).sqrt()
                    + state.beta.data()[ch];
                assert!((y.data()[i * 3 + ch] - want).abs() < 1e-12);
            }
            assert!((state.running_mean.data()[ch] - 0.1 * mean).abs() < 1e-12);
            assert!((state.running_var.data()[ch] - (0.9 + 0.1 * var)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut state = BatchNormState::<f64>::new(1);
        state.running_mean = Tensor::new([1], vec![2.0]).unwrap();
        state.running_var = Tensor::new([1], vec![4.0]).unwrap();
        state.mode = BnMode::Eval;
        let x = Tensor::new([2, 1], vec![2.0, 6.0]).unwrap();
        let (y, _) = batch_norm(&x, &mut state).unwrap();
        assert!((y.data()[0] - 0.0).abs() < 1e-5);
        assert!((y.data()[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn gradients_pass_grad_check_for_input_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::<f64>::random_uniform([5, 2], -1.0, 1.0, &mut rng);
        let gamma = Tensor::<f64>::random_uniform([2], 0.5, 1.5, &mut rng);
        let beta = Tensor::<f64>::random_uniform([2], -0.5, 0.5, &mut rng);

        let fresh = |gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let mut s = BatchNormState::<f64>::new(2);
            s.gamma = gamma.clone();
            s.beta = beta.clone();
            s
        };

        let report = grad_check(
            "batch_norm/x",
            &x,
            1e-5,
            1e-4,
            |x| batch_norm(x, &mut fresh(&gamma, &beta)).unwrap().0,
            |x, cot| {
                let mut s = fresh(&gamma, &beta);
                let (_, cache) = batch_norm(x, &mut s).unwrap();
                batch_norm_backward(cot, &cache, &s).unwrap().0
            },
        );
        assert!(report.passed, "{report}");

        let report = grad_check(
            "batch_norm/gamma",
            &gamma,
            1e-5,
            1e-4,
            |g| batch_norm(&x, &mut fresh(g, &beta)).unwrap().0,
            |g, cot| {
                let mut s = fresh(g, &beta);
                let (_, cache) = batch_norm(&x, &mut s).unwrap();
                batch_norm_backward(cot, &cache, &s).unwrap().1
            },
        );
        assert!(report.passed, "{report}");

        let report = grad_check(
            "batch_norm/beta",
            &beta,
            1e-5,
            1e-4,
            |b| batch_norm(&x, &mut fresh(&gamma, b)).unwrap().0,
            |b, cot| {
                let mut s = fresh(&gamma, b);
                let (_, cache) = batch_norm(&x, &mut s).unwrap();
                batch_norm_backward(cot, &cache, &s).unwrap().2
            },
        );
        assert!(report.passed, "{report}");
    }

    #[test]
    fn train_output_is_standardized_before_affine() {
        // Spread the data wide enough that the ε in the denominator costs
        // less than 1e−6 of the unit variance.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = Tensor::<f64>::random_uniform([2, 3, 4], -10.0, 10.0, &mut rng);
        let mut state = BatchNormState::<f64>::new(3);
        let (y, _) = batch_norm(&x, &mut state).unwrap();
        for ch in 0..3 {
            let mut vals = vec![];
            for b in 0..2 {
                for i in 0..4 {
                    vals.push(y.data()[(b * 3 + ch) * 4 + i]);
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-7, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "channel {ch} var {var}");
        }
    }
}
