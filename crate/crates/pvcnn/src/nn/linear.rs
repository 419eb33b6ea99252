use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{batch_norm, batch_norm_backward, leaky_relu, leaky_relu_backward};
use crate::nn::{BatchNormState, BnCache};
use crate::tensor::{Scalar, Tensor};

/// Per-point linear layer weights, applied identically to every point.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    /// Shape [c_out, c_in].
    pub weight: Tensor<T>,
    /// Shape [c_out].
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            weight: Tensor::zeros([c_out, c_in]),
            bias: Tensor::zeros([c_out]),
        }
    }

    pub fn kaiming<R: Rng>(c_out: usize, c_in: usize, slope: f64, rng: &mut R) -> Self {
        let bound = (6.0 / ((1.0 + slope * slope) * c_in as f64)).sqrt();
        Self {
            weight: Tensor::random_uniform([c_out, c_in], -bound, bound, rng),
            bias: Tensor::zeros([c_out]),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `out[i, o] = Σ_l x[i, l]·W[o, l] + b[o]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[1] != p.c_in() {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: p.weight.shape().to_vec(),
        });
    }
    let (n, c_in) = (x.shape()[0], x.shape()[1]);
    let c_out = p.c_out();
    let mut out = Tensor::zeros([n, c_out]);
    for i in 0..n {
        for o in 0..c_out {
            let mut acc = p.bias.data()[o];
            for l in 0..c_in {
                acc = acc + x.data()[i * c_in + l] * p.weight.data()[o * c_in + l];
            }
            out.data_mut()[i * c_out + o] = acc;
        }
    }
    Ok(out)
}

/// Backward of [`linear_forward`]; returns (dx, dweight, dbias).
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &LinearParams<T>,
    cotangent: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c_in) = (x.shape()[0], x.shape()[1]);
    let c_out = p.c_out();
    if cotangent.shape() != [n, c_out] {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            lhs: cotangent.shape().to_vec(),
            rhs: vec![n, c_out],
        });
    }
    let mut dx = Tensor::zeros([n, c_in]);
    let mut dw = Tensor::zeros([c_out, c_in]);
    let mut db = Tensor::zeros([c_out]);
    for i in 0..n {
        for o in 0..c_out {
            let g = cotangent.data()[i * c_out + o];
            db.data_mut()[o] = db.data()[o] + g;
            for l in 0..c_in {
                dx.data_mut()[i * c_in + l] =
                    dx.data()[i * c_in + l] + g * p.weight.data()[o * c_in + l];
                dw.data_mut()[o * c_in + l] =
                    dw.data()[o * c_in + l] + g * x.data()[i * c_in + l];
            }
        }
    }
    Ok((dx, dw, db))
}

/// Forward cache of one shared-MLP application.
#[derive(Clone, Debug)]
pub struct SharedMlpCache<T> {
    pub x: Tensor<T>,
    pub bn_cache: BnCache<T>,
    /// Post-norm, pre-activation values.
    pub pre_act: Tensor<T>,
}

/// Shared per-point MLP: linear → batch norm over the point axis →
/// leaky ReLU, identical weights for every point.
pub fn shared_mlp<T: Scalar>(
    x: &Tensor<T>,
    p: &LinearParams<T>,
    bn: &mut BatchNormState<T>,
    slope: f64,
) -> Result<(Tensor<T>, SharedMlpCache<T>)> {
    let lin = linear_forward(x, p)?;
    let (normed, bn_cache) = batch_norm(&lin, bn)?;
    let out = leaky_relu(&normed, slope);
    Ok((
        out,
        SharedMlpCache {
            x: x.clone(),
            bn_cache,
            pre_act: normed,
        },
    ))
}

/// Backward of [`shared_mlp`]; returns (dx, dweight, dbias, dgamma, dbeta).
#[allow(clippy::type_complexity)]
pub fn shared_mlp_backward<T: Scalar>(
    cotangent: &Tensor<T>,
    cache: &SharedMlpCache<T>,
    p: &LinearParams<T>,
    bn: &BatchNormState<T>,
    slope: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d_pre = leaky_relu_backward(&cache.pre_act, cotangent, slope);
    let (d_lin, d_gamma, d_beta) = batch_norm_backward(&d_pre, &cache.bn_cache, bn)?;
    let (dx, dw, db) = linear_backward(&cache.x, p, &d_lin)?;
    Ok((dx, dw, db, d_gamma, d_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::nn::BnMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_points_get_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = LinearParams::<f64>::kaiming(4, 3, 0.1, &mut rng);
        let row = [0.3, -0.7, 0.2];
        let x = Tensor::new([3, 3], row.iter().chain(&row).chain(&row).copied().collect()).unwrap();
        let mut bn = BatchNormState::new(4);
        // Constant columns have zero variance; keep eval mode with defaults.
        bn.mode = BnMode::Eval;
        let (y, _) = shared_mlp(&x, &p, &mut bn, 0.1).unwrap();
        for o in 0..4 {
            assert_eq!(y.data()[o], y.data()[4 + o]);
            assert_eq!(y.data()[o], y.data()[8 + o]);
        }
    }

    #[test]
    fn identity_weight_on_normalized_input() {
        // Identity weights on a pre-normalized column: positive entries pass
        // through within the ε effect, negative ones pick up the slope.
        let x = Tensor::new([2, 1], vec![1.0, -1.0]).unwrap();
        let p = LinearParams::<f64> {
            weight: Tensor::new([1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros([1]),
        };
        let mut bn = BatchNormState::new(1);
        let (y, _) = shared_mlp(&x, &p, &mut bn, 0.1).unwrap();
        assert!((y.data()[0] - 1.0).abs() <= bn.epsilon / 2.0);
        assert!((y.data()[1] + 0.1).abs() <= bn.epsilon / 2.0);
    }

    #[test]
    fn equals_manual_composition_and_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::<f64>::random_uniform([6, 3], -1.0, 1.0, &mut rng);
        let p = LinearParams::<f64>::kaiming(4, 3, 0.1, &mut rng);
        let gamma = Tensor::<f64>::random_uniform([4], 0.8, 1.2, &mut rng);
        let beta = Tensor::<f64>::random_uniform([4], -0.3, 0.3, &mut rng);
        let fresh = || {
            let mut s = BatchNormState::new(4);
            s.gamma = gamma.clone();
            s.beta = beta.clone();
            s
        };

        let (y, _) = shared_mlp(&x, &p, &mut fresh(), 0.1).unwrap();
        let lin = linear_forward(&x, &p).unwrap();
        let (normed, _) = batch_norm(&lin, &mut fresh()).unwrap();
        let manual = leaky_relu(&normed, 0.1);
        assert_eq!(y, manual);

        let report = grad_check(
            "shared_mlp/x",
            &x,
            1e-5,
            1e-4,
            |x| shared_mlp(x, &p, &mut fresh(), 0.1).unwrap().0,
            |x, cot| {
                let mut bn = fresh();
                let (_, cache) = shared_mlp(x, &p, &mut bn, 0.1).unwrap();
                shared_mlp_backward(cot, &cache, &p, &bn, 0.1).unwrap().0
            },
        );
        assert!(report.passed, "{report}");

        let report = grad_check(
            "shared_mlp/weight",
            &p.weight,
            1e-5,
            1e-4,
            |w| {
                let pw = LinearParams {
                    weight: w.clone(),
                    bias: p.bias.clone(),
                };
                shared_mlp(&x, &pw, &mut fresh(), 0.1).unwrap().0
            },
            |w, cot| {
                let pw = LinearParams {
                    weight: w.clone(),
                    bias: p.bias.clone(),
                };
                let mut bn = fresh();
                let (_, cache) = shared_mlp(&x, &pw, &mut bn, 0.1).unwrap();
                shared_mlp_backward(cot, &cache, &pw, &bn, 0.1).unwrap().1
            },
        );
        assert!(report.passed, "{report}");
    }
}
