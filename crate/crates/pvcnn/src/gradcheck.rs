//! Finite-difference verification harness for explicit backward passes.
//!
//! Every learnable operation in this crate ships a hand-written backward;
//! [`grad_check`] certifies it against central differences contracted with a
//! fixed random output cotangent, in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{inner, Tensor};

/// Outcome of one finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub epsilon: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} abs {:>12.3e}  rel {:>12.3e}  eps {:>8.1e}  {}",
            self.op_name,
            self.max_abs_err,
            self.max_rel_err,
            self.epsilon,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

/// Compare an analytic input-cotangent against central finite differences.
///
/// `forward` must be a pure function of its argument; `backward` receives the
/// same input plus an output cotangent and returns the input cotangent. The
/// analytic gradient g is checked elementwise against
/// (⟨f(x+εeᵢ), G⟩ − ⟨f(x−εeᵢ), G⟩) / 2ε for a fixed random G. The relative
/// error divides by max(|analytic|, |fd|, 1), so near-zero gradients are
/// judged on absolute error.
pub fn grad_check<F, B>(
    op_name: &str,
    input: &Tensor<f64>,
    epsilon: f64,
    tolerance: f64,
    forward: F,
    backward: B,
) -> GradCheckReport
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
    B: Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
{
    let y0 = forward(input);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let cotangent = Tensor::<f64>::random_uniform(y0.shape().to_vec(), -1.0, 1.0, &mut rng);

    let analytic = backward(input, &cotangent);
    assert_eq!(
        analytic.shape(),
        input.shape(),
        "backward of {op_name} returned wrong shape"
    );

    let mut max_abs_err = 0.0f64;
    let mut max_rel_err = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = input.clone();
        minus.data_mut()[i] -= epsilon;
        let fp = inner(&forward(&plus), &cotangent).expect("output shapes agree");
        let fm = inner(&forward(&minus), &cotangent).expect("output shapes agree");
        let fd = (fp - fm) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let abs = (a - fd).abs();
        let rel = abs / a.abs().max(fd.abs()).max(1.0);
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(rel);
    }

    GradCheckReport {
        op_name: op_name.to_string(),
        max_abs_err,
        max_rel_err,
        passed: max_rel_err <= tolerance,
        epsilon,
    }
}
