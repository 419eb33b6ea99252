use crate::tensor::{Scalar, Tensor};

/// Default negative slope for leaky ReLU throughout the network.
pub const DEFAULT_SLOPE: f64 = 0.1;

/// `out = x` for x ≥ 0, `slope·x` otherwise.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    x.map(|v| if v >= T::zero() { v } else { v * s })
}

/// Backward multiplies the cotangent by 1 or `slope`; exactly at 0 the
/// subgradient 1 is used.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, cotangent: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    x.zip_map(cotangent, "leaky_relu_backward", |v, g| {
        if v >= T::zero() {
            g
        } else {
            g * s
        }
    })
    .expect("forward and cotangent shapes agree")
}
