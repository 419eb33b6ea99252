//! Dense row-major tensor with shape/stride arithmetic and the handful of
//! elementwise / reduction operations the network layers are built from.
//!
//! All accumulations run in ascending flat-index order so results are
//! bit-deterministic for a fixed input.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element trait: f32 for training, f64 for gradient verification.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Uniform sample in [0, 1).
    fn sample_unit<R: rand::Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn sample_unit<R: rand::Rng>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn sample_unit<R: rand::Rng>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

/// Dense multi-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero dim in {shape:?}");
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in [lo, hi), row-major draw order.
    pub fn random_uniform<R: rand::Rng>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = T::from_f64(lo + (hi - lo) * T::sample_unit(rng).to_f64());
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major strides: stride of the last axis is 1.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat offset of a multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (d, (&i, &s)) in idx.iter().zip(self.shape.iter()).enumerate() {
            debug_assert!(i < s, "index {i} out of bounds for axis {d} (size {s})");
            flat = flat * s + i;
        }
        flat
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        debug_assert!(flat < self.data.len());
        let mut idx = vec![0; self.shape.len()];
        for d in (0..self.shape.len()).rev() {
            idx[d] = flat % self.shape[d];
            flat /= self.shape[d];
        }
        idx
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.flat_index(idx)]
    }

    pub fn at_mut(&mut self, idx: &[usize]) -> &mut T {
        let flat = self.flat_index(idx);
        &mut self.data[flat]
    }

    /// Same buffer under a new shape of identical element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Lossy dtype conversion (used when moving models between f32 and f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// `out[i] = a[i] + b[i]`, errors naming both shapes on mismatch.
pub fn elementwise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "elementwise_add", |x, y| x + y)
}

pub fn elementwise_sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "elementwise_sub", |x, y| x - y)
}

/// Matrix product of `a` (m×k) and `b` (k×n); the inner accumulation runs in
/// ascending index order in the input dtype.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros([m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for l in 0..k {
                acc = acc + ad[i * k + l] * bd[l * n + j];
            }
            od[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// Column-wise max over the point axis of an n×c tensor.
///
/// Returns the per-column maxima and the row index attaining each
/// (ties resolved to the lowest index). The backward routes the cotangent
/// only to the argmax positions.
pub fn reduce_max_over_points<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 2 {
        return Err(Error::invalid(format!(
            "reduce_max_over_points expects n×c, got {:?}",
            x.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if n == 0 {
        return Err(Error::invalid("reduce_max_over_points on empty input"));
    }
    let mut values = Tensor::zeros([c]);
    let mut argmax = vec![0usize; c];
    let xd = x.data();
    for j in 0..c {
        let mut best = xd[j];
        let mut best_i = 0;
        for i in 1..n {
            let v = xd[i * c + j];
            if v > best {
                best = v;
                best_i = i;
            }
        }
        values.data_mut()[j] = best;
        argmax[j] = best_i;
    }
    Ok((values, argmax))
}

/// Backward of [`reduce_max_over_points`]: scatter the output cotangent to
/// the argmax rows of an n×c zero tensor.
pub fn reduce_max_backward<T: Scalar>(
    cotangent: &Tensor<T>,
    argmax: &[usize],
    n: usize,
) -> Result<Tensor<T>> {
    let c = argmax.len();
    if cotangent.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "reduce_max_backward",
            lhs: cotangent.shape().to_vec(),
            rhs: vec![c],
        });
    }
    let mut grad = Tensor::zeros([n, c]);
    for j in 0..c {
        grad.data_mut()[argmax[j] * c + j] = cotangent.data()[j];
    }
    Ok(grad)
}

/// Inner product ⟨a, b⟩ accumulated in the input dtype, ascending index order.
pub fn inner<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "inner",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut acc = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        acc = acc + x * y;
    }
    Ok(acc)
}
