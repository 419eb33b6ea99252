use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 3×3×3 volumetric convolution kernel and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dParams<T> {
    /// Shape [c_out, c_in, 3, 3, 3].
    pub weight: Tensor<T>,
    /// Shape [c_out].
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv3dParams<T> {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            weight: Tensor::zeros([c_out, c_in, 3, 3, 3]),
            bias: Tensor::zeros([c_out]),
        }
    }

    /// Kaiming-uniform fan-in init matched to the leaky-ReLU slope; zero bias.
    pub fn kaiming<R: Rng>(c_out: usize, c_in: usize, slope: f64, rng: &mut R) -> Self {
        let fan_in = (c_in * 27) as f64;
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        Self {
            weight: Tensor::random_uniform([c_out, c_in, 3, 3, 3], -bound, bound, rng),
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

fn dims<T: Scalar>(x: &Tensor<T>, p: &Conv3dParams<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 5 {
        return Err(Error::invalid(format!(
            "conv3d expects b×c×d×h×w input, got {:?}",
            x.shape()
        )));
    }
    let (b, c_in, d, h, w) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    if c_in != p.c_in() {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: x.shape().to_vec(),
            rhs: p.weight.shape().to_vec(),
        });
    }
    Ok((b, c_in, d, h, w, p.c_out()))
}

/// Stride-1, zero-padding-1 cross-correlation over 3³ neighborhoods plus
/// bias; output has the input's spatial size.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, p: &Conv3dParams<T>) -> Result<Tensor<T>> {
    let (b, c_in, d, h, w, c_out) = dims(x, p)?;
    let mut out = Tensor::zeros([b, c_out, d, h, w]);
    let xd = x.data();
    let wd = p.weight.data();
    let od = out.data_mut();
    let spatial = d * h * w;
    for bi in 0..b {
        for oc in 0..c_out {
            let out_base = (bi * c_out + oc) * spatial;
            let bias = p.bias.data()[oc];
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias;
                        for ic in 0..c_in {
                            let in_base = (bi * c_in + ic) * spatial;
                            let w_base = ((oc * c_in + ic) * 3) * 9;
                            for kz in 0..3usize {
                                let iz = z as isize + kz as isize - 1;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = xx as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = in_base
                                            + (iz as usize * h + iy as usize) * w
                                            + ix as usize;
                                        let wi = w_base + (kz * 3 + ky) * 3 + kx;
                                        acc = acc + xd[xi] * wd[wi];
                                    }
                                }
                            }
                        }
                        od[out_base + (z * h + y) * w + xx] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`conv3d`]; returns (dx, dweight, dbias).
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &Conv3dParams<T>,
    cotangent: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c_in, d, h, w, c_out) = dims(x, p)?;
    if cotangent.shape() != [b, c_out, d, h, w] {
        return Err(Error::ShapeMismatch {
            op: "conv3d_backward",
            lhs: cotangent.shape().to_vec(),
            rhs: vec![b, c_out, d, h, w],
        });
    }
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(p.weight.shape().to_vec());
    let mut db = Tensor::zeros([c_out]);
    let xd = x.data();
    let wd = p.weight.data();
    let cd = cotangent.data();
    let spatial = d * h * w;

    for bi in 0..b {
        for oc in 0..c_out {
            let cot_base = (bi * c_out + oc) * spatial;
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let g = cd[cot_base + (z * h + y) * w + xx];
                        db.data_mut()[oc] = db.data()[oc] + g;
                        for ic in 0..c_in {
                            let in_base = (bi * c_in + ic) * spatial;
                            let w_base = ((oc * c_in + ic) * 3) * 9;
                            for kz in 0..3usize {
                                let iz = z as isize + kz as isize - 1;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = xx as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = in_base
                                            + (iz as usize * h + iy as usize) * w
                                            + ix as usize;
                                        let wi = w_base + (kz * 3 + ky) * 3 + kx;
                                        dx.data_mut()[xi] = dx.data()[xi] + wd[wi] * g;
                                        dw.data_mut()[wi] = dw.data()[wi] + xd[xi] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}
