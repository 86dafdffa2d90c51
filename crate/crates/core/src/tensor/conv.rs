use rayon::prelude::*;

use super::Tensor4;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cubic convolution kernel, weights laid out `(C_out, C_in, k, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Kernel<T> {
    pub fn new(c_out: usize, c_in: usize, k: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Shape(format!("kernel size {k} must be odd")));
        }
        if weight.len() != c_out * c_in * k * k * k {
            return Err(Error::Shape(format!(
                "kernel ({c_out},{c_in},{k},{k},{k}) needs {} weights, got {}",
                c_out * c_in * k * k * k,
                weight.len()
            )));
        }
        if bias.len() != c_out {
            return Err(Error::Shape(format!(
                "kernel with {c_out} outputs got {} biases",
                bias.len()
            )));
        }
        Ok(Self {
            c_out,
            c_in,
            k,
            weight,
            bias,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self::new(
            c_out,
            c_in,
            k,
            vec![T::zero(); c_out * c_in * k * k * k],
            vec![T::zero(); c_out],
        )
        .expect("zero kernel")
    }

    #[inline]
    pub fn index(&self, co: usize, ci: usize, kd: usize, kh: usize, kw: usize) -> usize {
        let k = self.k;
        (((co * self.c_in + ci) * k + kd) * k + kh) * k + kw
    }

    pub fn weight_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

fn output_dim(d: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if d + 2 * padding < k {
        return Err(Error::Shape(format!(
            "spatial size {d} with padding {padding} is smaller than kernel {k}"
        )));
    }
    Ok((d + 2 * padding - k) / stride + 1)
}

fn check(x: &[usize; 4], kernel_c_in: usize, stride: usize) -> Result<()> {
    if x[0] != kernel_c_in {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {kernel_c_in}",
            x[0]
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    Ok(())
}

/// Half-open range of output positions along one axis whose input tap
/// `o * stride + tap - padding` falls inside `0..len`.
#[inline]
fn valid_range(len: usize, out_len: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(tap).div_ceil(stride);
    let hi = if len + padding > tap {
        ((len + padding - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 3D convolution.
///
/// Each output channel is accumulated row by row (one multiply-add sweep per
/// kernel tap), which vectorizes along `x`. The per-voxel summation order is
/// bias first, then taps in `(c_in, kd, kh, kw)` order, identical to
/// [`conv3d_direct`], so the two agree bitwise. Output channels are computed
/// independently on the current rayon pool, so the result does not depend on
/// the thread count.
pub fn conv3d<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Kernel<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    let shape = x.shape();
    check(&shape, kernel.c_in, stride)?;
    let [_, d, h, w] = shape;
    let k = kernel.k;
    let (od_n, oh_n, ow_n) = (
        output_dim(d, k, stride, padding)?,
        output_dim(h, k, stride, padding)?,
        output_dim(w, k, stride, padding)?,
    );
    let plane = od_n * oh_n * ow_n;
    let slab = oh_n * ow_n;
    let mut out = vec![T::zero(); kernel.c_out * plane];

    out.par_chunks_mut(plane).enumerate().for_each(|(co, out_ch)| {
        out_ch.fill(kernel.bias[co]);
        for od in 0..od_n {
            let out_slab = &mut out_ch[od * slab..(od + 1) * slab];
            for ci in 0..kernel.c_in {
                let xin = x.channel(ci);
                for kd in 0..k {
                    let id = (od * stride + kd) as isize - padding as isize;
                    if id < 0 || id >= d as isize {
                        continue;
                    }
                    let id = id as usize;
                    for kh in 0..k {
                        let (oh0, oh1) = valid_range(h, oh_n, kh, stride, padding);
                        for kw in 0..k {
                            let wv = kernel.weight[kernel.index(co, ci, kd, kh, kw)];
                            let (ow0, ow1) = valid_range(w, ow_n, kw, stride, padding);
                            if ow0 >= ow1 {
                                continue;
                            }
                            for oh in oh0..oh1 {
                                let ih = oh * stride + kh - padding;
                                let row = &xin[(id * h + ih) * w..(id * h + ih + 1) * w];
                                let orow = &mut out_slab[oh * ow_n..(oh + 1) * ow_n];
                                if stride == 1 {
                                    let start = ow0 + kw - padding;
                                    let src = &row[start..start + (ow1 - ow0)];
                                    for (o, &v) in orow[ow0..ow1].iter_mut().zip(src) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for (ow, o) in orow.iter_mut().enumerate().take(ow1).skip(ow0) {
                                        *o += wv * row[ow * stride + kw - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor4::new([kernel.c_out, od_n, oh_n, ow_n], out)
}

/// Reference sliding-window convolution: one dot product per output voxel.
pub fn conv3d_direct<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Kernel<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    let shape = x.shape();
    check(&shape, kernel.c_in, stride)?;
    let [_, d, h, w] = shape;
    let k = kernel.k;
    let od_n = output_dim(d, k, stride, padding)?;
    let oh_n = output_dim(h, k, stride, padding)?;
    let ow_n = output_dim(w, k, stride, padding)?;
    let p = padding as isize;
    let mut out = Tensor4::zeros([kernel.c_out, od_n, oh_n, ow_n]);
    for co in 0..kernel.c_out {
        for oz in 0..od_n {
            for oy in 0..oh_n {
                for ox in 0..ow_n {
                    let mut acc = kernel.bias[co];
                    for ci in 0..kernel.c_in {
                        for kd in 0..k {
                            let iz = (oz * stride + kd) as isize - p;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for kh in 0..k {
                                let iy = (oy * stride + kh) as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let ix = (ox * stride + kw) as isize - p;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += kernel.weight[kernel.index(co, ci, kd, kh, kw)]
                                        * x.get(ci, iz as usize, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(co, oz, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}
