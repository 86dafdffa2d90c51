//! Dense `(C, D, H, W)` activation tensor and the small kernel set the
//! network needs: convolution, instance normalization, trilinear resizing,
//! block max pooling and divisibility padding.

mod conv;
mod norm;
mod resample;

pub use conv::{conv3d, conv3d_direct, Kernel};
pub use norm::{instance_norm, INSTANCE_NORM_EPS};
pub use resample::{max_pool_downscale, resize_channel, trilinear_resize, AxisSamples};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contiguous channel-major 3D tensor with shape `(C, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f(c, z, y, x)` for every element.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [c, d, h, w] = shape;
        let mut data = Vec::with_capacity(shape.iter().product());
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ci, z, y, x));
                    }
                }
            }
        }
        Self::new(shape, data).expect("from_fn shape")
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn offset(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, d, h, w] = self.shape;
        ((c * d + z) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.offset(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: T) {
        let o = self.offset(c, z, y, x);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.spatial() != other.spatial() {
            return Err(Error::Shape(format!(
                "cannot concatenate spatial {:?} with {:?}",
                self.spatial(),
                other.spatial()
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        let [c, d, h, w] = self.shape;
        Ok(Self {
            shape: [c + other.shape[0], d, h, w],
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Reverses the tensor along spatial axis `axis` (0 = z, 1 = y, 2 = x).
    pub fn flip(&self, axis: usize) -> Self {
        let [_, d, h, w] = self.shape;
        Self::from_fn(self.shape, |c, z, y, x| {
            let (mut z, mut y, mut x) = (z, y, x);
            match axis {
                0 => z = d - 1 - z,
                1 => y = h - 1 - y,
                2 => x = w - 1 - x,
                _ => panic!("spatial axis {axis} out of range"),
            }
            self.get(c, z, y, x)
        })
    }
}

/// Per-axis `(before, after)` padding in voxels, in `(z, y, x)` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PadSpec {
    pub before: [usize; 3],
    pub after: [usize; 3],
}

impl PadSpec {
    pub fn is_zero(&self) -> bool {
        self.before == [0; 3] && self.after == [0; 3]
    }

    pub fn padded(&self, spatial: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| spatial[a] + self.before[a] + self.after[a])
    }
}

/// Zero-pads every spatial dimension at the high end up to the next multiple
/// of `m`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor4<T>, m: usize) -> Result<(Tensor4<T>, PadSpec)> {
    if m == 0 {
        return Err(Error::Config("padding multiple must be at least 1".into()));
    }
    let spatial = x.spatial();
    let after = spatial.map(|d| d.div_ceil(m) * m - d);
    let spec = PadSpec {
        before: [0; 3],
        after,
    };
    Ok((pad(x, &spec), spec))
}

pub fn pad<T: Scalar>(x: &Tensor4<T>, spec: &PadSpec) -> Tensor4<T> {
    if spec.is_zero() {
        return x.clone();
    }
    let [c, d, h, w] = x.shape();
    let [pd, ph, pw] = spec.padded([d, h, w]);
    let mut out = Tensor4::zeros([c, pd, ph, pw]);
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = x.offset(ci, z, y, 0);
                let dst = out.offset(ci, z + spec.before[0], y + spec.before[1], spec.before[2]);
                out.data[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
            }
        }
    }
    out
}

/// Inverse of [`pad`]: removes the voxels `spec` added.
pub fn crop<T: Scalar>(x: &Tensor4<T>, spec: &PadSpec) -> Result<Tensor4<T>> {
    let [c, pd, ph, pw] = x.shape();
    let padded = [pd, ph, pw];
    let mut inner = [0usize; 3];
    for a in 0..3 {
        let total = spec.before[a] + spec.after[a];
        if total >= padded[a] {
            return Err(Error::Shape(format!(
                "padding {spec:?} leaves nothing of spatial {padded:?}"
            )));
        }
        inner[a] = padded[a] - total;
    }
    if spec.is_zero() {
        return Ok(x.clone());
    }
    let [d, h, w] = inner;
    let mut out = Tensor4::zeros([c, d, h, w]);
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = x.offset(ci, z + spec.before[0], y + spec.before[1], spec.before[2]);
                let dst = out.offset(ci, z, y, 0);
                out.data[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
            }
        }
    }
    Ok(out)
}
