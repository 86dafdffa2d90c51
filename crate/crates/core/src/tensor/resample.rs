use super::Tensor4;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Source taps for resampling one axis from `src` to `dst` samples with the
/// half-pixel-center convention (`align_corners = false`): output index `i`
/// reads source coordinate `(i + 0.5) * src / dst - 0.5`, clamped at the low
/// edge to 0 and at the high edge by repeating the last sample.
#[derive(Clone, Debug)]
pub struct AxisSamples {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisSamples {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (s.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { s - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

/// Trilinearly resamples one `(D, H, W)` channel to `dst`, handing each
/// finished output row to `sink(z, y, row)`.
///
/// Interpolation runs along x, then y, then z as nested lerps, so equal
/// neighbours reproduce their value exactly and outputs stay within the
/// range of the taps.
pub fn resize_channel<T: Scalar>(
    src: &[T],
    src_shape: [usize; 3],
    dst: [usize; 3],
    mut sink: impl FnMut(usize, usize, &[T]),
) {
    let [sd, sh, sw] = src_shape;
    debug_assert_eq!(src.len(), sd * sh * sw);
    let az = AxisSamples::new(sd, dst[0]);
    let ay = AxisSamples::new(sh, dst[1]);
    let ax = AxisSamples::new(sw, dst[2]);
    let fx: Vec<T> = ax.frac.iter().map(|&f| T::from_f64_lossy(f)).collect();
    let mut row = vec![T::zero(); dst[2]];
    let at = |z: usize, y: usize| &src[(z * sh + y) * sw..(z * sh + y + 1) * sw];
    for z in 0..dst[0] {
        let tz = T::from_f64_lossy(az.frac[z]);
        for y in 0..dst[1] {
            let ty = T::from_f64_lossy(ay.frac[y]);
            let r00 = at(az.lo[z], ay.lo[y]);
            let r01 = at(az.lo[z], ay.hi[y]);
            let r10 = at(az.hi[z], ay.lo[y]);
            let r11 = at(az.hi[z], ay.hi[y]);
            for x in 0..dst[2] {
                let (l, h, t) = (ax.lo[x], ax.hi[x], fx[x]);
                let v00 = lerp(r00[l], r00[h], t);
                let v01 = lerp(r01[l], r01[h], t);
                let v10 = lerp(r10[l], r10[h], t);
                let v11 = lerp(r11[l], r11[h], t);
                row[x] = lerp(lerp(v00, v01, ty), lerp(v10, v11, ty), tz);
            }
            sink(z, y, &row);
        }
    }
}

/// Trilinear resize of every channel to `target` spatial dims. A target equal
/// to the source shape returns the input unchanged.
pub fn trilinear_resize<T: Scalar>(x: &Tensor4<T>, target: [usize; 3]) -> Result<Tensor4<T>> {
    if target.contains(&0) {
        return Err(Error::Shape(format!("resize target {target:?} has a zero dimension")));
    }
    if target == x.spatial() {
        return Ok(x.clone());
    }
    let c = x.channels();
    let mut out = Tensor4::zeros([c, target[0], target[1], target[2]]);
    let w = target[2];
    for ci in 0..c {
        let dst = out.channel_mut(ci);
        resize_channel(x.channel(ci), x.spatial(), target, |z, y, row| {
            let o = (z * target[1] + y) * w;
            dst[o..o + w].copy_from_slice(row);
        });
    }
    Ok(out)
}

/// Max pooling by per-axis integer factors. Blocks hanging over the high edge
/// are treated as padded with negative infinity, so the output has
/// `ceil(dim / factor)` samples per axis.
pub fn max_pool_downscale<T: Scalar>(x: &Tensor4<T>, factor: [usize; 3]) -> Result<Tensor4<T>> {
    if factor.contains(&0) {
        return Err(Error::Shape(format!("pool factor {factor:?} has a zero entry")));
    }
    if factor == [1, 1, 1] {
        return Ok(x.clone());
    }
    let [c, d, h, w] = x.shape();
    let [od, oh, ow] = [d.div_ceil(factor[0]), h.div_ceil(factor[1]), w.div_ceil(factor[2])];
    let mut out = Tensor4::filled([c, od, oh, ow], T::neg_infinity());
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for z in 0..d {
            let oz = z / factor[0];
            for y in 0..h {
                let oy = y / factor[1];
                let srow = &src[(z * h + y) * w..(z * h + y + 1) * w];
                let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                for (xi, &v) in srow.iter().enumerate() {
                    let o = &mut drow[xi / factor[2]];
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    Ok(out)
}
