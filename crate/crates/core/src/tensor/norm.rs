use super::Tensor4;
use crate::scalar::Scalar;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Affine-free instance normalization: every channel is shifted and scaled to
/// zero mean and unit (population) variance, damped by `eps`.
///
/// Moments are accumulated in `f64` regardless of `T`; a 128^3 channel in
/// `f32` would otherwise lose several digits of the mean.
pub fn instance_norm<T: Scalar>(x: &Tensor4<T>, eps: f64) -> Tensor4<T> {
    let mut out = x.clone();
    instance_norm_inplace(&mut out, eps);
    out
}

pub(crate) fn instance_norm_inplace<T: Scalar>(x: &mut Tensor4<T>, eps: f64) {
    for c in 0..x.channels() {
        let ch = x.channel_mut(c);
        let n = ch.len() as f64;
        let mean = ch.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = ch
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        for v in ch.iter_mut() {
            *v = T::from_f64_lossy((v.as_f64() - mean) * inv);
        }
    }
}
