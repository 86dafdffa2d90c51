//! Rotary position encoding from commuting Lie generators.
//!
//! The generator for a 3D position `p` is block-diagonal with one 2x2
//! skew-symmetric block per pair of head channels. Block `k` rotates by
//!
//! ```text
//! angle_k(p) = theta_k * (a_k * p_z + b_k * p_y + c_k * p_x)
//! ```
//!
//! with learned per-axis rates `(a_k, b_k, c_k)` and a fixed frequency ladder
//! `theta_k = pi * 16^(k / (n - 1))`. Because the blocks commute and the
//! angle is linear in `p`, `R(p)^T R(q) = R(q - p)` holds exactly.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Liere {
    /// `(a_k, b_k, c_k)` per rotation block.
    rates: Vec<[f64; 3]>,
    freqs: Vec<f64>,
}

/// Cosine/sine pair per rotation block for one position.
pub type BlockRotation<T> = Vec<(T, T)>;

impl Liere {
    pub fn new(rates: Vec<[f64; 3]>) -> Self {
        let n = rates.len();
        let freqs = (0..n)
            .map(|k| {
                if n > 1 {
                    PI * 16f64.powf(k as f64 / (n - 1) as f64)
                } else {
                    PI
                }
            })
            .collect();
        Self { rates, freqs }
    }

    /// Rates from the flat `(blocks, 3)` weight tensor.
    pub fn from_flat(flat: &[f32]) -> Self {
        Self::new(
            flat.chunks_exact(3)
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                .collect(),
        )
    }

    pub fn blocks(&self) -> usize {
        self.rates.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.rates.len()
    }

    pub fn angles(&self, p: [f64; 3]) -> Vec<f64> {
        self.rates
            .iter()
            .zip(&self.freqs)
            .map(|(r, &f)| f * (r[0] * p[0] + r[1] * p[1] + r[2] * p[2]))
            .collect()
    }

    pub fn block_rotation<T: Scalar>(&self, p: [f64; 3]) -> BlockRotation<T> {
        self.angles(p)
            .into_iter()
            .map(|a| (T::from_f64_lossy(a.cos()), T::from_f64_lossy(a.sin())))
            .collect()
    }

    /// Applies `R(p)` to a head vector in place.
    #[inline]
    pub fn rotate<T: Scalar>(rot: &[(T, T)], v: &mut [T]) {
        for (pair, &(c, s)) in v.chunks_exact_mut(2).zip(rot) {
            let (x, y) = (pair[0], pair[1]);
            pair[0] = c * x - s * y;
            pair[1] = s * x + c * y;
        }
    }

    /// Dense `dim x dim` rotation matrix, row-major.
    pub fn matrix<T: Scalar>(&self, p: [f64; 3]) -> Vec<T> {
        let d = self.dim();
        let mut m = vec![T::zero(); d * d];
        for (k, (c, s)) in self.block_rotation::<T>(p).into_iter().enumerate() {
            let i = 2 * k;
            m[i * d + i] = c;
            m[i * d + i + 1] = -s;
            m[(i + 1) * d + i] = s;
            m[(i + 1) * d + i + 1] = c;
        }
        m
    }
}

/// Rotation matrix (row-major, `dim x dim`) for every position.
pub fn liere_rotations<T: Scalar>(positions: &[[f64; 3]], liere: &Liere, dim: usize) -> Result<Vec<Vec<T>>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("head dim {dim} must be even")));
    }
    if dim != liere.dim() {
        return Err(Error::Config(format!(
            "head dim {dim} does not match {} rotation blocks",
            liere.blocks()
        )));
    }
    Ok(positions.iter().map(|&p| liere.matrix(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_identity() {
        let l = Liere::new(vec![[0.3, -0.7, 1.1], [2.0, 0.5, -0.2]]);
        let m = liere_rotations::<f64>(&[[0.0; 3]], &l, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[0][i * 4 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn odd_dim_is_config_error() {
        let l = Liere::new(vec![[1.0, 1.0, 1.0]]);
        assert!(matches!(liere_rotations::<f32>(&[[0.0; 3]], &l, 3), Err(Error::Config(_))));
    }

    #[test]
    fn rotate_matches_matrix() {
        let l = Liere::new(vec![[0.3, -0.7, 1.1], [2.0, 0.5, -0.2]]);
        let p = [0.2, 0.9, 0.4];
        let m = l.matrix::<f64>(p);
        let v = [1.0, -2.0, 0.5, 3.0];
        let mut r = v;
        Liere::rotate(&l.block_rotation::<f64>(p), &mut r);
        for i in 0..4 {
            let e: f64 = (0..4).map(|j| m[i * 4 + j] * v[j]).sum();
            assert!((e - r[i]).abs() < 1e-12);
        }
    }
}
