//! Two-way cross-attention between prompt tokens and bottleneck voxels in the
//! normalized-transformer style: every representation lives on the unit
//! hypersphere and each residual step is a learned per-channel interpolation
//! towards the normalized sublayer output, followed by renormalization.

use super::liere::Liere;
use super::normalize_in_place;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense layer `y = W x + b`, `W` stored `(out, in)` row-major.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    /// Applies the layer to `n` row vectors stored contiguously.
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len() % self.inp, 0);
        let n = x.len() / self.inp;
        let mut y = Vec::with_capacity(n * self.out);
        for row in x.chunks_exact(self.inp) {
            for o in 0..self.out {
                let w = &self.weight[o * self.inp..(o + 1) * self.inp];
                let mut acc = self.bias[o];
                for (&a, &b) in w.iter().zip(row) {
                    acc += a * b;
                }
                y.push(acc);
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

impl<T: Scalar> CrossAttention<T> {
    /// Multi-head attention of `queries` over `context`. Query and key heads
    /// are rotated by the LieRE rotation of their own positions.
    pub fn forward(
        &self,
        queries: &[T],
        q_pos: &[[f64; 3]],
        context: &[T],
        c_pos: &[[f64; 3]],
        heads: usize,
        liere: &Liere,
    ) -> Vec<T> {
        let width = self.q.out;
        let hd = width / heads;
        let mut q = self.q.forward(queries);
        let mut k = self.k.forward(context);
        let v = self.v.forward(context);
        for (rows, pos) in [(&mut q, q_pos), (&mut k, c_pos)] {
            for (row, &p) in rows.chunks_exact_mut(width).zip(pos) {
                let rot = liere.block_rotation::<T>(p);
                for head in row.chunks_exact_mut(hd) {
                    Liere::rotate(&rot, head);
                }
            }
        }
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let nk = c_pos.len();
        let mut mixed = vec![T::zero(); q_pos.len() * width];
        let mut scores = vec![T::zero(); nk];
        for (qi, qrow) in q.chunks_exact(width).enumerate() {
            for h in 0..heads {
                let qh = &qrow[h * hd..(h + 1) * hd];
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &k[j * width + h * hd..j * width + (h + 1) * hd];
                    let mut dot = T::zero();
                    for (&a, &b) in qh.iter().zip(kh) {
                        dot += a * b;
                    }
                    *s = dot * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut mixed[qi * width + h * hd..qi * width + (h + 1) * hd];
                for (j, &s) in scores.iter().enumerate() {
                    let p = s / sum;
                    let vh = &v[j * width + h * hd..j * width + (h + 1) * hd];
                    for (o, &x) in out.iter_mut().zip(vh) {
                        *o += p * x;
                    }
                }
            }
        }
        self.o.forward(&mixed)
    }
}

/// `h <- normalize(h + alpha * (normalize(update) - h))`, row by row.
pub fn hypersphere_update<T: Scalar>(state: &mut [T], update: &mut [T], alpha: &[T]) {
    let e = alpha.len();
    for (h, u) in state.chunks_exact_mut(e).zip(update.chunks_exact_mut(e)) {
        normalize_in_place(u);
        for ((hv, &uv), &a) in h.iter_mut().zip(u.iter()).zip(alpha) {
            *hv += a * (uv - *hv);
        }
        normalize_in_place(h);
    }
}

#[derive(Clone, Debug)]
pub struct AttentionLayer<T> {
    pub token_to_image: CrossAttention<T>,
    pub image_to_token: CrossAttention<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub alpha_t2i: Vec<T>,
    pub alpha_i2t: Vec<T>,
    pub alpha_mlp: Vec<T>,
}

impl<T: Scalar> AttentionLayer<T> {
    pub fn forward(
        &self,
        image: &mut [T],
        image_pos: &[[f64; 3]],
        tokens: &mut [T],
        token_pos: &[[f64; 3]],
        heads: usize,
        liere: &Liere,
    ) {
        let mut upd = self
            .token_to_image
            .forward(tokens, token_pos, image, image_pos, heads, liere);
        hypersphere_update(tokens, &mut upd, &self.alpha_t2i);

        let mut upd = self
            .image_to_token
            .forward(image, image_pos, tokens, token_pos, heads, liere);
        hypersphere_update(image, &mut upd, &self.alpha_i2t);

        let mut hidden = self.fc1.forward(tokens);
        for v in &mut hidden {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let mut upd = self.fc2.forward(&hidden);
        hypersphere_update(tokens, &mut upd, &self.alpha_mlp);
    }
}

#[derive(Clone, Debug)]
pub struct BottleneckAttention<T> {
    pub layers: Vec<AttentionLayer<T>>,
    pub heads: usize,
    pub liere: Liere,
    pub dim: usize,
}

impl<T: Scalar> BottleneckAttention<T> {
    /// Runs all layers on voxel rows `image` (`N x E`) and token rows
    /// `tokens` (`T x E`). Both are unit-normalized on entry.
    pub fn forward(
        &self,
        image: &mut [T],
        image_pos: &[[f64; 3]],
        tokens: &mut [T],
        token_pos: &[[f64; 3]],
    ) -> Result<()> {
        self.run(image, image_pos, tokens, token_pos, |_, _, _| {})
    }

    /// As [`forward`](Self::forward), calling `inspect(layer, image, tokens)`
    /// after every layer.
    pub fn run(
        &self,
        image: &mut [T],
        image_pos: &[[f64; 3]],
        tokens: &mut [T],
        token_pos: &[[f64; 3]],
        mut inspect: impl FnMut(usize, &[T], &[T]),
    ) -> Result<()> {
        let e = self.dim;
        if image.len() != image_pos.len() * e || tokens.len() != token_pos.len() * e {
            return Err(Error::Shape(format!(
                "attention expects rows of width {e}: {} image values for {} positions, {} token values for {} positions",
                image.len(),
                image_pos.len(),
                tokens.len(),
                token_pos.len()
            )));
        }
        for row in image.chunks_exact_mut(e).chain(tokens.chunks_exact_mut(e)) {
            normalize_in_place(row);
        }
        if tokens.is_empty() {
            return Ok(());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward(image, image_pos, tokens, token_pos, self.heads, &self.liere);
            inspect(l, image, tokens);
        }
        Ok(())
    }
}
