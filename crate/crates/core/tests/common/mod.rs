//! Brute-force reference implementations used as oracles by the integration
//! and acceptance tests. Nothing here calls the library's numeric kernels.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recist3d::{ModelConfig, ModelWeights};

/// Dense `(C, D, H, W)` array in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Arr {
    pub fn zeros(c: usize, d: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            d,
            h,
            w,
            v: vec![0.0; c * d * h * w],
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, c: usize, d: usize, h: usize, w: usize) -> Self {
        let mut a = Self::zeros(c, d, h, w);
        for x in &mut a.v {
            *x = rng.random_range(-1.0..1.0);
        }
        a
    }

    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.v[((c * self.d + z) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, val: f64) {
        let i = ((c * self.d + z) * self.h + y) * self.w + x;
        self.v[i] = val;
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.d, self.h, self.w]
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Zero-padded cross-correlation, weights `(c_out, c_in, k, k, k)`.
pub fn conv(x: &Arr, weight: &[f64], bias: &[f64], c_out: usize, k: usize, stride: usize, pad: usize) -> Arr {
    let od = (x.d + 2 * pad - k) / stride + 1;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Arr::zeros(c_out, od, oh, ow);
    for co in 0..c_out {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..x.c {
                        for a in 0..k {
                            for b in 0..k {
                                for c in 0..k {
                                    let iz = (z * stride + a) as isize - pad as isize;
                                    let iy = (y * stride + b) as isize - pad as isize;
                                    let ix = (xo * stride + c) as isize - pad as isize;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= x.d as isize
                                        || iy >= x.h as isize
                                        || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    let wi = (((co * x.c + ci) * k + a) * k + b) * k + c;
                                    acc += weight[wi] * x.at(ci, iz as usize, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(co, z, y, xo, acc);
                }
            }
        }
    }
    out
}

/// Two-pass mean/variance normalization per channel.
pub fn instance_norm(x: &Arr, eps: f64) -> Arr {
    let mut out = x.clone();
    let n = x.d * x.h * x.w;
    for c in 0..x.c {
        let ch = &x.v[c * n..(c + 1) * n];
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        for (o, v) in out.v[c * n..(c + 1) * n].iter_mut().zip(ch) {
            *o = (v - mean) / (var + eps).sqrt();
        }
    }
    out
}

/// Block maximum with ragged high-edge blocks.
pub fn max_pool(x: &Arr, f: [usize; 3]) -> Arr {
    let (od, oh, ow) = (x.d.div_ceil(f[0]), x.h.div_ceil(f[1]), x.w.div_ceil(f[2]));
    let mut out = Arr::zeros(x.c, od, oh, ow);
    for c in 0..x.c {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for a in z * f[0]..((z + 1) * f[0]).min(x.d) {
                        for b in y * f[1]..((y + 1) * f[1]).min(x.h) {
                            for cc in xo * f[2]..((xo + 1) * f[2]).min(x.w) {
                                m = m.max(x.at(c, a, b, cc));
                            }
                        }
                    }
                    out.set(c, z, y, xo, m);
                }
            }
        }
    }
    out
}

/// Per-axis taps `(lo, hi, weight of hi)` for half-pixel-center resampling.
fn taps(src: usize, dst: usize, i: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let lo = (s.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    let t = if hi == lo { 0.0 } else { s - lo as f64 };
    (lo, hi, t)
}

/// Trilinear interpolation as an explicit 8-corner weighted sum.
pub fn trilinear(x: &Arr, dst: [usize; 3]) -> Arr {
    let mut out = Arr::zeros(x.c, dst[0], dst[1], dst[2]);
    for c in 0..x.c {
        for z in 0..dst[0] {
            let (z0, z1, tz) = taps(x.d, dst[0], z);
            for y in 0..dst[1] {
                let (y0, y1, ty) = taps(x.h, dst[1], y);
                for xo in 0..dst[2] {
                    let (x0, x1, tx) = taps(x.w, dst[2], xo);
                    let mut acc = 0.0;
                    for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                        for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                            for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                acc += wz * wy * wx * x.at(c, zi, yi, xi);
                            }
                        }
                    }
                    out.set(c, z, y, xo, acc);
                }
            }
        }
    }
    out
}

/// Dense `dim x dim` rotation from per-block rates, built from scratch.
pub fn liere_matrix(rates: &[[f64; 3]], p: [f64; 3]) -> Vec<f64> {
    let n = rates.len();
    let dim = 2 * n;
    let mut m = vec![0.0; dim * dim];
    for (k, r) in rates.iter().enumerate() {
        let theta = if n > 1 { PI * 16f64.powf(k as f64 / (n - 1) as f64) } else { PI };
        let a = theta * (r[0] * p[0] + r[1] * p[1] + r[2] * p[2]);
        let i = 2 * k;
        m[i * dim + i] = a.cos();
        m[i * dim + i + 1] = -a.sin();
        m[(i + 1) * dim + i] = a.sin();
        m[(i + 1) * dim + i + 1] = a.cos();
    }
    m
}

pub fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Weights with every tensor, biases included, drawn at random so that no
/// term of the forward pass is trivially zero.
pub fn dense_random_weights(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    let mut w = ModelWeights::random(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = w.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        if n.ends_with(".bias") {
            for v in &mut w.get_mut(&n).unwrap().data {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    w
}

/// Straight-line forward pass reading tensors by name.
pub struct Reference<'a> {
    pub cfg: &'a ModelConfig,
    pub w: &'a ModelWeights,
}

pub struct RefTokens {
    /// `(2P, E)` rows.
    pub rows: Vec<Vec<f64>>,
    pub pos: Vec<[f64; 3]>,
}

impl Reference<'_> {
    fn t(&self, name: &str) -> (Vec<usize>, Vec<f64>) {
        let t = self.w.get(name).unwrap_or_else(|| panic!("missing {name}"));
        (t.shape.clone(), t.data.iter().map(|&v| v as f64).collect())
    }

    fn conv_named(&self, x: &Arr, name: &str, stride: usize, pad: usize) -> Arr {
        let (s, w) = self.t(&format!("{name}.weight"));
        let (_, b) = self.t(&format!("{name}.bias"));
        conv(x, &w, &b, s[0], s[2], stride, pad)
    }

    fn linear(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (s, w) = self.t(&format!("{name}.weight"));
        let (_, b) = self.t(&format!("{name}.bias"));
        (0..s[0]).map(|o| b[o] + (0..s[1]).map(|i| w[o * s[1] + i] * x[i]).sum::<f64>()).collect()
    }

    fn block(&self, x: &Arr, prefix: &str) -> Arr {
        let n = instance_norm(x, 1e-5);
        let mut h = self.conv_named(&n, &format!("{prefix}.conv1"), 1, 1);
        h.v.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut o = self.conv_named(&h, &format!("{prefix}.conv2"), 1, 1);
        o.v.iter_mut().for_each(|v| *v = v.max(0.0));
        let skip = if self.w.get(&format!("{prefix}.proj.weight")).is_some() {
            self.conv_named(x, &format!("{prefix}.proj"), 1, 0)
        } else {
            x.clone()
        };
        for (a, b) in o.v.iter_mut().zip(&skip.v) {
            *a += b;
        }
        o
    }

    pub fn encoder(&self, patch: &Arr) -> (Arr, Vec<Arr>) {
        let mut skips = Vec::new();
        let mut x = self.block(patch, "enc.0");
        for s in 1..4 {
            skips.push(x.clone());
            let d = self.conv_named(&x, &format!("enc.{s}.down"), 2, 1);
            x = self.block(&d, &format!("enc.{s}"));
        }
        (x, skips)
    }

    pub fn tokens(&self, endpoints: &[[f64; 3]]) -> RefTokens {
        let (_, role) = self.t("prompt.role");
        let (_, lesion) = self.t("prompt.lesion");
        let e = lesion.len();
        let rows = endpoints
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let r = &role[(i % 2) * e..(i % 2 + 1) * e];
                unit(&r.iter().zip(&lesion).map(|(a, b)| a + b).collect::<Vec<_>>())
            })
            .collect();
        RefTokens {
            rows,
            pos: endpoints.to_vec(),
        }
    }

    fn rates(&self) -> Vec<[f64; 3]> {
        let (_, r) = self.t("attn.liere.rates");
        r.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    fn cross(&self, name: &str, q_in: &[Vec<f64>], q_pos: &[[f64; 3]], c_in: &[Vec<f64>], c_pos: &[[f64; 3]]) -> Vec<Vec<f64>> {
        let heads = self.cfg.heads;
        let a = self.cfg.attention_dim;
        let hd = a / heads;
        let rates = self.rates();
        let rot = |rows: Vec<Vec<f64>>, pos: &[[f64; 3]]| -> Vec<Vec<f64>> {
            rows.into_iter()
                .zip(pos)
                .map(|(r, &p)| {
                    let m = liere_matrix(&rates, p);
                    (0..heads).flat_map(|h| matvec(&m, &r[h * hd..(h + 1) * hd])).collect()
                })
                .collect()
        };
        let q = rot(q_in.iter().map(|r| self.linear(&format!("{name}.q"), r)).collect(), q_pos);
        let k = rot(c_in.iter().map(|r| self.linear(&format!("{name}.k"), r)).collect(), c_pos);
        let v: Vec<Vec<f64>> = c_in.iter().map(|r| self.linear(&format!("{name}.v"), r)).collect();
        q.iter()
            .map(|qr| {
                let mut mixed = vec![0.0; a];
                for h in 0..heads {
                    let s: Vec<f64> = k
                        .iter()
                        .map(|kr| (0..hd).map(|i| qr[h * hd + i] * kr[h * hd + i]).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    for (j, sj) in s.iter().enumerate() {
                        let p = (sj - m).exp() / z;
                        for i in 0..hd {
                            mixed[h * hd + i] += p * v[j][h * hd + i];
                        }
                    }
                }
                self.linear(&format!("{name}.o"), &mixed)
            })
            .collect()
    }

    fn step(&self, state: &mut [Vec<f64>], upd: &[Vec<f64>], alpha: &[f64]) {
        for (h, u) in state.iter_mut().zip(upd) {
            let u = unit(u);
            let mixed: Vec<f64> = h.iter().zip(&u).zip(alpha).map(|((hv, uv), a)| hv + a * (uv - hv)).collect();
            *h = unit(&mixed);
        }
    }

    /// Returns updated voxel rows `(N, E)` and token rows.
    pub fn attention(&self, bottleneck: &Arr, tokens: &RefTokens) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = bottleneck.d * bottleneck.h * bottleneck.w;
        let mut img: Vec<Vec<f64>> = (0..n)
            .map(|i| unit(&(0..bottleneck.c).map(|c| bottleneck.v[c * n + i]).collect::<Vec<_>>()))
            .collect();
        let mut img_pos = Vec::with_capacity(n);
        for z in 0..bottleneck.d {
            for y in 0..bottleneck.h {
                for x in 0..bottleneck.w {
                    img_pos.push([
                        z as f64 / bottleneck.d as f64,
                        y as f64 / bottleneck.h as f64,
                        x as f64 / bottleneck.w as f64,
                    ]);
                }
            }
        }
        let mut tok: Vec<Vec<f64>> = tokens.rows.iter().map(|r| unit(r)).collect();
        for l in 0..self.cfg.attention_layers {
            let (_, a_t2i) = self.t(&format!("attn.{l}.alpha_t2i"));
            let (_, a_i2t) = self.t(&format!("attn.{l}.alpha_i2t"));
            let (_, a_mlp) = self.t(&format!("attn.{l}.alpha_mlp"));
            let u = self.cross(&format!("attn.{l}.t2i"), &tok, &tokens.pos, &img, &img_pos);
            self.step(&mut tok, &u, &a_t2i);
            let u = self.cross(&format!("attn.{l}.i2t"), &img, &img_pos, &tok, &tokens.pos);
            self.step(&mut img, &u, &a_i2t);
            let u: Vec<Vec<f64>> = tok
                .iter()
                .map(|t| {
                    let h: Vec<f64> = self.linear(&format!("attn.{l}.mlp.fc1"), t).into_iter().map(|v| v.max(0.0)).collect();
                    self.linear(&format!("attn.{l}.mlp.fc2"), &h)
                })
                .collect();
            self.step(&mut tok, &u, &a_mlp);
        }
        (img, tok)
    }

    /// Full forward: logits `(P, D, H, W)`.
    pub fn forward(&self, patch: &Arr, endpoints: &[[f64; 3]]) -> Arr {
        let (b, skips) = self.encoder(patch);
        let tokens = self.tokens(endpoints);
        let (img, tok) = self.attention(&b, &tokens);
        let n = b.d * b.h * b.w;
        let mut x = Arr::zeros(b.c, b.d, b.h, b.w);
        for (i, row) in img.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                x.v[c * n + i] = v;
            }
        }
        for s in (0..3).rev() {
            let sk = &skips[s];
            let up = trilinear(&x, [sk.d, sk.h, sk.w]);
            let mut cat = Arr::zeros(up.c + sk.c, sk.d, sk.h, sk.w);
            cat.v[..up.v.len()].copy_from_slice(&up.v);
            cat.v[up.v.len()..].copy_from_slice(&sk.v);
            x = self.block(&cat, &format!("dec.{s}"));
        }
        let prompts = tok.len() / 2;
        let m = x.d * x.h * x.w;
        let mut out = Arr::zeros(prompts, x.d, x.h, x.w);
        for p in 0..prompts {
            let mean: Vec<f64> = tok[2 * p].iter().zip(&tok[2 * p + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
            let params = self.linear("head", &mean);
            for i in 0..m {
                let mut acc = params[x.c];
                for c in 0..x.c {
                    acc += params[c] * x.v[c * m + i];
                }
                out.v[p * m + i] = acc;
            }
        }
        out
    }
}

/// Per-label counts by sorting a copy and measuring runs.
pub fn sorted_counts(mask: &[u16], expected: &[u16]) -> Vec<u64> {
    let mut s = mask.to_vec();
    s.sort_unstable();
    let mut runs: Vec<(u16, u64)> = Vec::new();
    for v in s {
        match runs.last_mut() {
            Some((l, n)) if *l == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    expected
        .iter()
        .map(|e| runs.iter().find(|(l, _)| l == e).map_or(0, |r| r.1))
        .collect()
}

/// Normalized surface dice by explicit all-pairs boundary distances.
pub fn nsd_all_pairs(p: &[bool], g: &[bool], shape: [usize; 3], spacing: [f64; 3], tol: f64) -> f64 {
    let [d, h, w] = shape;
    let coord = |i: usize| [i / (h * w), (i / w) % h, i % w];
    let inside = |m: &[bool], c: [isize; 3]| -> bool {
        c[0] >= 0
            && c[1] >= 0
            && c[2] >= 0
            && (c[0] as usize) < d
            && (c[1] as usize) < h
            && (c[2] as usize) < w
            && m[(c[0] as usize * h + c[1] as usize) * w + c[2] as usize]
    };
    let surface = |m: &[bool]| -> Vec<[usize; 3]> {
        (0..m.len())
            .filter(|&i| m[i])
            .map(coord)
            .filter(|c| {
                let ci = c.map(|v| v as isize);
                [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                    .iter()
                    .any(|o: &[isize; 3]| !inside(m, [ci[0] + o[0], ci[1] + o[1], ci[2] + o[2]]))
            })
            .collect()
    };
    let (bp, bg) = (surface(p), surface(g));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let dist = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
        (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2)).sum::<f64>().sqrt()
    };
    let close = |from: &[[usize; 3]], to: &[[usize; 3]]| -> usize {
        from.iter()
            .filter(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min) <= tol)
            .count()
    };
    (close(&bp, &bg) + close(&bg, &bp)) as f64 / (bp.len() + bg.len()) as f64
}
