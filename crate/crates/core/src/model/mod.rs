//! The segmentation network: a residual 3D U-Net whose bottleneck exchanges
//! information with the lesion prompt tokens through two-way attention, and
//! a prompt-conditioned head emitting one logit map per lesion.

pub mod attention;
pub mod config;
pub mod liere;
pub mod unet;
pub mod weights;

pub use attention::{BottleneckAttention, Linear};
pub use config::{ModelConfig, DOWNSAMPLE, STAGES};
pub use liere::{liere_rotations, Liere};
pub use weights::{load_weights, ModelWeights, WeightTensor, LENS_MAGIC, LENS_VERSION};

use attention::{AttentionLayer, CrossAttention};
use unet::{Decoder, Encoder, EncoderStage, ResBlock};

use crate::error::{Error, Result};
use crate::prompt::{PromptEncoder, PromptTokens};
use crate::scalar::Scalar;
use crate::tensor::{Kernel, Tensor4};

/// Scales `v` to unit L2 norm; the zero vector is left unchanged.
pub fn normalize_in_place<T: Scalar>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm > T::zero() {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Executable network with weights converted to `T`.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub prompt: PromptEncoder<T>,
    pub encoder: Encoder<T>,
    pub attention: BottleneckAttention<T>,
    pub decoder: Decoder<T>,
    /// Maps a prompt embedding to per-channel head weights plus a bias.
    pub head: Linear<T>,
}

struct Fetch<'a> {
    w: &'a ModelWeights,
}

impl Fetch<'_> {
    fn raw(&self, name: &str) -> Result<&WeightTensor> {
        self.w
            .get(name)
            .ok_or_else(|| Error::Manifest(vec![format!("missing tensor {name}")]))
    }

    fn vec<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        Ok(self.raw(name)?.data.iter().map(|&v| T::of_f32(v)).collect())
    }

    fn conv<T: Scalar>(&self, name: &str) -> Result<Kernel<T>> {
        let w = self.raw(&format!("{name}.weight"))?;
        if w.shape.len() != 5 {
            return Err(Error::Manifest(vec![format!("{name}.weight is not a 5D kernel")]));
        }
        Kernel::new(
            w.shape[0],
            w.shape[1],
            w.shape[2],
            self.vec(&format!("{name}.weight"))?,
            self.vec(&format!("{name}.bias"))?,
        )
    }

    fn opt_conv<T: Scalar>(&self, name: &str) -> Result<Option<Kernel<T>>> {
        if self.w.get(&format!("{name}.weight")).is_some() {
            self.conv(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn linear<T: Scalar>(&self, name: &str) -> Result<Linear<T>> {
        let w = self.raw(&format!("{name}.weight"))?;
        Ok(Linear {
            out: w.shape[0],
            inp: w.shape[1],
            weight: self.vec(&format!("{name}.weight"))?,
            bias: self.vec(&format!("{name}.bias"))?,
        })
    }

    fn block<T: Scalar>(&self, prefix: &str) -> Result<ResBlock<T>> {
        Ok(ResBlock {
            conv1: self.conv(&format!("{prefix}.conv1"))?,
            conv2: self.conv(&format!("{prefix}.conv2"))?,
            proj: self.opt_conv(&format!("{prefix}.proj"))?,
        })
    }
}

impl<T: Scalar> Network<T> {
    /// Validates `weights` against `config` and converts them to `T`.
    pub fn new(config: &ModelConfig, weights: &ModelWeights) -> Result<Self> {
        weights.validate(config)?;
        let f = Fetch { w: weights };
        let e = config.embedding_dim;

        let stages = (0..STAGES)
            .map(|s| {
                Ok(EncoderStage {
                    down: if s == 0 {
                        None
                    } else {
                        Some(f.conv(&format!("enc.{s}.down"))?)
                    },
                    block: f.block(&format!("enc.{s}"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..STAGES - 1)
            .rev()
            .map(|s| f.block(&format!("dec.{s}")))
            .collect::<Result<Vec<_>>>()?;

        let role = f.vec::<T>("prompt.role")?;
        let prompt = PromptEncoder {
            role: [role[..e].to_vec(), role[e..].to_vec()],
            lesion: f.vec("prompt.lesion")?,
        };

        let layers = (0..config.attention_layers)
            .map(|l| {
                let cross = |dir: &str| -> Result<CrossAttention<T>> {
                    Ok(CrossAttention {
                        q: f.linear(&format!("attn.{l}.{dir}.q"))?,
                        k: f.linear(&format!("attn.{l}.{dir}.k"))?,
                        v: f.linear(&format!("attn.{l}.{dir}.v"))?,
                        o: f.linear(&format!("attn.{l}.{dir}.o"))?,
                    })
                };
                Ok(AttentionLayer {
                    token_to_image: cross("t2i")?,
                    image_to_token: cross("i2t")?,
                    fc1: f.linear(&format!("attn.{l}.mlp.fc1"))?,
                    fc2: f.linear(&format!("attn.{l}.mlp.fc2"))?,
                    alpha_t2i: f.vec(&format!("attn.{l}.alpha_t2i"))?,
                    alpha_i2t: f.vec(&format!("attn.{l}.alpha_i2t"))?,
                    alpha_mlp: f.vec(&format!("attn.{l}.alpha_mlp"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config: config.clone(),
            prompt,
            encoder: Encoder {
                in_channels: config.in_channels,
                stages,
            },
            attention: BottleneckAttention {
                layers,
                heads: config.heads,
                liere: Liere::from_flat(&f.raw("attn.liere.rates")?.data),
                dim: e,
            },
            decoder: Decoder { blocks },
            head: f.linear("head")?,
        })
    }

    pub fn encoder_forward(&self, patch: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<Tensor4<T>>)> {
        self.encoder.forward(patch)
    }

    /// Normalized positions of bottleneck voxel centers. A bottleneck voxel
    /// `j` is the output of three stride-2 convolutions centered on patch
    /// voxel `8 j`, i.e. normalized coordinate `j / bottleneck_dim`.
    pub fn voxel_positions(spatial: [usize; 3]) -> Vec<[f64; 3]> {
        let [d, h, w] = spatial;
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out.push([z as f64 / d as f64, y as f64 / h as f64, x as f64 / w as f64]);
                }
            }
        }
        out
    }

    /// Two-way attention between the bottleneck voxels and the prompt tokens.
    /// Returns the updated bottleneck (voxel channel vectors unit-norm) and
    /// the updated tokens.
    pub fn bottleneck_attention(
        &self,
        bottleneck: &Tensor4<T>,
        tokens: &PromptTokens<T>,
    ) -> Result<(Tensor4<T>, PromptTokens<T>)> {
        self.bottleneck_attention_with(bottleneck, tokens, |_, _, _| {})
    }

    /// As [`bottleneck_attention`](Self::bottleneck_attention), calling
    /// `inspect(layer, voxel_rows, token_rows)` after each layer.
    pub fn bottleneck_attention_with(
        &self,
        bottleneck: &Tensor4<T>,
        tokens: &PromptTokens<T>,
        inspect: impl FnMut(usize, &[T], &[T]),
    ) -> Result<(Tensor4<T>, PromptTokens<T>)> {
        let e = self.config.embedding_dim;
        if bottleneck.channels() != e {
            return Err(Error::Shape(format!(
                "bottleneck has {} channels, attention width is {e}",
                bottleneck.channels()
            )));
        }
        if let Some(t) = tokens.tokens.iter().find(|t| t.embedding.len() != e) {
            return Err(Error::Shape(format!(
                "token embedding width {} differs from {e}",
                t.embedding.len()
            )));
        }
        let n = bottleneck.plane_len();
        let mut image = vec![T::zero(); n * e];
        for c in 0..e {
            for (i, &v) in bottleneck.channel(c).iter().enumerate() {
                image[i * e + c] = v;
            }
        }
        let mut rows: Vec<T> = tokens.tokens.iter().flat_map(|t| t.embedding.iter().copied()).collect();
        let image_pos = Self::voxel_positions(bottleneck.spatial());
        let token_pos = tokens.positions();
        self.attention
            .run(&mut image, &image_pos, &mut rows, &token_pos, inspect)?;

        let mut out = Tensor4::zeros(bottleneck.shape());
        for c in 0..e {
            for (i, v) in out.channel_mut(c).iter_mut().enumerate() {
                *v = image[i * e + c];
            }
        }
        let mut updated = tokens.clone();
        for (t, row) in updated.tokens.iter_mut().zip(rows.chunks_exact(e)) {
            t.embedding.copy_from_slice(row);
        }
        Ok((out, updated))
    }

    /// Decoder plus prompt head: one logit channel per prompt at patch
    /// resolution. Each prompt's head is derived from the mean of its two
    /// updated tokens: `logit(v) = <w_p, features(v)> + b_p` with
    /// `(w_p, b_p) = head(token_mean_p)`.
    pub fn decoder_forward(
        &self,
        bottleneck: &Tensor4<T>,
        skips: &[Tensor4<T>],
        tokens: &PromptTokens<T>,
    ) -> Result<Tensor4<T>> {
        let features = self.decoder.forward(bottleneck, skips)?;
        self.head_forward(&features, tokens)
    }

    pub fn head_forward(&self, features: &Tensor4<T>, tokens: &PromptTokens<T>) -> Result<Tensor4<T>> {
        let f = features.channels();
        if self.head.out != f + 1 {
            return Err(Error::Shape(format!(
                "head emits {} weights for {f} feature channels",
                self.head.out
            )));
        }
        let prompts = tokens.prompt_count();
        if prompts == 0 {
            return Err(Error::Shape("no prompts for the head".into()));
        }
        let [_, d, h, w] = features.shape();
        let mut logits = Tensor4::zeros([prompts, d, h, w]);
        let half = T::from_f64_lossy(0.5);
        for p in 0..prompts {
            let a = &tokens.tokens[2 * p].embedding;
            let b = &tokens.tokens[2 * p + 1].embedding;
            let mean: Vec<T> = a.iter().zip(b).map(|(&x, &y)| (x + y) * half).collect();
            let params = self.head.forward(&mean);
            let out = logits.channel_mut(p);
            out.fill(params[f]);
            for c in 0..f {
                let wc = params[c];
                for (o, &v) in out.iter_mut().zip(features.channel(c)) {
                    *o += wc * v;
                }
            }
        }
        Ok(logits)
    }

    /// Full forward pass: per-prompt logits `(prompts, D, H, W)` for a
    /// single-channel patch whose spatial dims are multiples of 8.
    pub fn forward(&self, patch: &Tensor4<T>, tokens: &PromptTokens<T>) -> Result<Tensor4<T>> {
        let (bottleneck, skips) = self.encoder_forward(patch)?;
        let (bottleneck, tokens) = self.bottleneck_attention(&bottleneck, tokens)?;
        let logits = self.decoder_forward(&bottleneck, &skips, &tokens)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("network logits".into()));
        }
        Ok(logits)
    }
}
