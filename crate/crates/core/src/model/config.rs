use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// Defaults: a four-stage encoder `[8, 16, 32, 128]` (three stride-2
/// downsamplings, so patches must be divisible by 8), a decoder at half the
/// encoder width `[4, 8, 16]`, and a 128-wide bottleneck attention with two
/// two-way layers of four heads. Attention projects to half the embedding
/// width internally. This lands at about 1.44M parameters and 25G
/// multiply-accumulates on a 128^3 patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output width of each encoder stage, finest first.
    pub encoder_channels: Vec<usize>,
    /// Output width of the decoder block at each of the three finer stages,
    /// finest first.
    pub decoder_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub attention_layers: usize,
    pub heads: usize,
    /// Width of the query/key/value projections.
    pub attention_dim: usize,
    pub mlp_ratio: usize,
    pub max_patch: [usize; 3],
    pub liere_block_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            encoder_channels: vec![8, 16, 32, 128],
            decoder_channels: vec![4, 8, 16],
            embedding_dim: 128,
            attention_layers: 2,
            heads: 4,
            attention_dim: 64,
            mlp_ratio: 2,
            max_patch: [128, 128, 128],
            liere_block_size: 2,
        }
    }
}

pub const STAGES: usize = 4;
/// Spatial reduction from the patch to the bottleneck.
pub const DOWNSAMPLE: usize = 1 << (STAGES - 1);

impl ModelConfig {
    /// A deliberately small configuration for tests.
    pub fn tiny(width: usize) -> Self {
        Self {
            in_channels: 1,
            encoder_channels: vec![width; STAGES],
            decoder_channels: vec![width; STAGES - 1],
            embedding_dim: width,
            attention_layers: 1,
            heads: 1,
            attention_dim: width,
            mlp_ratio: 2,
            max_patch: [32, 32, 32],
            liere_block_size: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.encoder_channels.len() != STAGES {
            return err(format!("encoder needs {STAGES} stages, got {}", self.encoder_channels.len()));
        }
        if self.decoder_channels.len() != STAGES - 1 {
            return err(format!(
                "decoder needs {} stages, got {}",
                STAGES - 1,
                self.decoder_channels.len()
            ));
        }
        if self.in_channels == 0
            || self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0)
        {
            return err("channel counts must be positive".into());
        }
        if self.embedding_dim != self.encoder_channels[STAGES - 1] {
            return err(format!(
                "embedding dim {} must equal bottleneck width {}",
                self.embedding_dim,
                self.encoder_channels[STAGES - 1]
            ));
        }
        if self.heads == 0 || !self.attention_dim.is_multiple_of(self.heads) {
            return err(format!(
                "attention dim {} not divisible by {} heads",
                self.attention_dim, self.heads
            ));
        }
        if self.liere_block_size != 2 {
            return err(format!(
                "only 2x2 rotation blocks are supported, got {}",
                self.liere_block_size
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return err(format!("head dim {} must be even", self.head_dim()));
        }
        if self.mlp_ratio == 0 {
            return err("mlp ratio must be positive".into());
        }
        if self.max_patch.iter().any(|&d| d == 0 || d % DOWNSAMPLE != 0) {
            return err(format!(
                "max patch {:?} must be positive multiples of {DOWNSAMPLE}",
                self.max_patch
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.attention_dim / self.heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embedding_dim
    }

    /// Every tensor the network reads, with its exact shape, in file order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
            m.push((format!("{name}.weight"), vec![c_out, c_in, k, k, k]));
            m.push((format!("{name}.bias"), vec![c_out]));
        };
        let enc = &self.encoder_channels;
        let mut prev = self.in_channels;
        for (s, &c) in enc.iter().enumerate() {
            let block_in = if s == 0 {
                prev
            } else {
                conv(format!("enc.{s}.down"), c, prev, 3);
                c
            };
            conv(format!("enc.{s}.conv1"), c, block_in, 3);
            conv(format!("enc.{s}.conv2"), c, c, 3);
            if block_in != c {
                conv(format!("enc.{s}.proj"), c, block_in, 1);
            }
            prev = c;
        }
        for s in (0..STAGES - 1).rev() {
            let d = self.decoder_channels[s];
            let block_in = prev + enc[s];
            conv(format!("dec.{s}.conv1"), d, block_in, 3);
            conv(format!("dec.{s}.conv2"), d, d, 3);
            if block_in != d {
                conv(format!("dec.{s}.proj"), d, block_in, 1);
            }
            prev = d;
        }

        let e = self.embedding_dim;
        let a = self.attention_dim;
        m.push(("prompt.role".into(), vec![2, e]));
        m.push(("prompt.lesion".into(), vec![e]));
        m.push(("attn.liere.rates".into(), vec![self.head_dim() / 2, 3]));
        let mut linear = |name: String, out: usize, inp: usize| {
            m.push((format!("{name}.weight"), vec![out, inp]));
            m.push((format!("{name}.bias"), vec![out]));
        };
        for l in 0..self.attention_layers {
            for dir in ["t2i", "i2t"] {
                for p in ["q", "k", "v"] {
                    linear(format!("attn.{l}.{dir}.{p}"), a, e);
                }
                linear(format!("attn.{l}.{dir}.o"), e, a);
            }
            linear(format!("attn.{l}.mlp.fc1"), self.mlp_hidden(), e);
            linear(format!("attn.{l}.mlp.fc2"), e, self.mlp_hidden());
        }
        for l in 0..self.attention_layers {
            for which in ["t2i", "i2t", "mlp"] {
                m.push((format!("attn.{l}.alpha_{which}"), vec![e]));
            }
        }
        let d0 = self.decoder_channels[0];
        m.push(("head.weight".into(), vec![d0 + 1, e]));
        m.push(("head.bias".into(), vec![d0 + 1]));
        m
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Multiply-accumulate count of one forward pass on a patch of the given
    /// spatial size with `prompts` lesion prompts. Counts convolutions, linear
    /// projections, attention products and the prompt head; normalization,
    /// activations and resampling are excluded.
    pub fn mac_count(&self, patch: [usize; 3], prompts: usize) -> u64 {
        let vox = |s: usize| -> u64 { patch.iter().map(|&d| (d >> s) as u64).product() };
        let conv = |c_out: usize, c_in: usize, k: usize, v: u64| (c_out * c_in * k * k * k) as u64 * v;
        let enc = &self.encoder_channels;
        let mut total = 0u64;
        let mut prev = self.in_channels;
        for (s, &c) in enc.iter().enumerate() {
            let v = vox(s);
            let block_in = if s == 0 {
                prev
            } else {
                total += conv(c, prev, 3, v);
                c
            };
            total += conv(c, block_in, 3, v) + conv(c, c, 3, v);
            if block_in != c {
                total += conv(c, block_in, 1, v);
            }
            prev = c;
        }
        for s in (0..STAGES - 1).rev() {
            let d = self.decoder_channels[s];
            let block_in = prev + enc[s];
            let v = vox(s);
            total += conv(d, block_in, 3, v) + conv(d, d, 3, v);
            if block_in != d {
                total += conv(d, block_in, 1, v);
            }
            prev = d;
        }

        let e = self.embedding_dim as u64;
        let a = self.attention_dim as u64;
        let n = vox(STAGES - 1);
        let t = 2 * prompts as u64;
        let per_layer =
            // tokens attend to image
            t * e * a + 2 * n * e * a + 2 * t * n * a + t * a * e
            // image attends to tokens
            + n * e * a + 2 * t * e * a + 2 * n * t * a + n * a * e
            // token MLP
            + 2 * t * e * self.mlp_hidden() as u64;
        total += self.attention_layers as u64 * per_layer;

        let d0 = self.decoder_channels[0] as u64;
        total += prompts as u64 * (e * (d0 + 1) + d0 * vox(0));
        total
    }
}
