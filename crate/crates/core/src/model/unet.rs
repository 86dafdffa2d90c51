use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv3d, instance_norm, trilinear_resize, Kernel, Tensor4, INSTANCE_NORM_EPS};

use super::config::DOWNSAMPLE;

/// `relu(conv2(relu(conv1(instnorm(x))))) + proj(x)`, with `proj` the
/// identity when input and output widths agree.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub conv1: Kernel<T>,
    pub conv2: Kernel<T>,
    pub proj: Option<Kernel<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let normed = instance_norm(x, INSTANCE_NORM_EPS);
        let mut h = conv3d(&normed, &self.conv1, 1, 1)?;
        drop(normed);
        h.relu_inplace();
        let mut out = conv3d(&h, &self.conv2, 1, 1)?;
        drop(h);
        out.relu_inplace();
        match &self.proj {
            Some(p) => out.add_assign(&conv3d(x, p, 1, 0)?)?,
            None => out.add_assign(x)?,
        }
        debug_assert!(out.all_finite(), "non-finite activation in residual block");
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage<T> {
    /// Stride-2 convolution entering the stage; absent for the first stage.
    pub down: Option<Kernel<T>>,
    pub block: ResBlock<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub in_channels: usize,
    pub stages: Vec<EncoderStage<T>>,
}

impl<T: Scalar> Encoder<T> {
    /// Returns the bottleneck and the outputs of every stage but the last,
    /// finest first.
    pub fn forward(&self, patch: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<Tensor4<T>>)> {
        if patch.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "patch has {} channels, encoder expects {}",
                patch.channels(),
                self.in_channels
            )));
        }
        if patch.spatial().iter().any(|d| d % DOWNSAMPLE != 0) {
            return Err(Error::Shape(format!(
                "patch {:?} is not divisible by {DOWNSAMPLE}",
                patch.spatial()
            )));
        }
        let mut skips = Vec::with_capacity(self.stages.len() - 1);
        let mut x: Option<Tensor4<T>> = None;
        for stage in &self.stages {
            let input = match (&stage.down, x.take()) {
                (Some(down), Some(prev)) => {
                    let d = conv3d(&prev, down, 2, 1)?;
                    skips.push(prev);
                    d
                }
                (None, None) => patch.clone(),
                _ => return Err(Error::Internal("encoder stage layout".into())),
            };
            x = Some(stage.block.forward(&input)?);
        }
        Ok((x.expect("at least one stage"), skips))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    /// One block per skip level, coarsest first.
    pub blocks: Vec<ResBlock<T>>,
}

impl<T: Scalar> Decoder<T> {
    /// Upsample, concatenate the matching skip, refine; repeated up to the
    /// patch resolution.
    pub fn forward(&self, bottleneck: &Tensor4<T>, skips: &[Tensor4<T>]) -> Result<Tensor4<T>> {
        if skips.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "decoder has {} stages but got {} skips",
                self.blocks.len(),
                skips.len()
            )));
        }
        let mut x = bottleneck.clone();
        for (block, skip) in self.blocks.iter().zip(skips.iter().rev()) {
            let expected_in = block.conv1.c_in;
            if x.channels() + skip.channels() != expected_in {
                return Err(Error::Shape(format!(
                    "decoder block expects {expected_in} channels, got {} + {}",
                    x.channels(),
                    skip.channels()
                )));
            }
            let up = trilinear_resize(&x, skip.spatial())?;
            let cat = up.concat_channels(skip)?;
            drop(up);
            x = block.forward(&cat)?;
        }
        Ok(x)
    }
}
