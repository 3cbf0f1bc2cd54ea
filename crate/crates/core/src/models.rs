//! Encoder, autoencoder, linear classifier head and the end-to-end
//! supervised classifier, built from tensor ops.
//!
//! The encoder halves the spatial extent with stride-2 3x3 convolutions
//! until a 4x4 feature map remains, then projects it densely to the latent
//! vector. The decoder mirrors it: dense un-projection back to 4x4, then
//! repeated 2x nearest upsampling + 3x3 convolution, ending in a sigmoid so
//! reconstructions live in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, Rng};
use crate::tensor::{no_grad, ParamBlock, Scalar, Tensor};

/// Image channels of every patch (RGB).
pub const IMAGE_CHANNELS: usize = 3;
/// Spatial extent left after the last encoder stage.
pub const BOTTLENECK_EXTENT: usize = 4;
pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_LATENT_DIM: usize = 128;

/// Which image the autoencoder reconstructs from an H&E input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetStain {
    /// H&E -> H&E.
    SameStain,
    /// H&E -> IHC.
    CrossStain,
}

impl fmt::Display for TargetStain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetStain::SameStain => "same",
            TargetStain::CrossStain => "cross",
        })
    }
}

impl FromStr for TargetStain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "same" | "same_stain" | "he" => Ok(TargetStain::SameStain),
            "cross" | "cross_stain" | "ihc" => Ok(TargetStain::CrossStain),
            other => Err(Error::Config(format!(
                "unknown target stain {other:?} (expected same or cross)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureConfig {
    pub patch_size: usize,
    pub latent_dim: usize,
    /// Channels of the first stage; doubles per stage up to `channel_cap`.
    pub base_channels: usize,
    pub channel_cap: usize,
    pub target_stain: TargetStain,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            patch_size: 64,
            latent_dim: DEFAULT_LATENT_DIM,
            base_channels: 16,
            channel_cap: 128,
            target_stain: TargetStain::SameStain,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.patch_size;
        if !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch size must be a power of two, got {s}"
            )));
        }
        if !(16..=256).contains(&s) {
            return Err(Error::Config(format!(
                "patch size must lie in 16..=256, got {s}"
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.base_channels == 0 || self.channel_cap == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Number of stride-2 stages: `log2(patch_size) - 2`.
    pub fn stage_count(&self) -> usize {
        (self.patch_size.trailing_zeros() as usize)
            .saturating_sub(BOTTLENECK_EXTENT.trailing_zeros() as usize)
    }

    /// Output channels of each encoder stage.
    pub fn channel_schedule(&self) -> Vec<usize> {
        (0..self.stage_count())
            .map(|i| (self.base_channels << i.min(30)).min(self.channel_cap))
            .collect()
    }

    fn flat_features(&self) -> usize {
        self.channel_schedule()
            .last()
            .copied()
            .unwrap_or(IMAGE_CHANNELS)
            * BOTTLENECK_EXTENT
            * BOTTLENECK_EXTENT
    }
}

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let n: usize = shape.iter().product();
    Tensor::parameter(
        shape,
        (0..n)
            .map(|_| T::from_f64_lossy(dist.sample(rng)))
            .collect(),
    )
}

/// 3x3 convolution parameters.
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ConvLayer {
            kernel: he_uniform(&[out_channels, in_channels, 3, 3], in_channels * 9, rng)?,
            bias: Tensor::parameter(&[out_channels], vec![T::zero(); out_channels])?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }
}

/// Affine layer with weight `[in, out]`.
#[derive(Clone, Debug)]
pub struct DenseLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DenseLayer {
            weight: he_uniform(&[fan_in, fan_out], fan_in, rng)?,
            bias: Tensor::parameter(&[fan_out], vec![T::zero(); fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.dense(&self.weight, &self.bias)
    }
}

/// Strided-convolution encoder producing `[N, latent_dim]` latents.
#[derive(Clone, Debug)]
pub struct EncoderModel<T: Scalar> {
    pub stages: Vec<ConvLayer<T>>,
    pub projection: DenseLayer<T>,
    patch_size: usize,
    latent_dim: usize,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new(config: &ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng(derive_seed(seed, "encoder"));
        let mut stages = Vec::new();
        let mut channels = IMAGE_CHANNELS;
        for out in config.channel_schedule() {
            stages.push(ConvLayer::new(channels, out, &mut rng)?);
            channels = out;
        }
        Ok(EncoderModel {
            stages,
            projection: DenseLayer::new(config.flat_features(), config.latent_dim, &mut rng)?,
            patch_size: config.patch_size,
            latent_dim: config.latent_dim,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn encode(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let s = batch.shape();
        if s.len() != 4
            || s[1] != IMAGE_CHANNELS
            || s[2] != self.patch_size
            || s[3] != self.patch_size
        {
            return Err(Error::Input(format!(
                "encoder expects [N, {IMAGE_CHANNELS}, {p}, {p}], got {s:?}",
                p = self.patch_size
            )));
        }
        let mut h = batch.clone();
        for stage in &self.stages {
            h = h.conv2d(&stage.kernel, &stage.bias, 2, 1)?.relu();
        }
        self.projection.forward(&h.flatten()?)
    }

    /// Latents computed without recording gradients.
    pub fn encode_frozen(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        no_grad(|| self.encode(batch))
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("encoder.conv{i}.kernel"), s.kernel.clone()));
            out.push((format!("encoder.conv{i}.bias"), s.bias.clone()));
        }
        out.push(("encoder.proj.weight".into(), self.projection.weight.clone()));
        out.push(("encoder.proj.bias".into(), self.projection.bias.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    /// Rebuilds an encoder from checkpoint blocks, inferring the
    /// architecture from the stored shapes.
    pub fn from_blocks(blocks: &[ParamBlock]) -> Result<Self> {
        let mut stages = Vec::new();
        while let Some(kernel) = find_block(blocks, &format!("encoder.conv{}.kernel", stages.len()))
        {
            let bias = require_block(blocks, &format!("encoder.conv{}.bias", stages.len()))?;
            stages.push(ConvLayer {
                kernel: block_param(kernel)?,
                bias: block_param(bias)?,
            });
        }
        if stages.is_empty() {
            return Err(Error::Config("checkpoint holds no encoder stages".into()));
        }
        let projection = DenseLayer {
            weight: block_param(require_block(blocks, "encoder.proj.weight")?)?,
            bias: block_param(require_block(blocks, "encoder.proj.bias")?)?,
        };
        let latent_dim = projection.weight.shape()[1];
        let patch_size = BOTTLENECK_EXTENT << stages.len();
        let model = EncoderModel {
            stages,
            projection,
            patch_size,
            latent_dim,
        };
        model.check_consistency()?;
        Ok(model)
    }

    fn check_consistency(&self) -> Result<()> {
        let mut channels = IMAGE_CHANNELS;
        for (i, s) in self.stages.iter().enumerate() {
            let k = s.kernel.shape();
            if k.len() != 4
                || k[1] != channels
                || k[2] != 3
                || k[3] != 3
                || s.bias.shape() != [k[0]]
            {
                return Err(Error::Config(format!(
                    "encoder stage {i} has inconsistent shapes {k:?}"
                )));
            }
            channels = k[0];
        }
        let flat = channels * BOTTLENECK_EXTENT * BOTTLENECK_EXTENT;
        let w = self.projection.weight.shape();
        if w.len() != 2 || w[0] != flat || self.projection.bias.shape() != [w[1]] {
            return Err(Error::Config(format!(
                "encoder projection {w:?} does not match {flat} flattened features"
            )));
        }
        Ok(())
    }
}

/// Encoder plus mirrored upsampling decoder.
#[derive(Clone, Debug)]
pub struct AutoencoderModel<T: Scalar> {
    pub encoder: EncoderModel<T>,
    pub unprojection: DenseLayer<T>,
    pub stages: Vec<ConvLayer<T>>,
    pub target_stain: TargetStain,
}

impl<T: Scalar> AutoencoderModel<T> {
    pub fn new(config: &ArchitectureConfig, seed: u64) -> Result<Self> {
        let encoder = EncoderModel::new(config, seed)?;
        let mut rng = rng(derive_seed(seed, "decoder"));
        let schedule = config.channel_schedule();
        let unprojection = DenseLayer::new(config.latent_dim, config.flat_features(), &mut rng)?;
        let mut stages = Vec::new();
        let mut channels = *schedule.last().unwrap_or(&IMAGE_CHANNELS);
        for i in (0..schedule.len()).rev() {
            let out = if i == 0 {
                IMAGE_CHANNELS
            } else {
                schedule[i - 1]
            };
            stages.push(ConvLayer::new(channels, out, &mut rng)?);
            channels = out;
        }
        Ok(AutoencoderModel {
            encoder,
            unprojection,
            stages,
            target_stain: config.target_stain,
        })
    }

    pub fn decode(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        let s = latents.shape();
        let latent_dim = self.encoder.latent_dim();
        if s.len() != 2 || s[1] != latent_dim {
            return Err(Error::Input(format!(
                "decoder expects [N, {latent_dim}] latents, got {s:?}"
            )));
        }
        let channels = self
            .stages
            .first()
            .map_or(IMAGE_CHANNELS, |st| st.kernel.shape()[1]);
        let mut h = self.unprojection.forward(latents)?.relu().reshape(&[
            s[0],
            channels,
            BOTTLENECK_EXTENT,
            BOTTLENECK_EXTENT,
        ])?;
        let last = self.stages.len().saturating_sub(1);
        for (i, stage) in self.stages.iter().enumerate() {
            h = h.upsample_conv2d(&stage.kernel, &stage.bias, 2)?;
            h = if i == last { h.sigmoid() } else { h.relu() };
        }
        Ok(h)
    }

    pub fn reconstruct(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encoder.encode(batch)?)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.encoder.named_parameters();
        out.push((
            "decoder.unproj.weight".into(),
            self.unprojection.weight.clone(),
        ));
        out.push(("decoder.unproj.bias".into(), self.unprojection.bias.clone()));
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("decoder.conv{i}.kernel"), s.kernel.clone()));
            out.push((format!("decoder.conv{i}.bias"), s.bias.clone()));
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    pub fn from_blocks(blocks: &[ParamBlock], target_stain: TargetStain) -> Result<Self> {
        let encoder = EncoderModel::from_blocks(blocks)?;
        let unprojection = DenseLayer {
            weight: block_param(require_block(blocks, "decoder.unproj.weight")?)?,
            bias: block_param(require_block(blocks, "decoder.unproj.bias")?)?,
        };
        let mut stages = Vec::new();
        for i in 0..encoder.stages.len() {
            stages.push(ConvLayer {
                kernel: block_param(require_block(blocks, &format!("decoder.conv{i}.kernel"))?)?,
                bias: block_param(require_block(blocks, &format!("decoder.conv{i}.bias"))?)?,
            });
        }
        Ok(AutoencoderModel {
            encoder,
            unprojection,
            stages,
            target_stain,
        })
    }
}

/// One dense layer from latents to three class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T: Scalar> {
    pub layer: DenseLayer<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(latent_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng(derive_seed(seed, "head"));
        Ok(ClassifierHead {
            layer: DenseLayer::new(latent_dim, NUM_CLASSES, &mut rng)?,
        })
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2
            || weight.shape()[1] != NUM_CLASSES
            || bias.shape() != [NUM_CLASSES]
        {
            return Err(Error::Config(format!(
                "classifier head needs weight [d, {NUM_CLASSES}] and bias [{NUM_CLASSES}], got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(ClassifierHead {
            layer: DenseLayer { weight, bias },
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.layer.weight.shape()[0]
    }

    pub fn classify_latent(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        if latents.shape().len() != 2 || latents.shape()[1] != self.latent_dim() {
            return Err(Error::Input(format!(
                "head expects [N, {}] latents, got {:?}",
                self.latent_dim(),
                latents.shape()
            )));
        }
        self.layer.forward(latents)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("head.weight".into(), self.layer.weight.clone()),
            ("head.bias".into(), self.layer.bias.clone()),
        ]
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        vec![self.layer.weight.clone(), self.layer.bias.clone()]
    }

    pub fn from_blocks(blocks: &[ParamBlock]) -> Result<Self> {
        Self::from_parts(
            block_param(require_block(blocks, "head.weight")?)?,
            block_param(require_block(blocks, "head.bias")?)?,
        )
    }
}

/// Encoder and head trained jointly from scratch.
#[derive(Clone, Debug)]
pub struct SupervisedClassifier<T: Scalar> {
    pub encoder: EncoderModel<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> SupervisedClassifier<T> {
    pub fn new(config: &ArchitectureConfig, seed: u64) -> Result<Self> {
        // separate seed domain so it never coincides with a pretrained encoder
        let seed = derive_seed(seed, "supervised");
        let encoder = EncoderModel::new(config, seed)?;
        let head = ClassifierHead::new(config.latent_dim, seed)?;
        Ok(SupervisedClassifier { encoder, head })
    }

    pub fn classify(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.classify_latent(&self.encoder.encode(batch)?)
    }

    /// Logits with the encoder treated as a constant feature extractor.
    pub fn classify_frozen_encoder(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.head
            .classify_latent(&self.encoder.encode_frozen(batch)?)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.encoder.named_parameters();
        out.extend(self.head.named_parameters());
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    pub fn from_blocks(blocks: &[ParamBlock]) -> Result<Self> {
        Ok(SupervisedClassifier {
            encoder: EncoderModel::from_blocks(blocks)?,
            head: ClassifierHead::from_blocks(blocks)?,
        })
    }
}

/// Everything [`build_models`] creates for one configuration.
#[derive(Clone, Debug)]
pub struct ModelSet<T: Scalar> {
    /// Shares its parameters with `autoencoder.encoder`.
    pub encoder: EncoderModel<T>,
    pub autoencoder: AutoencoderModel<T>,
    pub head: ClassifierHead<T>,
    pub supervised: SupervisedClassifier<T>,
}

pub fn build_models<T: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<ModelSet<T>> {
    let autoencoder = AutoencoderModel::new(config, seed)?;
    Ok(ModelSet {
        encoder: autoencoder.encoder.clone(),
        head: ClassifierHead::new(config.latent_dim, seed)?,
        supervised: SupervisedClassifier::new(config, seed)?,
        autoencoder,
    })
}

/// Snapshot of named parameters as plain `f64` blocks.
pub fn to_blocks<T: Scalar>(named: &[(String, Tensor<T>)]) -> Vec<ParamBlock> {
    named
        .iter()
        .map(|(name, t)| ParamBlock {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
        })
        .collect()
}

fn find_block<'a>(blocks: &'a [ParamBlock], name: &str) -> Option<&'a ParamBlock> {
    blocks.iter().find(|b| b.name == name)
}

fn require_block<'a>(blocks: &'a [ParamBlock], name: &str) -> Result<&'a ParamBlock> {
    find_block(blocks, name)
        .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name:?}")))
}

fn block_param<T: Scalar>(block: &ParamBlock) -> Result<Tensor<T>> {
    Tensor::parameter(
        &block.shape,
        block.data.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    )
}
