//! The trainable network that maps an image to a dense prompt embedding.
//!
//! A harmonic dense encoder feeds a two-block decoder. Each decoder block
//! bilinearly upsamples its input to the resolution of one encoder stage,
//! concatenates that stage's features, and applies
//! `conv3x3 -> ReLU -> conv3x3 -> BatchNorm -> tanh`. The first block joins
//! the stride-8 features, the second the stride-4 features; the result is
//! resized to `64 x 64` when the input size does not land there exactly
//! (it does for 256 x 256 inputs).

pub mod hardnet;

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{Image, Precision, PromptEmbedding, MIN_IMAGE_SIDE, PROMPT_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, BatchNorm2d, Conv2d, Mode};
use crate::params::{NamedParameters, ParamStore, Scope};

pub use hardnet::{HardnetArch, HardnetEncoder};

/// ImageNet statistics used by the pretrained backbone.
pub const BACKBONE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const BACKBONE_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "hardnet85-like")]
    Hardnet85Like,
    #[serde(rename = "tiny-test")]
    TinyTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub backbone: BackboneKind,
    pub encoder_block_channels: Vec<usize>,
    pub decoder_channels: usize,
    /// Width of the first decoder block.
    pub decoder_mid_channels: usize,
    pub output_spatial: usize,
    pub pretrained_backbone: bool,
    #[serde(default)]
    pub pretrained_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl GeneratorConfig {
    pub fn hardnet85() -> Self {
        Self {
            backbone: BackboneKind::Hardnet85Like,
            encoder_block_channels: vec![192, 256, 320, 480, 720, 1280],
            decoder_channels: PROMPT_CHANNELS,
            decoder_mid_channels: 256,
            output_spatial: 64,
            pretrained_backbone: false,
            pretrained_path: None,
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn tiny_test() -> Self {
        Self {
            backbone: BackboneKind::TinyTest,
            encoder_block_channels: vec![8; 6],
            decoder_channels: PROMPT_CHANNELS,
            decoder_mid_channels: 16,
            output_spatial: 64,
            pretrained_backbone: false,
            pretrained_path: None,
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_block_channels.len() != 6 {
            return Err(Error::Config(format!(
                "encoder needs 6 stage widths, got {}",
                self.encoder_block_channels.len()
            )));
        }
        if self.output_spatial != 64 || self.decoder_channels != PROMPT_CHANNELS {
            return Err(Error::Config(format!(
                "prompt grid must be {PROMPT_CHANNELS}x64x64, got {}x{}x{}",
                self.decoder_channels, self.output_spatial, self.output_spatial
            )));
        }
        if self.decoder_mid_channels == 0 {
            return Err(Error::Config("decoder_mid_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> HardnetArch {
        match self.backbone {
            BackboneKind::Hardnet85Like => HardnetArch::hardnet85(self.encoder_block_channels.clone()),
            BackboneKind::TinyTest => HardnetArch::tiny(self.encoder_block_channels.clone()),
        }
    }
}

/// `upsample -> concat(skip) -> conv -> ReLU -> conv -> BN -> tanh`.
#[derive(Clone, Debug)]
struct UpBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    bn: BatchNorm2d,
}

impl UpBlock {
    fn new(scope: &mut Scope<'_>, cin: usize, skip: usize, cout_mid: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut scope.sub("conv1"), cin + skip, cout_mid, 3, 1, 1, true)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), cout_mid, cout, 3, 1, 1, false)?,
            bn: BatchNorm2d::new(&mut scope.sub("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = skip.dims4()?;
        let x = resize_bilinear(x, h, w)?;
        let x = Tensor::cat(&[&x, skip], 1)?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.bn.forward(&self.conv2.forward(&x)?, mode)?;
        Ok(x.tanh()?)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w) + self.conv2.macs(h, w)
    }
}

pub struct PromptGenerator {
    config: GeneratorConfig,
    store: ParamStore,
    encoder: HardnetEncoder,
    up1: UpBlock,
    up2: UpBlock,
    /// Encoder stages feeding the two decoder blocks.
    skip_stages: [usize; 2],
}

/// Last stage whose features sit at `stride`.
fn stage_at_stride(strides: &[usize], stride: usize) -> Result<usize> {
    strides
        .iter()
        .rposition(|&s| s == stride)
        .ok_or_else(|| Error::Config(format!("no encoder stage at stride {stride}")))
}

impl PromptGenerator {
    /// Builds a generator on the CPU. Encoder weights come from the
    /// pretrained checkpoint when requested; everything else is initialised
    /// from `config.seed`.
    pub fn build(config: &GeneratorConfig) -> Result<Self> {
        Self::build_on(config, &Device::Cpu)
    }

    pub fn build_on(config: &GeneratorConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let arch = config.arch();
        let strides = arch.stage_strides();
        let skip_stages = [stage_at_stride(&strides, 8)?, stage_at_stride(&strides, 4)?];
        let mut store = ParamStore::new(config.precision.dtype(), device, config.seed, true);
        let mut root = store.root();
        let encoder = HardnetEncoder::new(&mut root.sub("encoder"), &arch)?;
        let deepest = *config.encoder_block_channels.last().expect("validated");
        let up1 = UpBlock::new(
            &mut root.sub("decoder.up1"),
            deepest,
            config.encoder_block_channels[skip_stages[0]],
            config.decoder_mid_channels,
            config.decoder_mid_channels,
        )?;
        let up2 = UpBlock::new(
            &mut root.sub("decoder.up2"),
            config.decoder_mid_channels,
            config.encoder_block_channels[skip_stages[1]],
            config.decoder_channels,
            config.decoder_channels,
        )?;
        let generator = Self {
            config: config.clone(),
            store,
            encoder,
            up1,
            up2,
            skip_stages,
        };
        if config.pretrained_backbone {
            let path = config.pretrained_path.as_deref().ok_or_else(|| {
                Error::Config("pretrained_backbone is set but pretrained_path is missing".into())
            })?;
            generator.load_backbone(path)?;
        }
        Ok(generator)
    }

    /// Loads every `encoder.*` tensor from a safetensors file.
    pub fn load_backbone(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingWeights(path.to_path_buf()));
        }
        let tensors = candle_core::safetensors::load(path, self.store.device())?;
        let wanted: Vec<String> = self
            .store
            .params()
            .chain(self.store.buffers())
            .map(|(k, _)| k.clone())
            .filter(|k| k.starts_with("encoder."))
            .collect();
        let missing: Vec<&String> = wanted.iter().filter(|k| !tensors.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "backbone file {} lacks {} encoder tensors, first: {}",
                path.display(),
                missing.len(),
                missing[0]
            )));
        }
        for name in &wanted {
            self.store.set(name, &tensors[name])?;
        }
        Ok(())
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn skip_stages(&self) -> [usize; 2] {
        self.skip_stages
    }

    /// `(B, 3, H, W)` images in `[0, 1]` to `(B, 256, 64, 64)` prompts.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<PromptEmbedding> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::shape("generator input", &[3, MIN_IMAGE_SIDE, MIN_IMAGE_SIDE], &[c, h, w]));
        }
        let x = self.normalize(images)?;
        let feats = self.encoder.forward(&x, mode)?;
        let deepest = feats.last().expect("six stages");
        let z = self.up1.forward(deepest, &feats[self.skip_stages[0]], mode)?;
        let z = self.up2.forward(&z, &feats[self.skip_stages[1]], mode)?;
        let s = self.config.output_spatial;
        PromptEmbedding::new(resize_bilinear(&z, s, s)?)
    }

    fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        let dev = images.device();
        let mean = Tensor::new(&BACKBONE_MEAN, dev)?
            .to_dtype(images.dtype())?
            .reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&BACKBONE_STD, dev)?
            .to_dtype(images.dtype())?
            .reshape((1, 3, 1, 1))?;
        Ok(images.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Inference on a single image with running batch-norm statistics.
    pub fn generate_prompt(&self, image: &Image) -> Result<PromptEmbedding> {
        let x = image.to_tensor(self.store.dtype(), self.store.device())?;
        self.forward(&x, Mode::Eval)
    }

    /// Analytic multiply-accumulate count of every convolution for one
    /// `input_size x input_size` image. Normalisation, activations, pooling
    /// and bilinear resizing are not counted.
    pub fn count_flops(&self, input_size: usize) -> u64 {
        let (enc, sizes) = self.encoder.macs(input_size, input_size);
        let (h1, w1) = sizes[self.skip_stages[0]];
        let (h2, w2) = sizes[self.skip_stages[1]];
        enc + self.up1.macs(h1, w1) + self.up2.macs(h2, w2)
    }
}

impl NamedParameters for PromptGenerator {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.store.named_parameters()
    }
}

/// Free-function form of [`PromptGenerator::build`].
pub fn build_prompt_generator(config: &GeneratorConfig) -> Result<PromptGenerator> {
    PromptGenerator::build(config)
}

/// Free-function form of [`PromptGenerator::generate_prompt`].
pub fn generate_prompt(g: &PromptGenerator, image: &Image) -> Result<PromptEmbedding> {
    g.generate_prompt(image)
}

/// Free-function form of [`PromptGenerator::count_flops`].
pub fn count_flops(g: &PromptGenerator, input_size: usize) -> u64 {
    g.count_flops(input_size)
}
