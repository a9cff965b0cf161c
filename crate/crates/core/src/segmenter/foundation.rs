//! Frozen ViT image encoder and two-way transformer mask decoder, built on
//! the `segment_anything` modules of candle-transformers.
//!
//! Weights are a single safetensors file with the `image_encoder.*`,
//! `prompt_encoder.*` and `mask_decoder.*` prefixes of the original
//! checkpoint. Every tensor is loaded as a plain (non-variable) tensor, so
//! autodiff never produces a gradient for it.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{VarBuilder, VarMap};
use candle_transformers::models::segment_anything::{
    image_encoder::ImageEncoderViT, mask_decoder::MaskDecoder, prompt_encoder::PromptEncoder,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BackendKind, BaselinePrompt, PromptableSegmenter, DECODER_GRID};
use crate::domain::{ImageEmbedding, PromptEmbedding, PROMPT_CHANNELS, PROMPT_SPATIAL};
use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::params::NamedParameters;

pub const PIXEL_MEAN: [f32; 3] = [123.675, 116.28, 103.53];
pub const PIXEL_STD: [f32; 3] = [58.395, 57.12, 57.375];

/// Image-encoder geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub global_attn_indexes: Vec<usize>,
    pub use_rel_pos: bool,
}

impl VitConfig {
    pub fn vit_huge() -> Self {
        Self {
            img_size: 1024,
            patch_size: 16,
            embed_dim: 1280,
            depth: 32,
            num_heads: 16,
            window_size: 14,
            global_attn_indexes: vec![7, 15, 23, 31],
            use_rel_pos: true,
        }
    }

    /// A randomly initialised miniature used to exercise the code path
    /// without the real weights.
    pub fn miniature() -> Self {
        Self {
            img_size: 256,
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            num_heads: 1,
            window_size: 8,
            global_attn_indexes: Vec::new(),
            use_rel_pos: false,
        }
    }
}

pub struct FoundationSegmenter {
    config: VitConfig,
    tensors: HashMap<String, Tensor>,
    encoder: ImageEncoderViT,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    image_pe: Tensor,
    no_prompt_sparse: Tensor,
    device: Device,
}

impl FoundationSegmenter {
    pub fn load(path: &Path, config: VitConfig, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingWeights(path.to_path_buf()));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        let tensors = tensors
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Self::from_tensors(tensors, config, device)
    }

    /// Seeded random weights in the given geometry.
    pub fn random(config: VitConfig, seed: u64, device: &Device) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, device);
        build_modules(&config, vb)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("finite std");
        let data = varmap.data().lock().expect("varmap lock");
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        let mut tensors = HashMap::new();
        for name in names {
            let t = data[name].as_tensor();
            // Biases and norm scales keep their constant initialisation.
            let vals = t.flatten_all()?.to_vec1::<f32>()?;
            let constant = vals.iter().all(|&v| v == vals[0]);
            let t = if constant && (name.ends_with("bias") || vals[0] == 1.0) {
                t.detach()
            } else {
                let v: Vec<f32> = (0..t.elem_count()).map(|_| normal.sample(&mut rng)).collect();
                Tensor::from_vec(v, t.dims(), device)?
            };
            tensors.insert(name.clone(), t);
        }
        drop(data);
        Self::from_tensors(tensors, config, device)
    }

    fn from_tensors(tensors: HashMap<String, Tensor>, config: VitConfig, device: &Device) -> Result<Self> {
        let vb = VarBuilder::from_tensors(tensors.clone(), DType::F32, device);
        let (encoder, prompt_encoder, decoder) = build_modules(&config, vb).map_err(|e| {
            Error::Checkpoint(format!("foundation weights do not match the architecture: {e}"))
        })?;
        let image_pe = prompt_encoder.get_dense_pe()?;
        let (no_prompt_sparse, _) = prompt_encoder.forward(None, None, None)?;
        Ok(Self {
            config,
            tensors,
            encoder,
            prompt_encoder,
            decoder,
            image_pe,
            no_prompt_sparse,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    /// Resize factor that brings the longest side to the encoder size.
    fn scale(&self, h: usize, w: usize) -> f64 {
        self.config.img_size as f64 / h.max(w) as f64
    }

    fn resized(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.scale(h, w);
        let r = |n: usize| ((n as f64 * s + 0.5) as usize).clamp(1, self.config.img_size);
        (r(h), r(w))
    }

    /// Resize-longest-side, normalise with the published pixel statistics
    /// and zero-pad to a square.
    fn preprocess(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let (rh, rw) = self.resized(h, w);
        let x = resize_bilinear(&images.to_dtype(DType::F32)?, rh, rw)?;
        let mean = Tensor::new(&PIXEL_MEAN, &self.device)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&PIXEL_STD, &self.device)?.reshape((1, 3, 1, 1))?;
        let x = (x * 255.0)?.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let s = self.config.img_size;
        Ok(x.pad_with_zeros(2, 0, s - rh)?.pad_with_zeros(3, 0, s - rw)?)
    }

    fn decode_one(&self, emb: &Tensor, sparse: &Tensor, dense: &Tensor) -> Result<Tensor> {
        let (masks, _iou) = self.decoder.forward(emb, &self.image_pe, sparse, dense, false)?;
        Ok(masks)
    }
}

type Modules = (ImageEncoderViT, PromptEncoder, MaskDecoder);

fn build_modules(c: &VitConfig, vb: VarBuilder) -> candle_core::Result<Modules> {
    let grid = c.img_size / c.patch_size;
    let encoder = ImageEncoderViT::new(
        c.img_size,
        c.patch_size,
        3,
        c.embed_dim,
        c.depth,
        c.num_heads,
        PROMPT_CHANNELS,
        true,
        c.use_rel_pos,
        true,
        c.window_size,
        &c.global_attn_indexes,
        vb.pp("image_encoder"),
    )?;
    let prompt_encoder = PromptEncoder::new(
        PROMPT_CHANNELS,
        (grid, grid),
        (c.img_size, c.img_size),
        16,
        vb.pp("prompt_encoder"),
    )?;
    let decoder = MaskDecoder::new(PROMPT_CHANNELS, 3, 3, 256, vb.pp("mask_decoder"))?;
    Ok((encoder, prompt_encoder, decoder))
}

impl NamedParameters for FoundationSegmenter {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

impl PromptableSegmenter for FoundationSegmenter {
    fn kind(&self) -> BackendKind {
        BackendKind::FoundationVitHuge
    }

    fn input_resolution(&self) -> usize {
        self.config.img_size
    }

    fn encode(&self, images: &Tensor) -> Result<ImageEmbedding> {
        let (b, _, h, w) = images.dims4()?;
        let x = self.preprocess(&images.detach())?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            out.push(self.encoder.forward(&x.narrow(0, i, 1)?)?);
        }
        let emb = Tensor::cat(&out, 0)?;
        let (rh, rw) = self.resized(h, w);
        let ratio = self.config.img_size / DECODER_GRID;
        let valid = (rh.div_ceil(ratio).max(1), rw.div_ceil(ratio).max(1));
        ImageEmbedding::new(emb, (h, w), valid)
    }

    fn decode(&self, image_emb: &ImageEmbedding, prompt: &PromptEmbedding) -> Result<Tensor> {
        let emb = image_emb.tensor();
        let z = prompt.tensor();
        let b = emb.dim(0)?;
        if z.dim(0)? != b {
            return Err(Error::shape("prompt batch", &[b], &[z.dim(0)?]));
        }
        let dtype = z.dtype();
        let z = z.to_dtype(DType::F32)?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let m = self.decode_one(&emb.narrow(0, i, 1)?, &self.no_prompt_sparse, &z.narrow(0, i, 1)?)?;
            out.push(m);
        }
        Ok(Tensor::cat(&out, 0)?.to_dtype(dtype)?)
    }

    fn decode_baseline(&self, image_emb: &ImageEmbedding, prompt: &BaselinePrompt) -> Result<Tensor> {
        if image_emb.batch_size() != 1 {
            return Err(Error::Unsupported("baseline prompts are decoded one image at a time".into()));
        }
        let (h, w) = image_emb.source_size();
        let s = self.scale(h, w);
        let (sparse, dense) = match prompt {
            BaselinePrompt::Point { y, x } => {
                let coords = Tensor::new(&[[[*x as f32 * s as f32, *y as f32 * s as f32]]], &self.device)?;
                let labels = Tensor::new(&[[1f32]], &self.device)?;
                self.prompt_encoder.forward(Some((&coords, &labels)), None, None)?
            }
            BaselinePrompt::Mask(mask) => {
                let m = mask.to_tensor(DType::F32, &self.device)?;
                let (rh, rw) = image_emb.valid_region();
                let m = resize_bilinear(&m, rh, rw)?;
                let m = m.pad_with_zeros(2, 0, DECODER_GRID - rh)?;
                let m = m.pad_with_zeros(3, 0, DECODER_GRID - rw)?;
                self.prompt_encoder.forward(None, None, Some(&m))?
            }
        };
        let dense = dense.contiguous()?;
        debug_assert_eq!(dense.dims()[2], PROMPT_SPATIAL);
        self.decode_one(image_emb.tensor(), &sparse, &dense)
    }
}
