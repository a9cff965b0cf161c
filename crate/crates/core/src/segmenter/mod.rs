//! The frozen promptable segmenter that consumes generated prompts.
//!
//! Generated prompts enter the decoder's dense-prompt slot; the sparse
//! prompt is the backend's "no prompt" embedding and the single-mask head
//! is used. Logits live on a `256 x 256` decoder-native grid and are mapped
//! back to the source image by cropping padding and resizing bilinearly.

#[cfg(feature = "foundation")]
pub mod foundation;
pub mod stub;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{Image, ImageEmbedding, LogitMap, Mask, Precision, PromptEmbedding};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Mode};
use crate::params::NamedParameters;
use crate::prompt_generator::PromptGenerator;

#[cfg(feature = "foundation")]
pub use foundation::{FoundationSegmenter, VitConfig};
pub use stub::FrozenStub;

/// Side of the decoder-native logit grid.
pub const DECODER_GRID: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "foundation-vit-huge")]
    FoundationVitHuge,
    #[serde(rename = "frozen-stub")]
    FrozenStub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub kind: BackendKind,
    pub input_resolution: usize,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    /// Initialisation seed of the stub.
    #[serde(default)]
    pub seed: u64,
    /// Stub precision; the foundation backend always runs in f32.
    #[serde(default)]
    pub precision: Precision,
}

impl SegmenterConfig {
    pub fn stub() -> Self {
        Self {
            kind: BackendKind::FrozenStub,
            input_resolution: 64,
            weights_path: None,
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn vit_huge(weights: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::FoundationVitHuge,
            input_resolution: 1024,
            weights_path: Some(weights.into()),
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }
}

/// Prompts of the backend's own prompt encoder, used for baselines.
#[derive(Clone, Debug)]
pub enum BaselinePrompt {
    /// A positive click at source-image pixel `(y, x)`.
    Point { y: usize, x: usize },
    /// A binary mask at source-image resolution.
    Mask(Mask),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselinePromptKind {
    Point,
    GtMask,
}

/// A frozen segmenter whose dense-prompt slot is driven externally.
pub trait PromptableSegmenter: NamedParameters + Send + Sync {
    fn kind(&self) -> BackendKind;

    fn input_resolution(&self) -> usize;

    /// `(B, 3, H, W)` images in `[0, 1]` to a detached embedding.
    fn encode(&self, images: &Tensor) -> Result<ImageEmbedding>;

    /// `(B, 1, 256, 256)` logits. Gradients reach `prompt` only.
    fn decode(&self, image_emb: &ImageEmbedding, prompt: &PromptEmbedding) -> Result<Tensor>;

    /// Decodes with the backend's original prompt encoder.
    fn decode_baseline(&self, _image_emb: &ImageEmbedding, _prompt: &BaselinePrompt) -> Result<Tensor> {
        Err(Error::Unsupported(format!(
            "{:?} backend has no prompt encoder for baseline prompts",
            self.kind()
        )))
    }
}

/// Decoder logits plus the geometry mapping them onto the source image.
#[derive(Clone, Debug)]
pub struct SegmenterOutput {
    logits: Tensor,
    source_size: (usize, usize),
    valid_region: (usize, usize),
}

impl SegmenterOutput {
    pub fn new(logits: Tensor, source_size: (usize, usize), valid_region: (usize, usize)) -> Result<Self> {
        let (_, c, h, w) = logits.dims4()?;
        if (c, h, w) != (1, DECODER_GRID, DECODER_GRID) {
            return Err(Error::shape("segmenter logits", &[1, DECODER_GRID, DECODER_GRID], &[c, h, w]));
        }
        Ok(Self {
            logits,
            source_size,
            valid_region,
        })
    }

    /// `(B, 1, 256, 256)` decoder-native logits.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn valid_region(&self) -> (usize, usize) {
        self.valid_region
    }

    /// Logits resampled to the source image, `(B, 1, H, W)`.
    pub fn upsampled(&self) -> Result<Tensor> {
        let (h, w) = self.source_size;
        self.upsampled_to(h, w)
    }

    pub fn upsampled_to(&self, h: usize, w: usize) -> Result<Tensor> {
        let (vh, vw) = self.valid_region;
        let valid = if (vh, vw) == (DECODER_GRID, DECODER_GRID) {
            self.logits.clone()
        } else {
            self.logits.narrow(2, 0, vh)?.narrow(3, 0, vw)?
        };
        resize_bilinear(&valid, h, w)
    }

    /// The decoder-native logits of sample `i`.
    pub fn native_map(&self, i: usize) -> Result<LogitMap> {
        LogitMap::from_tensor(&self.logits.get(i)?)
    }

    /// The source-resolution logits of sample `i`.
    pub fn logit_map(&self, i: usize) -> Result<LogitMap> {
        LogitMap::from_tensor(&self.upsampled()?.get(i)?)
    }

    pub fn check_finite(&self) -> Result<()> {
        let v = self.logits.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("segmenter logits"))
        }
    }
}

/// Builds the configured backend on the CPU.
pub fn build_backend(config: &SegmenterConfig) -> Result<Box<dyn PromptableSegmenter>> {
    build_backend_on(config, &Device::Cpu)
}

pub fn build_backend_on(config: &SegmenterConfig, device: &Device) -> Result<Box<dyn PromptableSegmenter>> {
    match config.kind {
        BackendKind::FrozenStub => Ok(Box::new(FrozenStub::new(
            config.input_resolution,
            config.seed,
            config.precision,
            device,
        )?)),
        BackendKind::FoundationVitHuge => foundation_backend(config, device),
    }
}

#[cfg(feature = "foundation")]
fn foundation_backend(config: &SegmenterConfig, device: &Device) -> Result<Box<dyn PromptableSegmenter>> {
    let path = config
        .weights_path
        .as_ref()
        .ok_or_else(|| Error::Config("foundation backend requires weights_path".into()))?;
    let vit = VitConfig::vit_huge();
    if config.input_resolution != vit.img_size {
        return Err(Error::Config(format!(
            "foundation backend input resolution is {}, got {}",
            vit.img_size, config.input_resolution
        )));
    }
    Ok(Box::new(FoundationSegmenter::load(path, vit, device)?))
}

#[cfg(not(feature = "foundation"))]
fn foundation_backend(_: &SegmenterConfig, _: &Device) -> Result<Box<dyn PromptableSegmenter>> {
    Err(Error::Unsupported("built without the `foundation` feature".into()))
}

pub fn encode_image(backend: &dyn PromptableSegmenter, image: &Image) -> Result<ImageEmbedding> {
    backend.encode(&image.to_tensor(DType::F32, &Device::Cpu)?)
}

pub fn decode_mask(
    backend: &dyn PromptableSegmenter,
    image_emb: &ImageEmbedding,
    prompt: &PromptEmbedding,
) -> Result<SegmenterOutput> {
    if image_emb.batch_size() != prompt.batch_size() {
        return Err(Error::shape(
            "prompt batch",
            &[image_emb.batch_size()],
            &[prompt.batch_size()],
        ));
    }
    let logits = backend.decode(image_emb, prompt)?;
    SegmenterOutput::new(logits, image_emb.source_size(), image_emb.valid_region())
}

/// Batched composition `decode(encode(images), g(images))`.
pub fn forward_batch(
    backend: &dyn PromptableSegmenter,
    g: &PromptGenerator,
    images: &Tensor,
    mode: Mode,
) -> Result<SegmenterOutput> {
    let emb = backend.encode(images)?;
    let prompt = g.forward(&images.to_dtype(g.store().dtype())?, mode)?;
    decode_mask(backend, &emb, &prompt)
}

/// `S(I, g(I))` for one image, with the generator in inference mode.
pub fn forward(backend: &dyn PromptableSegmenter, g: &PromptGenerator, image: &Image) -> Result<SegmenterOutput> {
    let x = image.to_tensor(g.store().dtype(), g.store().device())?;
    forward_batch(backend, g, &x, Mode::Eval)
}

/// Runs the backend's own prompt encoder with a prompt derived from the
/// ground-truth annotation. No gradients are involved.
pub fn baseline_prompt_forward(
    backend: &dyn PromptableSegmenter,
    kind: BaselinePromptKind,
    image: &Image,
    annotation: &Mask,
) -> Result<SegmenterOutput> {
    if backend.kind() == BackendKind::FrozenStub {
        return Err(Error::Unsupported("baseline prompts need the foundation backend".into()));
    }
    if annotation.dims() != (image.height(), image.width()) {
        return Err(Error::shape(
            "annotation",
            &[image.height(), image.width()],
            &[annotation.height(), annotation.width()],
        ));
    }
    let prompt = match kind {
        BaselinePromptKind::Point => {
            let (y, x) = interior_point(annotation).ok_or_else(|| {
                Error::InvalidMask("empty annotation: no point prompt can be derived".into())
            })?;
            BaselinePrompt::Point { y, x }
        }
        BaselinePromptKind::GtMask => BaselinePrompt::Mask(annotation.clone()),
    };
    let emb = encode_image(backend, image)?;
    let logits = backend.decode_baseline(&emb, &prompt)?;
    SegmenterOutput::new(logits, emb.source_size(), emb.valid_region())
}

/// The foreground pixel farthest from any background pixel (pixels outside
/// the image count as background); ties go to the first in row-major order.
pub fn interior_point(mask: &Mask) -> Option<(usize, usize)> {
    if mask.is_empty() {
        return None;
    }
    let (h, w) = mask.dims();
    let (ph, pw) = (h + 2, w + 2);
    let background: Vec<bool> = (0..ph * pw)
        .map(|i| {
            let (y, x) = (i / pw, i % pw);
            y == 0 || x == 0 || y == ph - 1 || x == pw - 1 || !mask.get(y - 1, x - 1)
        })
        .collect();
    let d = crate::distance::squared_edt(&background, ph, pw);
    let mut best = None;
    let mut best_d = -1.0;
    for y in 0..h {
        for x in 0..w {
            let v = d[(y + 1) * pw + x + 1];
            if mask.get(y, x) && v > best_d {
                best_d = v;
                best = Some((y, x));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::snapshot_parameters;
    use crate::prompt_generator::GeneratorConfig;

    fn stub() -> Box<dyn PromptableSegmenter> {
        build_backend(&SegmenterConfig::stub()).unwrap()
    }

    fn image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, y, x| ((y * 7 + x * 3 + c * 11) % 17) as f32 / 16.0).unwrap()
    }

    fn constant_prompt(v: f32) -> PromptEmbedding {
        PromptEmbedding::new(Tensor::full(v, (1, 256, 64, 64), &Device::Cpu).unwrap()).unwrap()
    }

    fn mean(t: &Tensor) -> f32 {
        t.mean_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn stub_shapes_and_determinism() {
        let s = stub();
        let img = image(64, 64);
        let a = encode_image(s.as_ref(), &img).unwrap();
        let b = encode_image(s.as_ref(), &img).unwrap();
        assert_eq!(a.tensor().dims(), &[1, 256, 64, 64]);
        let diff = (a.tensor() - b.tensor()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        let out = decode_mask(s.as_ref(), &a, &constant_prompt(0.0)).unwrap();
        assert_eq!(out.logits().dims(), &[1, 1, 256, 256]);
        assert_eq!(out.upsampled().unwrap().dims(), &[1, 1, 64, 64]);
        out.check_finite().unwrap();
    }

    #[test]
    fn stub_is_monotone_in_uniform_prompt() {
        let s = stub();
        let emb = encode_image(s.as_ref(), &image(64, 64)).unwrap();
        let hi = decode_mask(s.as_ref(), &emb, &constant_prompt(1.0)).unwrap();
        let lo = decode_mask(s.as_ref(), &emb, &constant_prompt(-1.0)).unwrap();
        assert!(mean(hi.logits()) > mean(lo.logits()));
        let z1 = decode_mask(s.as_ref(), &emb, &constant_prompt(0.0)).unwrap();
        let z2 = decode_mask(s.as_ref(), &emb, &constant_prompt(0.0)).unwrap();
        assert_eq!(mean(z1.logits()), mean(z2.logits()));
    }

    #[test]
    fn wrong_prompt_shape_is_rejected() {
        let bad = Tensor::zeros((1, 128, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let err = PromptEmbedding::new(bad).unwrap_err().to_string();
        assert!(err.contains("256") && err.contains("128"), "{err}");
    }

    #[test]
    fn gradients_reach_prompt_but_not_backend() {
        let s = stub();
        let emb = encode_image(s.as_ref(), &image(64, 64)).unwrap();
        let z = candle_core::Var::zeros((1, 256, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let out = decode_mask(s.as_ref(), &emb, &PromptEmbedding::new(z.as_tensor().clone()).unwrap()).unwrap();
        let grads = out.logits().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(z.as_tensor()).is_some());
        for (_, p) in s.named_parameters() {
            assert!(grads.get(&p).is_none());
        }
    }

    #[test]
    fn composed_forward_with_tiny_generator() {
        let s = stub();
        let g = PromptGenerator::build(&GeneratorConfig::tiny_test()).unwrap();
        let before = snapshot_parameters(s.as_ref()).unwrap();
        let out = forward(s.as_ref(), &g, &image(64, 64)).unwrap();
        assert_eq!(out.logits().dims(), &[1, 1, 256, 256]);
        assert_eq!(before, snapshot_parameters(s.as_ref()).unwrap());
    }

    #[test]
    fn stub_rejects_baseline_prompts() {
        let s = stub();
        let img = image(64, 64);
        let m = Mask::from_fn(64, 64, |y, x| y > 20 && x > 20);
        let err = baseline_prompt_forward(s.as_ref(), BaselinePromptKind::Point, &img, &m);
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn interior_point_is_deepest_pixel() {
        let m = Mask::from_fn(9, 9, |y, x| (2..=6).contains(&y) && (1..=7).contains(&x));
        assert_eq!(interior_point(&m), Some((4, 3)));
        assert_eq!(interior_point(&Mask::zeros(8, 8)), None);
    }

    #[test]
    fn valid_region_crops_before_resizing() {
        let t = Tensor::arange(0f32, (256 * 256) as f32, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 256, 256))
            .unwrap();
        let out = SegmenterOutput::new(t, (128, 256), (128, 256)).unwrap();
        let up = out.upsampled().unwrap();
        assert_eq!(up.dims(), &[1, 1, 128, 256]);
        let last = up.get(0).unwrap().get(0).unwrap().get(127).unwrap().get(255).unwrap();
        assert_eq!(last.to_scalar::<f32>().unwrap(), (127 * 256 + 255) as f32);
    }

    #[cfg(feature = "foundation")]
    #[test]
    fn miniature_foundation_backend_runs() {
        let dev = Device::Cpu;
        let s = FoundationSegmenter::random(VitConfig::miniature(), 3, &dev).unwrap();
        let img = image(64, 48);
        let emb = encode_image(&s, &img).unwrap();
        assert_eq!(emb.tensor().dims(), &[1, 256, 64, 64]);
        assert_eq!(emb.valid_region(), (256, 192));
        let out = decode_mask(&s, &emb, &constant_prompt(0.1)).unwrap();
        assert_eq!(out.logits().dims(), &[1, 1, 256, 256]);
        assert_eq!(out.upsampled().unwrap().dims(), &[1, 1, 64, 48]);
        out.check_finite().unwrap();
        let m = Mask::from_fn(64, 48, |y, x| (20..40).contains(&y) && (10..30).contains(&x));
        for kind in [BaselinePromptKind::Point, BaselinePromptKind::GtMask] {
            let b = baseline_prompt_forward(&s, kind, &img, &m).unwrap();
            b.check_finite().unwrap();
        }
        let again = FoundationSegmenter::random(VitConfig::miniature(), 3, &dev).unwrap();
        assert_eq!(
            snapshot_parameters(&s).unwrap().global_checksum,
            snapshot_parameters(&again).unwrap().global_checksum
        );
    }
}
