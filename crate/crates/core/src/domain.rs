//! Value types shared by every stage of the pipeline.
//!
//! Rasters are stored row-major. [`Image`] is channel-first (CHW) with values
//! in `[0, 1]` before any model-specific normalisation; each model applies its
//! own normalisation recipe on the way in.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_CHANNELS: usize = 3;
pub const MIN_IMAGE_SIDE: usize = 32;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// An RGB raster, channel-first.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum"
            )));
        }
        if pixels.len() != IMAGE_CHANNELS * height * width {
            return Err(Error::InvalidImage(format!(
                "expected {} values for 3x{height}x{width}, got {}",
                IMAGE_CHANNELS * height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(IMAGE_CHANNELS * height * width);
        for c in 0..IMAGE_CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.pixels, (1, IMAGE_CHANNELS, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Stacks same-sized images into `(B, 3, H, W)`.
    pub fn stack(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidImage("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.pixels.len());
        for img in images {
            if img.height != first.height || img.width != first.width {
                return Err(Error::shape(
                    "image batch",
                    &[first.height, first.width],
                    &[img.height, img.width],
                ));
            }
            data.extend_from_slice(&img.pixels);
        }
        Ok(Tensor::from_vec(
            data,
            (images.len(), IMAGE_CHANNELS, first.height, first.width),
            device,
        )?
        .to_dtype(dtype)?)
    }
}

/// A binary foreground/background raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::InvalidMask(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidMask(format!("value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// `(1, 1, H, W)` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.pixels, (1, 1, self.height, self.width), device)?
            .to_dtype(dtype)?)
    }

    pub fn stack(masks: &[&Mask], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidMask("empty batch".into()))?;
        let mut data = Vec::with_capacity(masks.len() * first.pixels.len());
        for m in masks {
            if m.dims() != first.dims() {
                return Err(Error::shape(
                    "mask batch",
                    &[first.height, first.width],
                    &[m.height, m.width],
                ));
            }
            data.extend_from_slice(&m.pixels);
        }
        Ok(
            Tensor::from_vec(data, (masks.len(), 1, first.height, first.width), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Probability view of the mask (0.0 / 1.0).
    pub fn to_probability(&self) -> ProbabilityMap {
        ProbabilityMap {
            height: self.height,
            width: self.width,
            values: self.pixels.iter().map(|&v| v as f64).collect(),
        }
    }

    pub(crate) fn ensure_same_dims(&self, other: &Mask, what: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                what,
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }
}

/// Pre-sigmoid segmentation scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("logit map", &[height * width], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Reads a `(H, W)`, `(1, H, W)` or `(1, 1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::shape("logit map tensor", &[1, 1, 0, 0], &dims)),
        };
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Self::new(h, w, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probabilities(&self) -> ProbabilityMap {
        ProbabilityMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.values, (1, 1, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }
}

/// Per-pixel foreground probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("probability map", &[height * width], &[values.len()]));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidMask("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Foreground where `p >= threshold`.
    pub fn threshold(&self, threshold: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            pixels: self.values.iter().map(|&p| (p >= threshold) as u8).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for y in 0..self.height {
            for x in 0..self.width {
                values.push(self.get(y, self.width - 1 - x));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Foreground where `sigmoid(logit) >= threshold`; ties count as foreground.
pub fn binarize(logits: &LogitMap, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} must lie strictly inside (0, 1)"
        )));
    }
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(logits.probabilities().threshold(threshold))
}

/// One image/mask pair as served by a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Image,
    pub mask: Mask,
    pub dataset_id: String,
    pub frame_index: Option<u32>,
    pub source_path: String,
}

impl SampleRecord {
    pub fn new(
        image: Image,
        mask: Mask,
        dataset_id: impl Into<String>,
        frame_index: Option<u32>,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        if (image.height(), image.width()) != mask.dims() {
            return Err(Error::shape(
                "sample image/mask",
                &[image.height(), image.width()],
                &[mask.height(), mask.width()],
            ));
        }
        Ok(Self {
            image,
            mask,
            dataset_id: dataset_id.into(),
            frame_index,
            source_path: source_path.into(),
        })
    }

    /// Stable identifier: `<dataset>/<file stem>[#frame]`.
    pub fn sample_id(&self) -> String {
        let stem = std::path::Path::new(&self.source_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.source_path.clone());
        match self.frame_index {
            Some(f) => format!("{}/{}#{f:05}", self.dataset_id, stem),
            None => format!("{}/{}", self.dataset_id, stem),
        }
    }
}

pub const PROMPT_CHANNELS: usize = 256;
pub const PROMPT_SPATIAL: usize = 64;

/// Dense prompt embedding `(B, 256, 64, 64)` fed to the segmenter's mask
/// decoder in place of the mask-prompt embedding.
#[derive(Clone, Debug)]
pub struct PromptEmbedding(Tensor);

impl PromptEmbedding {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        let ok = dims.len() == 4
            && dims[1] == PROMPT_CHANNELS
            && dims[2] == PROMPT_SPATIAL
            && dims[3] == PROMPT_SPATIAL;
        if !ok {
            let b = dims.first().copied().unwrap_or(1);
            return Err(Error::shape(
                "prompt embedding",
                &[b, PROMPT_CHANNELS, PROMPT_SPATIAL, PROMPT_SPATIAL],
                dims,
            ));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }
}

/// Output of the segmenter's frozen image encoder, `(B, C, H, W)`, with the
/// geometry needed to map decoder logits back onto the source image.
#[derive(Clone, Debug)]
pub struct ImageEmbedding {
    tensor: Tensor,
    source_size: (usize, usize),
    valid_region: (usize, usize),
}

impl ImageEmbedding {
    /// `valid_region` is the `(h, w)` block of the decoder-native logit grid
    /// covered by image content (the rest is padding).
    pub fn new(t: Tensor, source_size: (usize, usize), valid_region: (usize, usize)) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape("image embedding", &[1, 256, 64, 64], t.dims()));
        }
        Ok(Self {
            tensor: t.detach(),
            source_size,
            valid_region,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn batch_size(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn valid_region(&self) -> (usize, usize) {
        self.valid_region
    }
}

/// Numeric precision used for model parameters and activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_binarize_to_foreground() {
        let logits = LogitMap::new(2, 2, vec![0.0; 4]).unwrap();
        let m = binarize(&logits, 0.5).unwrap();
        assert_eq!(m.pixels(), &[1, 1, 1, 1]);
    }

    #[test]
    fn opposite_logits_binarize() {
        let logits = LogitMap::new(1, 2, vec![-10.0, 10.0]).unwrap();
        assert_eq!(binarize(&logits, 0.5).unwrap().pixels(), &[0, 1]);
    }

    #[test]
    fn binarize_matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
        let logits = LogitMap::new(8, 8, values.clone()).unwrap();
        let mask = binarize(&logits, 0.5).unwrap();
        for (i, v) in values.iter().enumerate() {
            let p = 1.0 / (1.0 + (-v).exp());
            assert_eq!(mask.pixels()[i] == 1, p >= 0.5, "pixel {i}");
        }
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        let logits = LogitMap::new(1, 1, vec![0.0]).unwrap();
        assert!(binarize(&logits, 0.0).is_err());
        assert!(binarize(&logits, 1.0).is_err());
    }

    #[test]
    fn logit_map_rejects_non_finite() {
        assert!(matches!(
            LogitMap::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn image_invariants() {
        assert!(Image::new(31, 64, vec![0.0; 3 * 31 * 64]).is_err());
        assert!(Image::new(32, 32, vec![0.0; 10]).is_err());
        let mut px = vec![0.0; 3 * 32 * 32];
        px[5] = f32::INFINITY;
        assert!(matches!(Image::new(32, 32, px), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sample_record_requires_matching_dims() {
        let img = Image::new(32, 32, vec![0.0; 3 * 32 * 32]).unwrap();
        assert!(SampleRecord::new(img.clone(), Mask::zeros(32, 33), "x", None, "a.png").is_err());
        let rec = SampleRecord::new(img, Mask::zeros(32, 32), "glas", Some(3), "d/a.png").unwrap();
        assert_eq!(rec.sample_id(), "glas/a#00003");
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn binarize_is_monotone_in_threshold(
            values in proptest::collection::vec(-20.0f64..20.0, 16),
            t1 in 0.01f64..0.99,
            t2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let logits = LogitMap::new(4, 4, values).unwrap();
            let a = binarize(&logits, lo).unwrap();
            let b = binarize(&logits, hi).unwrap();
            for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
                proptest::prop_assert!(pb <= pa);
            }
        }
    }
}
