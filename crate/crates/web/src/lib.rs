//! WebAssembly bindings for a small in-browser playground: draw a synthetic
//! sample, score a probability map against its mask, and check the prompt
//! embedding shape the generator produces.

use candle_core::{DType, Device};
use promptseg::data::synthetic;
use promptseg::metrics::{sample_metrics, MetricConfig};
use promptseg::nn::Mode;
use promptseg::{GeneratorConfig, Image, Mask, ProbabilityMap, PromptGenerator};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct BlobSample {
    size: usize,
    image: Image,
    mask: Mask,
}

#[wasm_bindgen]
impl BlobSample {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, index: u64, size: usize) -> Result<BlobSample, JsError> {
        let s = synthetic::blob_sample(seed, index, size).map_err(js_err)?;
        Ok(Self {
            size,
            image: s.image,
            mask: s.mask,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major RGBA bytes for an `ImageData`.
    pub fn image_rgba(&self) -> Vec<u8> {
        to_rgba(self.size, |c, y, x| self.image.get(c, y, x))
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        let m = self.mask.pixels();
        to_rgba(self.size, |_, y, x| m[y * self.size + x] as f32)
    }

    pub fn mask(&self) -> Vec<u8> {
        self.mask.pixels().to_vec()
    }
}

fn to_rgba(size: usize, f: impl Fn(usize, usize, usize) -> f32) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size * 4);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                out.push((f(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Every metric of a probability map against a binary mask, as JSON.
#[wasm_bindgen]
pub fn score(
    probabilities: Vec<f64>,
    mask: Vec<u8>,
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<String, JsError> {
    score_json(probabilities, mask, height, width, threshold).map_err(js_err)
}

fn score_json(
    probabilities: Vec<f64>,
    mask: Vec<u8>,
    height: usize,
    width: usize,
    threshold: f64,
) -> promptseg::Result<String> {
    let pred = ProbabilityMap::new(height, width, probabilities)?;
    let gt = Mask::new(height, width, mask)?;
    let config = MetricConfig {
        threshold,
        ..MetricConfig::default()
    };
    Ok(serde_json::to_string(&sample_metrics("demo", &pred, &gt, &config)?)?)
}

/// Shape of the prompt embedding the small generator gives for an
/// `height x width` blob image, e.g. `[1, 256, 64, 64]`.
#[wasm_bindgen]
pub fn prompt_shape(height: usize, width: usize, seed: u64) -> Result<Vec<usize>, JsError> {
    let size = height.max(width);
    let s = synthetic::blob_sample(seed, 0, size).map_err(js_err)?;
    let img = Image::from_fn(height, width, |c, y, x| s.image.get(c, y, x)).map_err(js_err)?;
    let g = PromptGenerator::build(&GeneratorConfig::tiny_test().with_seed(seed)).map_err(js_err)?;
    let batch = Image::stack(&[&img], DType::F32, &Device::Cpu).map_err(js_err)?;
    let p = g.forward(&batch, Mode::Eval).map_err(js_err)?;
    Ok(p.tensor().dims().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_buffers_have_rgba_length() {
        let s = BlobSample::new(1, 0, 32).unwrap();
        assert_eq!(s.image_rgba().len(), 32 * 32 * 4);
        assert_eq!(s.mask_rgba().len(), 32 * 32 * 4);
        assert!(s.mask().iter().any(|&v| v == 1));
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let s = BlobSample::new(3, 1, 32).unwrap();
        let probs = s.mask().iter().map(|&v| v as f64).collect();
        let json = score_json(probs, s.mask(), 32, 32, 0.5).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for k in ["dice", "iou", "sen", "f_beta", "f_beta_w", "s_alpha", "e_phi_mn"] {
            assert_eq!(v[k].as_f64(), Some(1.0), "{k}");
        }
    }

    #[test]
    fn prompt_shape_is_fixed() {
        assert_eq!(prompt_shape(48, 80, 2).unwrap(), vec![1, 256, 64, 64]);
    }
}
