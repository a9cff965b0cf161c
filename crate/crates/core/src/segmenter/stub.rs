//! Small fixed-seed convolutional stand-in with the foundation model's
//! interface shapes: a `(B, 256, 64, 64)` image embedding and
//! `(B, 1, 256, 256)` logits.
//!
//! The decoder reads the concatenated image and prompt embeddings through
//! a small convolution stack and adds `gain * mean_c(prompt)`, so the
//! logits rise monotonically with a uniform shift of the prompt.

use candle_core::{Device, Tensor};

use super::{BackendKind, PromptableSegmenter, DECODER_GRID};
use crate::domain::{ImageEmbedding, Precision, PromptEmbedding, PROMPT_CHANNELS, PROMPT_SPATIAL};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Conv2d};
use crate::params::{Init, NamedParameters, ParamStore};

pub const STUB_HIDDEN: usize = 16;
pub const STUB_GAIN: f64 = 8.0;

pub struct FrozenStub {
    store: ParamStore,
    input_resolution: usize,
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
}

impl FrozenStub {
    pub fn new(input_resolution: usize, seed: u64, precision: Precision, device: &Device) -> Result<Self> {
        if input_resolution < 8 {
            return Err(Error::Config(format!("stub input resolution {input_resolution} is too small")));
        }
        let mut store = ParamStore::new(precision.dtype(), device, seed, false);
        let mut root = store.root();
        let enc1 = Conv2d::new(&mut root.sub("encoder.0"), 3, STUB_HIDDEN, 3, 1, 1, true)?;
        let enc2 = Conv2d::new(&mut root.sub("encoder.1"), STUB_HIDDEN, PROMPT_CHANNELS, 1, 1, 0, true)?;
        let dec1 = Conv2d::new(&mut root.sub("decoder.0"), 2 * PROMPT_CHANNELS, 2 * STUB_HIDDEN, 1, 1, 0, true)?;
        let dec2 = Conv2d::new(&mut root.sub("decoder.1"), 2 * STUB_HIDDEN, STUB_HIDDEN, 3, 1, 1, true)?;
        let dec3 = Conv2d::with_init(
            &mut root.sub("decoder.2"),
            STUB_HIDDEN,
            1,
            1,
            Init::Normal { std: 0.05 },
        )?;
        Ok(Self {
            store,
            input_resolution,
            enc1,
            enc2,
            dec1,
            dec2,
            dec3,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

impl NamedParameters for FrozenStub {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.store.named_parameters()
    }
}

impl PromptableSegmenter for FrozenStub {
    fn kind(&self) -> BackendKind {
        BackendKind::FrozenStub
    }

    fn input_resolution(&self) -> usize {
        self.input_resolution
    }

    fn encode(&self, images: &Tensor) -> Result<ImageEmbedding> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape("stub input", &[3, h, w], &[c, h, w]));
        }
        let x = images.to_dtype(self.store.dtype())?.detach();
        let r = self.input_resolution;
        let x = ((resize_bilinear(&x, r, r)? * 2.0)? - 1.0)?;
        let x = self.enc1.forward(&x)?.relu()?;
        let x = self.enc2.forward(&x)?.tanh()?;
        let x = resize_bilinear(&x, PROMPT_SPATIAL, PROMPT_SPATIAL)?;
        ImageEmbedding::new(x, (h, w), (DECODER_GRID, DECODER_GRID))
    }

    fn decode(&self, image_emb: &ImageEmbedding, prompt: &PromptEmbedding) -> Result<Tensor> {
        let emb = image_emb.tensor();
        let z = prompt.tensor();
        if emb.dim(0)? != z.dim(0)? {
            return Err(Error::shape("prompt batch", &[emb.dim(0)?], &[z.dim(0)?]));
        }
        let z = z.to_dtype(self.store.dtype())?;
        let x = self.dec1.forward_concat(&[emb, &z])?.relu()?;
        let x = self.dec2.forward(&x)?.relu()?;
        let x = self.dec3.forward(&x)?;
        let shift = (z.mean_keepdim(1)? * STUB_GAIN)?;
        let x = (x + shift)?;
        resize_bilinear(&x, DECODER_GRID, DECODER_GRID)
    }
}
