//! Surrogate decoder `h`: two stride-2 transposed convolutions that decode a
//! prompt embedding straight into `256 x 256` logits.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{LogitMap, Precision, PromptEmbedding, PROMPT_CHANNELS, PROMPT_SPATIAL};
use crate::error::{Error, Result};
use crate::nn::ConvTranspose2d;
use crate::params::{NamedParameters, ParamStore};

pub const SURROGATE_OUTPUT: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub hidden_channels: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 64,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

pub struct SurrogateDecoder {
    config: SurrogateConfig,
    store: ParamStore,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

impl SurrogateDecoder {
    pub fn new(config: &SurrogateConfig) -> Result<Self> {
        Self::new_on(config, &Device::Cpu)
    }

    pub fn new_on(config: &SurrogateConfig, device: &Device) -> Result<Self> {
        if config.hidden_channels == 0 {
            return Err(Error::Config("surrogate hidden_channels must be positive".into()));
        }
        let mut store = ParamStore::new(config.precision.dtype(), device, config.seed, true);
        let mut root = store.root();
        let up1 = ConvTranspose2d::new(&mut root.sub("up1"), PROMPT_CHANNELS, config.hidden_channels, 4, 2, 1)?;
        let up2 = ConvTranspose2d::new(&mut root.sub("up2"), config.hidden_channels, 1, 4, 2, 1)?;
        Ok(Self {
            config: config.clone(),
            store,
            up1,
            up2,
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// `(B, 256, 64, 64)` prompts to `(B, 1, 256, 256)` logits.
    pub fn forward(&self, prompt: &PromptEmbedding) -> Result<Tensor> {
        let z = prompt.tensor().to_dtype(self.store.dtype())?;
        let x = self.up1.forward(&z)?.relu()?;
        self.up2.forward(&x)
    }

    pub fn macs(&self) -> u64 {
        let (h, w) = self.up1.output_size(PROMPT_SPATIAL, PROMPT_SPATIAL);
        self.up1.macs(PROMPT_SPATIAL, PROMPT_SPATIAL) + self.up2.macs(h, w)
    }
}

impl NamedParameters for SurrogateDecoder {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.store.named_parameters()
    }
}

/// `h(z)` for a single prompt.
pub fn surrogate_forward(h: &SurrogateDecoder, prompt: &PromptEmbedding) -> Result<LogitMap> {
    if prompt.batch_size() != 1 {
        return Err(Error::shape(
            "surrogate prompt",
            &[1, PROMPT_CHANNELS, PROMPT_SPATIAL, PROMPT_SPATIAL],
            prompt.tensor().dims(),
        ));
    }
    LogitMap::from_tensor(&h.forward(prompt)?.squeeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn zero_decoder() -> SurrogateDecoder {
        let h = SurrogateDecoder::new(&SurrogateConfig::default()).unwrap();
        for (name, t) in h.named_parameters() {
            h.store().set(&name, &t.zeros_like().unwrap()).unwrap();
        }
        h
    }

    #[test]
    fn zero_decoder_gives_zero_logits() {
        let h = zero_decoder();
        let z = PromptEmbedding::new(Tensor::zeros((1, 256, 64, 64), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let out = surrogate_forward(&h, &z).unwrap();
        assert_eq!(out.dims(), (256, 256));
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_four_times_the_prompt_grid() {
        let h = SurrogateDecoder::new(&SurrogateConfig::default()).unwrap();
        let z = Tensor::rand(-1f32, 1f32, (2, 256, 64, 64), &Device::Cpu).unwrap();
        let out = h.forward(&PromptEmbedding::new(z).unwrap()).unwrap();
        assert_eq!(out.dims(), &[2, 1, 256, 256]);
    }

    #[test]
    fn batched_prompt_is_rejected_by_single_forward() {
        let h = SurrogateDecoder::new(&SurrogateConfig::default()).unwrap();
        let z = PromptEmbedding::new(Tensor::zeros((2, 256, 64, 64), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(surrogate_forward(&h, &z), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn parameter_count() {
        let h = SurrogateDecoder::new(&SurrogateConfig::default()).unwrap();
        assert_eq!(h.param_count(), 256 * 64 * 16 + 64 + 64 * 16 + 1);
    }
}
