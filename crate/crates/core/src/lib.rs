//! Image-conditioned dense prompts for a frozen promptable segmenter.
//!
//! A trainable [`prompt_generator::PromptGenerator`] maps an image to a
//! `256 x 64 x 64` embedding that replaces the dense prompt of a frozen
//! segmenter. Only the generator learns; the segmenter is verified frozen
//! through parameter snapshots.

pub mod data;
pub mod distance;
pub mod domain;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod prompt_generator;
pub mod segmenter;
pub mod surrogate;
pub mod train;

pub use domain::{
    binarize, Image, ImageEmbedding, LogitMap, Mask, Precision, ProbabilityMap, PromptEmbedding,
    SampleRecord,
};
pub use error::{Error, Result};
pub use params::{snapshot_parameters, NamedParameters, ParameterSnapshot, ParamStore};
pub use prompt_generator::{GeneratorConfig, PromptGenerator};
pub use losses::{seg_loss, LossValue};
pub use segmenter::{build_backend, PromptableSegmenter, SegmenterConfig, SegmenterOutput};
pub use surrogate::{surrogate_forward, SurrogateConfig, SurrogateDecoder};
pub use train::{fit, train_step, TrainConfig, Trainer};
