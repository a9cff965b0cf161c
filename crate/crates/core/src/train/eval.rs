//! Evaluation and inference from checkpoints.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use super::checkpoint::{load_checkpoint, Checkpoint, CheckpointKind, BUFFER, PARAM};
use super::SampleProvider;
use crate::data::io::{read_image, resize_image, write_mask, write_probability};
use crate::data::{DatasetIndex, DatasetSpec};
use crate::domain::{binarize, Image, LogitMap, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{sample_metrics, MetricConfig, MetricReport};
use crate::nn::{resize_bilinear, Mode};
use crate::params::{snapshot_parameters, ParamStore};
use crate::prompt_generator::PromptGenerator;
use crate::segmenter::{build_backend, forward_batch, PromptableSegmenter, SegmenterConfig};
use crate::surrogate::SurrogateDecoder;

/// A trained model mapping images to logits at image resolution.
pub enum Predictor<'a> {
    /// `S(I, g(I))`.
    Composed {
        backend: &'a dyn PromptableSegmenter,
        g: &'a PromptGenerator,
    },
    /// `h(g(I))`.
    Surrogate {
        g: &'a PromptGenerator,
        h: &'a SurrogateDecoder,
    },
}

impl Predictor<'_> {
    pub fn dtype(&self) -> DType {
        match self {
            Predictor::Composed { g, .. } | Predictor::Surrogate { g, .. } => g.store().dtype(),
        }
    }

    pub fn device(&self) -> &Device {
        match self {
            Predictor::Composed { g, .. } | Predictor::Surrogate { g, .. } => g.store().device(),
        }
    }

    /// `(B, 1, H, W)` logits for `(B, 3, H, W)` images, inference mode.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        match self {
            Predictor::Composed { backend, g } => forward_batch(*backend, g, images, Mode::Eval)?.upsampled(),
            Predictor::Surrogate { g, h: dec } => {
                let z = g.forward(images, Mode::Eval)?.detach();
                resize_bilinear(&dec.forward(&z)?, h, w)
            }
        }
    }

    pub fn logit_map(&self, image: &Image) -> Result<LogitMap> {
        let x = image.to_tensor(self.dtype(), self.device())?;
        LogitMap::from_tensor(&self.logits(&x)?)
    }
}

fn restore(store: &ParamStore, ck: &Checkpoint, path: &Path) -> Result<()> {
    let params = ck.section(PARAM);
    let buffers = ck.section(BUFFER);
    for (name, _) in store.params().chain(store.buffers()) {
        let t = params
            .get(name)
            .or_else(|| buffers.get(name))
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks tensor {name}", path.display())))?;
        store.set(name, t)?;
    }
    Ok(())
}

/// Rebuilds the generator stored in a generator checkpoint.
pub fn load_generator(path: &Path) -> Result<(PromptGenerator, Checkpoint)> {
    let ck = load_checkpoint(path, &Device::Cpu)?;
    if ck.meta.kind != CheckpointKind::Generator {
        return Err(Error::Checkpoint(format!("{} is not a generator checkpoint", path.display())));
    }
    let mut config = ck.meta.generator.clone();
    // Weights come from the checkpoint, not the backbone file.
    config.pretrained_backbone = false;
    let g = PromptGenerator::build(&config)?;
    restore(g.store(), &ck, path)?;
    Ok((g, ck))
}

/// Rebuilds a surrogate decoder; `g` must be the generator it was fitted on.
pub fn load_surrogate(path: &Path, g: &PromptGenerator) -> Result<(SurrogateDecoder, Checkpoint)> {
    let ck = load_checkpoint(path, &Device::Cpu)?;
    let config = match (ck.meta.kind, &ck.meta.surrogate) {
        (CheckpointKind::Surrogate, Some(c)) => c.clone(),
        _ => return Err(Error::Checkpoint(format!("{} is not a surrogate checkpoint", path.display()))),
    };
    let digest = snapshot_parameters(g)?.global_checksum;
    if digest != ck.meta.generator_digest {
        return Err(Error::Checkpoint(format!(
            "{} was fitted on generator {}, not {digest}",
            path.display(),
            ck.meta.generator_digest
        )));
    }
    let h = SurrogateDecoder::new(&config)?;
    restore(h.store(), &ck, path)?;
    Ok((h, ck))
}

/// Scores every sample of `data`.
pub fn evaluate_predictor(
    predictor: &Predictor<'_>,
    data: &dyn SampleProvider,
    config: &MetricConfig,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let s = data.get(i)?;
        let probs = predictor.logit_map(&s.image)?.probabilities();
        rows.push(sample_metrics(s.sample_id(), &probs, &s.mask, config)?);
    }
    Ok(MetricReport::from_samples(rows, *config))
}

/// Generator checkpoint + backend on a dataset.
pub fn evaluate(
    checkpoint: &Path,
    dataset: &DatasetSpec,
    backend: &SegmenterConfig,
    config: &MetricConfig,
) -> Result<MetricReport> {
    let (g, ck) = load_generator(checkpoint)?;
    let backend = build_backend(backend)?;
    if let Some(d) = &ck.meta.backend_digest {
        let now = snapshot_parameters(backend.as_ref())?.global_checksum;
        if *d != now {
            log::warn!("evaluating with a backend ({now}) other than the training one ({d})");
        }
    }
    let index = DatasetIndex::build(dataset)?;
    evaluate_predictor(
        &Predictor::Composed {
            backend: backend.as_ref(),
            g: &g,
        },
        &index,
        config,
    )
}

/// Surrogate decoder checkpoint on a dataset.
pub fn evaluate_surrogate(
    generator_checkpoint: &Path,
    surrogate_checkpoint: &Path,
    dataset: &DatasetSpec,
    config: &MetricConfig,
) -> Result<MetricReport> {
    let (g, _) = load_generator(generator_checkpoint)?;
    let (h, _) = load_surrogate(surrogate_checkpoint, &g)?;
    let index = DatasetIndex::build(dataset)?;
    evaluate_predictor(&Predictor::Surrogate { g: &g, h: &h }, &index, config)
}

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    pub out_dir: PathBuf,
    pub save_probabilities: bool,
    /// `(h, w)` the model sees; the checkpoint's training size by default.
    pub resize: Option<(usize, usize)>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Default)]
pub struct InferSummary {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, String)>,
}

fn infer_one(predictor: &Predictor<'_>, path: &Path, options: &InferOptions) -> Result<Vec<PathBuf>> {
    let image = read_image(path)?;
    let (h, w) = (image.height(), image.width());
    let input = match options.resize {
        Some((rh, rw)) if (rh, rw) != (h, w) => resize_image(&image, rh, rw),
        _ => image,
    };
    let x = input.to_tensor(predictor.dtype(), predictor.device())?;
    let logits = resize_bilinear(&predictor.logits(&x)?, h, w)?;
    let map = LogitMap::from_tensor(&logits)?;
    let mask = binarize(&map, options.threshold.unwrap_or(DEFAULT_THRESHOLD))?;
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::InvalidImage(format!("{} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let mask_path = options.out_dir.join(format!("{stem}.png"));
    write_mask(&mask_path, &mask)?;
    let mut written = vec![mask_path];
    if options.save_probabilities {
        let p = options.out_dir.join(format!("{stem}_prob.png"));
        write_probability(&p, &map.probabilities())?;
        written.push(p);
    }
    Ok(written)
}

/// Writes one binary PNG per readable image; failures are collected and
/// the run continues.
pub fn infer_with(predictor: &Predictor<'_>, image_paths: &[PathBuf], options: &InferOptions) -> Result<InferSummary> {
    let mut summary = InferSummary::default();
    if image_paths.is_empty() {
        return Ok(summary);
    }
    std::fs::create_dir_all(&options.out_dir).map_err(|e| Error::io(&options.out_dir, e))?;
    for path in image_paths {
        match infer_one(predictor, path, options) {
            Ok(files) => summary.written.extend(files),
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                summary.failures.push((path.clone(), e.to_string()));
            }
        }
    }
    Ok(summary)
}

pub fn infer(
    checkpoint: &Path,
    image_paths: &[PathBuf],
    backend: &SegmenterConfig,
    options: &InferOptions,
) -> Result<InferSummary> {
    if image_paths.is_empty() {
        return Ok(InferSummary::default());
    }
    let (g, ck) = load_generator(checkpoint)?;
    let backend = build_backend(backend)?;
    let mut options = options.clone();
    options.resize = options.resize.or(ck.meta.input_size);
    infer_with(
        &Predictor::Composed {
            backend: backend.as_ref(),
            g: &g,
        },
        image_paths,
        &options,
    )
}
