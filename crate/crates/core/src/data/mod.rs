//! Dataset layouts, resizing and augmentation.
//!
//! Still-image datasets use `<root>/<split>/images/*` with masks of the same
//! stem (optionally suffixed `_anno` or `_mask`) in `<root>/<split>/masks/`.
//! A `manifest.json` in the split directory, listing
//! `{"samples": [{"image": "...", "mask": "..."}]}` relative to it, replaces
//! directory discovery. Polyp test data adds a partition level:
//! `<root>/test/<partition>/images|masks`.

pub mod augment;
pub mod io;
pub mod sunseg;
pub mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::SampleRecord;
use crate::error::{Error, Result};

pub use augment::{AugmentationRecipe, DrawSource, SeededDraws, Transform, ZeroDraws};
pub use io::MaskEncoding;
pub use sunseg::Difficulty;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Monuseg,
    Glas,
    PolypCombined,
    Sunseg,
    SyntheticBlobs,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Monuseg => "monuseg",
            DatasetName::Glas => "glas",
            DatasetName::PolypCombined => "polyp-combined",
            DatasetName::Sunseg => "sunseg",
            DatasetName::SyntheticBlobs => "synthetic-blobs",
        }
    }

    pub fn default_resize(self) -> (usize, usize) {
        match self {
            DatasetName::Monuseg => (512, 512),
            DatasetName::Glas => (224, 224),
            DatasetName::PolypCombined | DatasetName::Sunseg => (352, 352),
            DatasetName::SyntheticBlobs => (64, 64),
        }
    }

    pub fn default_mask_encoding(self) -> MaskEncoding {
        match self {
            DatasetName::PolypCombined | DatasetName::Sunseg => MaskEncoding::HalfRange,
            _ => MaskEncoding::NonZero,
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Polyp test partitions and their published sizes.
pub const POLYP_TEST_PARTITIONS: [(&str, usize); 4] = [
    ("CVC-ClinicDB", 100),
    ("Kvasir", 64),
    ("ETIS-LaribPolypDB", 196),
    ("CVC-ColonDB", 380),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    #[serde(default)]
    pub root_dir: PathBuf,
    /// `(height, width)`; defaults per dataset.
    #[serde(default)]
    pub resize: Option<(usize, usize)>,
    pub split: Split,
    #[serde(default)]
    pub video: bool,
    /// Polyp test partition; all four when absent.
    #[serde(default)]
    pub partition: Option<String>,
    /// Video test sub-split.
    #[serde(default)]
    pub difficulty: Option<Difficulty>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub mask_encoding: Option<MaskEncoding>,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, root_dir: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            name,
            root_dir: root_dir.into(),
            resize: None,
            split,
            video: name == DatasetName::Sunseg,
            partition: None,
            difficulty: None,
            synthetic: None,
            mask_encoding: None,
        }
    }

    pub fn synthetic_blobs(n: usize, seed: u64) -> Self {
        Self {
            synthetic: Some(SyntheticSpec { n, seed }),
            ..Self::new(DatasetName::SyntheticBlobs, PathBuf::new(), Split::Train)
        }
    }

    pub fn resize(&self) -> (usize, usize) {
        self.resize.unwrap_or_else(|| self.name.default_resize())
    }

    pub fn mask_encoding(&self) -> MaskEncoding {
        self.mask_encoding.unwrap_or_else(|| self.name.default_mask_encoding())
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root_dir.join(self.split.as_str())
    }

    /// Published sample count, when one exists.
    pub fn expected_count(&self) -> Option<usize> {
        match (self.name, self.split) {
            (DatasetName::Glas, Split::Train) => Some(85),
            (DatasetName::Glas, Split::Test) => Some(80),
            (DatasetName::Monuseg, Split::Train) => Some(30),
            (DatasetName::Monuseg, Split::Test) => Some(14),
            (DatasetName::PolypCombined, Split::Train) => Some(1448),
            (DatasetName::PolypCombined, Split::Test) => match &self.partition {
                Some(p) => POLYP_TEST_PARTITIONS.iter().find(|(n, _)| n == p).map(|(_, c)| *c),
                None => Some(POLYP_TEST_PARTITIONS.iter().map(|(_, c)| c).sum()),
            },
            (DatasetName::SyntheticBlobs, _) => self.synthetic.map(|s| s.n),
            (DatasetName::Sunseg, _) => None,
        }
    }
}

/// Where one sample comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleSource {
    Files {
        image: PathBuf,
        mask: PathBuf,
        frame_index: Option<u32>,
        /// Clip or partition name.
        group: Option<String>,
    },
    Synthetic {
        seed: u64,
        index: u64,
    },
}

/// Lazily loaded dataset: paths are resolved up front, pixels on demand.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    spec: DatasetSpec,
    sources: Vec<SampleSource>,
}

#[derive(Deserialize)]
struct ManifestEntry {
    image: PathBuf,
    mask: PathBuf,
}

#[derive(Deserialize)]
struct Manifest {
    samples: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";
const MASK_SUFFIXES: [&str; 3] = ["", "_anno", "_mask"];

fn index_still(dir: &Path, group: Option<String>) -> Result<Vec<SampleSource>> {
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        return Ok(m
            .samples
            .into_iter()
            .map(|e| SampleSource::Files {
                image: dir.join(e.image),
                mask: dir.join(e.mask),
                frame_index: None,
                group: group.clone(),
            })
            .collect());
    }
    let images = dir.join("images");
    let masks = dir.join("masks");
    if !images.is_dir() {
        return Err(Error::Dataset(format!("missing image directory {}", images.display())));
    }
    sunseg::sorted_images(&images)?
        .into_iter()
        .map(|image| {
            let stem = image.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let mask = MASK_SUFFIXES
                .iter()
                .find_map(|suffix| sunseg::find_by_stem(&masks, &format!("{stem}{suffix}")))
                .ok_or_else(|| Error::Dataset(format!("no mask for image {}", image.display())))?;
            Ok(SampleSource::Files {
                image,
                mask,
                frame_index: None,
                group: group.clone(),
            })
        })
        .collect()
}

impl DatasetIndex {
    pub fn build(spec: &DatasetSpec) -> Result<Self> {
        let sources = match spec.name {
            DatasetName::SyntheticBlobs => {
                let s = spec
                    .synthetic
                    .ok_or_else(|| Error::Config("synthetic-blobs needs `synthetic = { n, seed }`".into()))?;
                (0..s.n as u64)
                    .map(|index| SampleSource::Synthetic { seed: s.seed, index })
                    .collect()
            }
            DatasetName::Sunseg => sunseg::index_clips(&spec.split_dir(), spec.difficulty)?,
            DatasetName::PolypCombined if spec.split == Split::Test => {
                let parts: Vec<&str> = match &spec.partition {
                    Some(p) => vec![p.as_str()],
                    None => POLYP_TEST_PARTITIONS.iter().map(|(n, _)| *n).collect(),
                };
                let mut all = Vec::new();
                for p in parts {
                    all.extend(index_still(&spec.split_dir().join(p), Some(p.to_string()))?);
                }
                all
            }
            _ => index_still(&spec.split_dir(), None)?,
        };
        if let Some(expected) = spec.expected_count() {
            if expected != sources.len() {
                log::warn!(
                    "{} {} has {} samples; the published split has {expected}",
                    spec.name,
                    spec.split.as_str(),
                    sources.len()
                );
            }
        }
        Ok(Self {
            spec: spec.clone(),
            sources,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn sources(&self) -> &[SampleSource] {
        &self.sources
    }

    /// Keeps only the listed positions, in the given order.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            spec: self.spec.clone(),
            sources: positions.iter().map(|&i| self.sources[i].clone()).collect(),
        }
    }

    /// Loads, binarises and resizes sample `i`.
    pub fn get(&self, i: usize) -> Result<SampleRecord> {
        let (h, w) = self.spec.resize();
        match &self.sources[i] {
            SampleSource::Synthetic { seed, index } => {
                let s = synthetic::blob_sample(*seed, *index, h.max(w))?;
                if (h, w) == (s.image.height(), s.image.width()) {
                    Ok(s)
                } else {
                    SampleRecord::new(
                        io::resize_image(&s.image, h, w),
                        io::resize_mask(&s.mask, h, w),
                        s.dataset_id,
                        None,
                        s.source_path,
                    )
                }
            }
            SampleSource::Files {
                image,
                mask,
                frame_index,
                group,
            } => {
                let img = io::read_image(image)?;
                let m = io::read_mask(mask, self.spec.mask_encoding())?;
                if (img.height(), img.width()) != m.dims() {
                    return Err(Error::Dataset(format!(
                        "{}: image is {}x{} but its mask is {}x{}",
                        image.display(),
                        img.height(),
                        img.width(),
                        m.height(),
                        m.width()
                    )));
                }
                let id = match group {
                    Some(g) => format!("{}/{g}", self.spec.name),
                    None => self.spec.name.to_string(),
                };
                SampleRecord::new(
                    io::resize_image(&img, h, w),
                    io::resize_mask(&m, h, w),
                    id,
                    *frame_index,
                    image.to_string_lossy(),
                )
            }
        }
    }

    pub fn load_all(&self) -> Result<Vec<SampleRecord>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Every sample of a dataset, in deterministic order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<SampleRecord>> {
    DatasetIndex::build(spec)?.load_all()
}

/// Frames of the video dataset as independent samples.
pub fn load_sunseg(spec: &DatasetSpec) -> Result<Vec<SampleRecord>> {
    if spec.name != DatasetName::Sunseg {
        return Err(Error::Config(format!("{} is not a video dataset", spec.name)));
    }
    load_dataset(spec)
}

pub fn make_augmenter(name: DatasetName) -> AugmentationRecipe {
    AugmentationRecipe::for_dataset(name.as_str())
}
