//! Versioned checkpoint archives: one safetensors file whose header
//! metadata carries the run description as JSON.
//!
//! Tensor names are prefixed by section: `param/`, `buffer/`, `adam_m/`,
//! `adam_v/`. Values keep their training dtype so a resumed run continues
//! bitwise.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::error::{Error, Result};
use crate::prompt_generator::GeneratorConfig;
use crate::surrogate::SurrogateConfig;

pub const CHECKPOINT_FORMAT: &str = "promptseg-checkpoint/1";
const META_KEY: &str = "promptseg";
const FORMAT_KEY: &str = "format";

pub const PARAM: &str = "param/";
pub const BUFFER: &str = "buffer/";
pub const ADAM_M: &str = "adam_m/";
pub const ADAM_V: &str = "adam_v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Generator,
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub surrogate: Option<SurrogateConfig>,
    pub state: TrainState,
    /// Global digest of the frozen backend the run trained against.
    #[serde(default)]
    pub backend_digest: Option<String>,
    /// Global digest of the generator weights stored here, or of the frozen
    /// generator a surrogate was trained on.
    pub generator_digest: String,
    /// `(h, w)` the training images were resized to.
    #[serde(default)]
    pub input_size: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Tensors of one section with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }
}

fn encode(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn decode(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    sections: &[(&str, Vec<(String, Tensor)>)],
) -> Result<()> {
    let mut encoded = Vec::new();
    for (prefix, tensors) in sections {
        for (name, t) in tensors {
            let (dtype, bytes) = encode(t)?;
            encoded.push((format!("{prefix}{name}"), dtype, t.dims().to_vec(), bytes));
        }
    }
    let views = encoded
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert(FORMAT_KEY.to_string(), CHECKPOINT_FORMAT.to_string());
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    safetensors::tensor::serialize_to_file(views, Some(info), &tmp)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let info = header.metadata().clone().unwrap_or_default();
    match info.get(FORMAT_KEY) {
        Some(f) if f == CHECKPOINT_FORMAT => {}
        Some(f) => {
            return Err(Error::Checkpoint(format!(
                "{}: format {f} is not {CHECKPOINT_FORMAT}",
                path.display()
            )))
        }
        None => return Err(Error::Checkpoint(format!("{}: not a checkpoint archive", path.display()))),
    }
    let meta: CheckpointMeta = serde_json::from_str(
        info.get(META_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("{}: metadata missing", path.display())))?,
    )?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let tensors = st
        .tensors()
        .iter()
        .map(|(name, view)| Ok((name.clone(), decode(view, device)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Checkpoint { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            kind: CheckpointKind::Generator,
            generator: GeneratorConfig::tiny_test(),
            surrogate: None,
            state: TrainState::new(7),
            backend_digest: Some("ab".into()),
            generator_digest: "cd".into(),
            input_size: Some((64, 64)),
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let dev = Device::Cpu;
        let a = Tensor::new(&[0.1f32, -3.7e-12, f32::MIN_POSITIVE], &dev).unwrap();
        let b = Tensor::new(&[[1.0f64 / 3.0, 2.5]], &dev).unwrap();
        save_checkpoint(
            &path,
            &meta(),
            &[(PARAM, vec![("w".into(), a.clone())]), (ADAM_M, vec![("w".into(), b.clone())])],
        )
        .unwrap();
        let ck = load_checkpoint(&path, &dev).unwrap();
        assert_eq!(ck.meta, meta());
        assert_eq!(ck.section(PARAM)["w"].to_vec1::<f32>().unwrap(), a.to_vec1::<f32>().unwrap());
        assert_eq!(ck.section(ADAM_M)["w"].to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
        assert!(ck.section(BUFFER).is_empty());
    }

    #[test]
    fn foreign_safetensors_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.safetensors");
        let t = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        candle_core::safetensors::save(&HashMap::from([("x".to_string(), t)]), &path).unwrap();
        assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
    }
}
