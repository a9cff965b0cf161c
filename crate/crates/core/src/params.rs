//! Named parameter storage and content-addressed snapshots.
//!
//! A [`ParamStore`] owns every tensor a module reads: trainable parameters
//! and non-trainable buffers (batch-norm running statistics). Stores built
//! with `trainable = false` hand out detached tensors, so autodiff never
//! records a gradient for them while still propagating through them.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initialisation rule for a new tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal: `N(0, 2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    Uniform { low: f64, high: f64 },
    Normal { std: f64 },
}

pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    trainable: bool,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64, trainable: bool) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device: device.clone(),
            trainable,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("normal init: {e}")))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Uniform { low, high } => {
                let dist = Uniform::new(low, high)
                    .map_err(|e| Error::Config(format!("uniform init: {e}")))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn insert(&mut self, name: String, shape: &[usize], init: Init, buffer: bool) -> Result<Tensor> {
        let map = if buffer { &self.buffers } else { &self.params };
        if map.contains_key(&name) {
            return Err(Error::Config(format!("duplicate tensor name {name}")));
        }
        let var = self.make(shape, init)?;
        let handle = if self.trainable && !buffer {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        };
        if buffer {
            self.buffers.insert(name, var);
        } else {
            self.params.insert(name, var);
        }
        Ok(handle)
    }

    /// Trainable (when the store is) parameters, sorted by name.
    pub fn params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.buffers.iter()
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Var> {
        self.buffers.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter or buffer in place; modules holding the
    /// tensor observe the new value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape("parameter", var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }
}

/// A name prefix inside a [`ParamStore`] used while building modules.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        Scope {
            prefix: self.join(name.as_ref()),
            store: self.store,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.join(name);
        self.store.insert(full, shape, init, false)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.join(name);
        self.store.insert(full, shape, init, true)
    }

    pub fn buffer_var(&self, name: &str) -> Option<Var> {
        self.store.buffers.get(&self.join(name)).cloned()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Anything exposing named parameter tensors.
pub trait NamedParameters {
    fn named_parameters(&self) -> Vec<(String, Tensor)>;
}

impl NamedParameters for ParamStore {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }
}

impl NamedParameters for Vec<(String, Tensor)> {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// SHA-256 of the little-endian f32 serialisation, hex encoded.
    pub checksum: String,
}

/// Content hash of a model's parameters, used to prove a model stayed frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSnapshot {
    pub entries: Vec<SnapshotEntry>,
    pub global_checksum: String,
}

impl ParameterSnapshot {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Names whose checksum differs between two snapshots.
    pub fn changed_entries(&self, other: &ParameterSnapshot) -> Vec<String> {
        let theirs: BTreeMap<_, _> = other.entries.iter().map(|e| (&e.name, e)).collect();
        self.entries
            .iter()
            .filter(|e| theirs.get(&e.name).is_none_or(|o| o.checksum != e.checksum))
            .map(|e| e.name.clone())
            .collect()
    }
}

fn tensor_checksum(t: &Tensor) -> Result<String> {
    let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn snapshot_parameters(model: &(impl NamedParameters + ?Sized)) -> Result<ParameterSnapshot> {
    let mut entries = model
        .named_parameters()
        .into_iter()
        .map(|(name, t)| {
            Ok(SnapshotEntry {
                shape: t.dims().to_vec(),
                checksum: tensor_checksum(&t)?,
                name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| {
        a.name
            .cmp(&b.name)
            .then_with(|| a.shape.cmp(&b.shape))
            .then_with(|| a.checksum.cmp(&b.checksum))
    });
    let mut hasher = Sha256::new();
    for e in &entries {
        hasher.update((e.name.len() as u64).to_le_bytes());
        hasher.update(e.name.as_bytes());
        hasher.update((e.shape.len() as u64).to_le_bytes());
        for d in &e.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update(e.checksum.as_bytes());
    }
    Ok(ParameterSnapshot {
        entries,
        global_checksum: hex::encode(hasher.finalize()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_param_model() -> Vec<(String, Tensor)> {
        let dev = Device::Cpu;
        vec![
            ("a".into(), Tensor::zeros((2, 3), DType::F32, &dev).unwrap()),
            ("b".into(), Tensor::zeros(4, DType::F32, &dev).unwrap()),
        ]
    }

    #[test]
    fn zero_model_snapshot_is_reproducible() {
        let s1 = snapshot_parameters(&two_param_model()).unwrap();
        let s2 = snapshot_parameters(&two_param_model()).unwrap();
        assert_eq!(s1.entries.len(), 2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let mut m = two_param_model();
        let s1 = snapshot_parameters(&m).unwrap();
        m.reverse();
        assert_eq!(s1.global_checksum, snapshot_parameters(&m).unwrap().global_checksum);
    }

    #[test]
    fn perturbing_one_weight_changes_digest() {
        let m = two_param_model();
        let before = snapshot_parameters(&m).unwrap();
        let mut m2 = m.clone();
        let mut data = m2[1].1.to_vec1::<f32>().unwrap();
        data[2] += 1e-3;
        m2[1].1 = Tensor::new(data.as_slice(), &Device::Cpu).unwrap();
        let after = snapshot_parameters(&m2).unwrap();
        assert_ne!(before.global_checksum, after.global_checksum);
        assert_eq!(before.changed_entries(&after), vec!["b".to_string()]);
    }

    #[test]
    fn snapshot_json_roundtrip() {
        let s = snapshot_parameters(&two_param_model()).unwrap();
        let back = ParameterSnapshot::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn store_is_seed_deterministic() {
        let build = || {
            let mut store = ParamStore::new(DType::F32, &Device::Cpu, 3, true);
            let mut root = store.root();
            let mut sub = root.sub("conv");
            sub.param("weight", &[4, 2, 3, 3], Init::KaimingNormal { fan_in: 18 })
                .unwrap();
            sub.buffer("running_mean", &[4], Init::Zeros).unwrap();
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(
            snapshot_parameters(&a).unwrap(),
            snapshot_parameters(&b).unwrap()
        );
        assert!(a.param("conv.weight").is_some());
        assert!(a.buffer("conv.running_mean").is_some());
        assert_eq!(a.param_count(), 72);
    }

    #[test]
    fn frozen_store_hands_out_detached_tensors() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu, 0, false);
        let w = store
            .root()
            .param("w", &[3], Init::Ones)
            .unwrap();
        let loss = w.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&w).is_none());
    }
}
